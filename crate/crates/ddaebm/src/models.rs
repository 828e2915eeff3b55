//! The three parameterized functions of the minimax game.
//!
//! Each network follows the same two-branch layout: one branch embeds the
//! point-valued input, a second embeds a sinusoidal encoding of the integer
//! time step, and a shared trunk decodes their concatenation. Batch norm
//! appears in the generator and encoder only.
//!
//! The energy is never a raw network output: the trunk produces a point
//! `f(x, t)` of the same dimension as `x` and the energy is the negative
//! squared distance `-||x - f(x, t)||^2 / 2`, which is bounded above by
//! zero and peaks where the network reproduces its input.

use ndarray::{Array1, Array2};
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::nn::{clamp, sinusoidal_embedding, BatchNorm, Dense, PRelu, ParamStore};
use crate::tape::{Tape, Var};

/// Logvar clamp bounds for the encoder head.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Architecture sizes; defaults mirror the toy networks.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NetworkShape {
    pub data_dim: usize,
    pub latent_dim: usize,
    pub branch_hidden: usize,
    pub branch_out: usize,
    pub trunk_hidden: usize,
    pub time_embed_dim: usize,
    pub encoder_trunk_out: usize,
}

impl NetworkShape {
    pub fn toy(data_dim: usize, latent_dim: usize) -> Self {
        NetworkShape {
            data_dim,
            latent_dim,
            branch_hidden: 16,
            branch_out: 32,
            trunk_hidden: 300,
            time_embed_dim: 16,
            encoder_trunk_out: 16,
        }
    }
}

/// Negative half squared distance between a point and its reconstruction,
/// summed per sample: `-0.5 * ||x - f||^2`.
pub fn l2_energy_head(tape: &mut Tape, x: Var, f: Var) -> Var {
    let diff = tape.sub(x, f);
    let sq = tape.square(diff);
    let ssq = tape.sum_cols(sq);
    tape.scale(ssq, -0.5)
}

// ── energy network ────────────────────────────────────────────────────

#[derive(Clone)]
pub struct EnergyNet {
    pub store: ParamStore,
    pub shape: NetworkShape,
    x_fc1: Dense,
    x_act: PRelu,
    x_fc2: Dense,
    t_fc1: Dense,
    t_act: PRelu,
    t_fc2: Dense,
    trunk_fc1: Dense,
    trunk_act1: PRelu,
    trunk_fc2: Dense,
    trunk_act2: PRelu,
    head: Dense,
}

impl EnergyNet {
    pub fn new(shape: &NetworkShape, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let s = shape;
        EnergyNet {
            x_fc1: Dense::new(&mut store, rng, "x_fc1", s.data_dim, s.branch_hidden, 1.0),
            x_act: PRelu::new(&mut store, "x_act"),
            x_fc2: Dense::new(&mut store, rng, "x_fc2", s.branch_hidden, s.branch_out, 1.0),
            t_fc1: Dense::new(&mut store, rng, "t_fc1", s.time_embed_dim, s.branch_hidden, 1.0),
            t_act: PRelu::new(&mut store, "t_act"),
            t_fc2: Dense::new(&mut store, rng, "t_fc2", s.branch_hidden, s.branch_out, 1.0),
            trunk_fc1: Dense::new(&mut store, rng, "trunk_fc1", 2 * s.branch_out, s.trunk_hidden, 1.0),
            trunk_act1: PRelu::new(&mut store, "trunk_act1"),
            trunk_fc2: Dense::new(&mut store, rng, "trunk_fc2", s.trunk_hidden, s.trunk_hidden, 1.0),
            trunk_act2: PRelu::new(&mut store, "trunk_act2"),
            head: Dense::new(&mut store, rng, "head", s.trunk_hidden, s.data_dim, 1.0),
            store,
            shape: shape.clone(),
        }
    }

    /// The reconstruction `f(x, t)`; same shape as `x`.
    pub fn backbone(&self, tape: &mut Tape, vars: &[Var], x: Var, ts: &[usize]) -> Var {
        let (n, d) = tape.shape(x);
        assert_eq!(d, self.shape.data_dim, "energy input width");
        assert_eq!(n, ts.len(), "time index count");
        let emb = tape.leaf(sinusoidal_embedding(ts, self.shape.time_embed_dim));

        let h = self.x_fc1.forward(tape, vars, x);
        let h = self.x_act.forward(tape, vars, h);
        let x_out = self.x_fc2.forward(tape, vars, h);

        let h = self.t_fc1.forward(tape, vars, emb);
        let h = self.t_act.forward(tape, vars, h);
        let t_out = self.t_fc2.forward(tape, vars, h);

        let joint = tape.concat_cols(x_out, t_out);
        let h = self.trunk_fc1.forward(tape, vars, joint);
        let h = self.trunk_act1.forward(tape, vars, h);
        let h = self.trunk_fc2.forward(tape, vars, h);
        let h = self.trunk_act2.forward(tape, vars, h);
        self.head.forward(tape, vars, h)
    }

    /// Per-sample energy `-0.5 ||x - f(x, t)||^2` as a (n, 1) node.
    pub fn energy(&self, tape: &mut Tape, vars: &[Var], x: Var, ts: &[usize]) -> Var {
        let f = self.backbone(tape, vars, x, ts);
        l2_energy_head(tape, x, f)
    }

    /// Plain evaluation without keeping a graph.
    pub fn energy_batch(&self, x: &Array2<f64>, ts: &[usize]) -> Result<Array1<f64>> {
        if x.ncols() != self.shape.data_dim {
            return Err(Error::shape(format!(
                "energy input width {} vs network width {}",
                x.ncols(),
                self.shape.data_dim
            )));
        }
        if x.nrows() != ts.len() {
            return Err(Error::shape("energy: batch and time index count differ"));
        }
        let mut tape = Tape::new();
        let vars = self.store.stage(&mut tape);
        let xv = tape.leaf(x.clone());
        let e = self.energy(&mut tape, &vars, xv, ts);
        Ok(tape.value(e).column(0).to_owned())
    }

    /// Gradient of the summed energy with respect to the input points.
    pub fn energy_input_grad(&self, x: &Array2<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        if x.ncols() != self.shape.data_dim {
            return Err(Error::shape("energy_input_grad input width"));
        }
        let mut tape = Tape::new();
        let vars = self.store.stage(&mut tape);
        let xv = tape.leaf(x.clone());
        let e = self.energy(&mut tape, &vars, xv, ts);
        let total = tape.sum_all(e);
        let g = tape.grad(total, &[xv])[0].expect("energy always depends on x");
        Ok(tape.value(g).clone())
    }
}

// ── generator network ─────────────────────────────────────────────────

#[derive(Clone)]
pub struct GeneratorNet {
    pub store: ParamStore,
    pub shape: NetworkShape,
    x_fc1: Dense,
    x_act: PRelu,
    x_bn: BatchNorm,
    x_fc2: Dense,
    t_fc1: Dense,
    t_act: PRelu,
    t_fc2: Dense,
    trunk_fc1: Dense,
    trunk_act1: PRelu,
    trunk_bn1: BatchNorm,
    trunk_fc2: Dense,
    trunk_act2: PRelu,
    trunk_bn2: BatchNorm,
    head: Dense,
}

impl GeneratorNet {
    pub fn new(shape: &NetworkShape, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let s = shape;
        let in_dim = s.data_dim + s.latent_dim;
        GeneratorNet {
            x_fc1: Dense::new(&mut store, rng, "x_fc1", in_dim, s.branch_hidden, 1.0),
            x_act: PRelu::new(&mut store, "x_act"),
            x_bn: BatchNorm::new(&mut store, "x_bn", s.branch_hidden),
            x_fc2: Dense::new(&mut store, rng, "x_fc2", s.branch_hidden, s.branch_out, 1.0),
            t_fc1: Dense::new(&mut store, rng, "t_fc1", s.time_embed_dim, s.branch_hidden, 1.0),
            t_act: PRelu::new(&mut store, "t_act"),
            t_fc2: Dense::new(&mut store, rng, "t_fc2", s.branch_hidden, s.branch_out, 1.0),
            trunk_fc1: Dense::new(&mut store, rng, "trunk_fc1", 2 * s.branch_out, s.trunk_hidden, 1.0),
            trunk_act1: PRelu::new(&mut store, "trunk_act1"),
            trunk_bn1: BatchNorm::new(&mut store, "trunk_bn1", s.trunk_hidden),
            trunk_fc2: Dense::new(&mut store, rng, "trunk_fc2", s.trunk_hidden, s.trunk_hidden, 1.0),
            trunk_act2: PRelu::new(&mut store, "trunk_act2"),
            trunk_bn2: BatchNorm::new(&mut store, "trunk_bn2", s.trunk_hidden),
            // Small final init keeps early samples near the posterior mean.
            head: Dense::new(&mut store, rng, "head", s.trunk_hidden, s.data_dim, 0.1),
            store,
            shape: shape.clone(),
        }
    }

    /// Predicted clean point `x0 = G(x_t, z, t)`.
    pub fn generate(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_t: Var,
        z: Var,
        ts: &[usize],
        train: bool,
    ) -> Var {
        let (n, d) = tape.shape(x_t);
        assert_eq!(d, self.shape.data_dim, "generator input width");
        assert_eq!(tape.shape(z), (n, self.shape.latent_dim), "latent width");
        assert_eq!(n, ts.len(), "time index count");
        let emb = tape.leaf(sinusoidal_embedding(ts, self.shape.time_embed_dim));

        let joint_in = tape.concat_cols(x_t, z);
        let h = self.x_fc1.forward(tape, vars, joint_in);
        let h = self.x_act.forward(tape, vars, h);
        let h = self.x_bn.forward(tape, vars, h, train);
        let x_out = self.x_fc2.forward(tape, vars, h);

        let h = self.t_fc1.forward(tape, vars, emb);
        let h = self.t_act.forward(tape, vars, h);
        let t_out = self.t_fc2.forward(tape, vars, h);

        let joint = tape.concat_cols(x_out, t_out);
        let h = self.trunk_fc1.forward(tape, vars, joint);
        let h = self.trunk_act1.forward(tape, vars, h);
        let h = self.trunk_bn1.forward(tape, vars, h, train);
        let h = self.trunk_fc2.forward(tape, vars, h);
        let h = self.trunk_act2.forward(tape, vars, h);
        let h = self.trunk_bn2.forward(tape, vars, h, train);
        self.head.forward(tape, vars, h)
    }

    /// Frozen eval-mode generation.
    pub fn generate_batch(
        &self,
        x_t: &Array2<f64>,
        z: &Array2<f64>,
        ts: &[usize],
    ) -> Result<Array2<f64>> {
        if z.ncols() != self.shape.latent_dim {
            return Err(Error::shape(format!(
                "latent dimension {} vs network latent {}",
                z.ncols(),
                self.shape.latent_dim
            )));
        }
        if x_t.nrows() != z.nrows() || x_t.nrows() != ts.len() {
            return Err(Error::shape("generate: batch sizes differ"));
        }
        let mut tape = Tape::new();
        let vars = self.store.stage(&mut tape);
        let xv = tape.leaf(x_t.clone());
        let zv = tape.leaf(z.clone());
        let out = self.generate(&mut tape, &vars, xv, zv, ts, false);
        Ok(tape.value(out).clone())
    }

    fn bn_layers(&self) -> [&BatchNorm; 3] {
        [&self.x_bn, &self.trunk_bn1, &self.trunk_bn2]
    }

    /// Copy batch-norm buffers from another generator of the same shape.
    pub fn sync_buffers_from(&self, src: &GeneratorNet) {
        for (dst, s) in self.bn_layers().iter().zip(src.bn_layers()) {
            let (m, v) = s.buffers();
            dst.set_buffers(m, v);
        }
    }

    /// (mean, var) pairs of every batch-norm layer, in layer order.
    pub fn bn_buffers(&self) -> Vec<(Array2<f64>, Array2<f64>)> {
        self.bn_layers().iter().map(|bn| bn.buffers()).collect()
    }

    pub fn set_bn_buffers(&self, buffers: Vec<(Array2<f64>, Array2<f64>)>) {
        assert_eq!(buffers.len(), 3, "generator has three batch-norm layers");
        for (bn, (m, v)) in self.bn_layers().iter().zip(buffers) {
            bn.set_buffers(m, v);
        }
    }
}

// ── encoder network ───────────────────────────────────────────────────

#[derive(Clone)]
pub struct EncoderNet {
    pub store: ParamStore,
    pub shape: NetworkShape,
    x_fc1: Dense,
    x_act: PRelu,
    x_bn: BatchNorm,
    x_fc2: Dense,
    t_fc1: Dense,
    t_act: PRelu,
    t_fc2: Dense,
    trunk_fc1: Dense,
    trunk_act1: PRelu,
    trunk_bn1: BatchNorm,
    trunk_fc2: Dense,
    trunk_act2: PRelu,
    trunk_bn2: BatchNorm,
    trunk_out: Dense,
    mean_head: Dense,
    logvar_head: Dense,
}

impl EncoderNet {
    pub fn new(shape: &NetworkShape, rng: &mut ChaCha12Rng) -> Self {
        let mut store = ParamStore::new();
        let s = shape;
        EncoderNet {
            x_fc1: Dense::new(&mut store, rng, "x_fc1", 2 * s.data_dim, s.branch_hidden, 1.0),
            x_act: PRelu::new(&mut store, "x_act"),
            x_bn: BatchNorm::new(&mut store, "x_bn", s.branch_hidden),
            x_fc2: Dense::new(&mut store, rng, "x_fc2", s.branch_hidden, s.branch_out, 1.0),
            t_fc1: Dense::new(&mut store, rng, "t_fc1", s.time_embed_dim, s.branch_hidden, 1.0),
            t_act: PRelu::new(&mut store, "t_act"),
            t_fc2: Dense::new(&mut store, rng, "t_fc2", s.branch_hidden, s.branch_out, 1.0),
            trunk_fc1: Dense::new(&mut store, rng, "trunk_fc1", 2 * s.branch_out, s.trunk_hidden, 1.0),
            trunk_act1: PRelu::new(&mut store, "trunk_act1"),
            trunk_bn1: BatchNorm::new(&mut store, "trunk_bn1", s.trunk_hidden),
            trunk_fc2: Dense::new(&mut store, rng, "trunk_fc2", s.trunk_hidden, s.trunk_hidden, 1.0),
            trunk_act2: PRelu::new(&mut store, "trunk_act2"),
            trunk_bn2: BatchNorm::new(&mut store, "trunk_bn2", s.trunk_hidden),
            trunk_out: Dense::new(&mut store, rng, "trunk_out", s.trunk_hidden, s.encoder_trunk_out, 1.0),
            mean_head: Dense::new(&mut store, rng, "mean_head", s.encoder_trunk_out, s.latent_dim, 1.0),
            logvar_head: Dense::new(&mut store, rng, "logvar_head", s.encoder_trunk_out, s.latent_dim, 1.0),
            store,
            shape: shape.clone(),
        }
    }

    /// Gaussian posterior parameters of `q(z | x_{t-1}, x_t)`; the logvar
    /// output is clamped to `[-10, 10]`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        x_prev: Var,
        x_t: Var,
        ts: &[usize],
        train: bool,
    ) -> (Var, Var) {
        let (n, d) = tape.shape(x_prev);
        assert_eq!(d, self.shape.data_dim, "encoder input width");
        assert_eq!(tape.shape(x_t), (n, d), "encoder pair shapes");
        assert_eq!(n, ts.len(), "time index count");
        let emb = tape.leaf(sinusoidal_embedding(ts, self.shape.time_embed_dim));

        let pair = tape.concat_cols(x_prev, x_t);
        let h = self.x_fc1.forward(tape, vars, pair);
        let h = self.x_act.forward(tape, vars, h);
        let h = self.x_bn.forward(tape, vars, h, train);
        let x_out = self.x_fc2.forward(tape, vars, h);

        let h = self.t_fc1.forward(tape, vars, emb);
        let h = self.t_act.forward(tape, vars, h);
        let t_out = self.t_fc2.forward(tape, vars, h);

        let joint = tape.concat_cols(x_out, t_out);
        let h = self.trunk_fc1.forward(tape, vars, joint);
        let h = self.trunk_act1.forward(tape, vars, h);
        let h = self.trunk_bn1.forward(tape, vars, h, train);
        let h = self.trunk_fc2.forward(tape, vars, h);
        let h = self.trunk_act2.forward(tape, vars, h);
        let h = self.trunk_bn2.forward(tape, vars, h, train);
        let h = self.trunk_out.forward(tape, vars, h);

        let mean = self.mean_head.forward(tape, vars, h);
        let logvar_raw = self.logvar_head.forward(tape, vars, h);
        let logvar = clamp(tape, logvar_raw, LOGVAR_MIN, LOGVAR_MAX);
        (mean, logvar)
    }

    pub fn encode_batch(
        &self,
        x_prev: &Array2<f64>,
        x_t: &Array2<f64>,
        ts: &[usize],
    ) -> Result<(Array2<f64>, Array2<f64>)> {
        if x_prev.dim() != x_t.dim() || x_prev.ncols() != self.shape.data_dim {
            return Err(Error::shape("encode: input shapes"));
        }
        let mut tape = Tape::new();
        let vars = self.store.stage(&mut tape);
        let xp = tape.leaf(x_prev.clone());
        let xt = tape.leaf(x_t.clone());
        let (mean, logvar) = self.encode(&mut tape, &vars, xp, xt, ts, false);
        Ok((tape.value(mean).clone(), tape.value(logvar).clone()))
    }

    fn bn_layers(&self) -> [&BatchNorm; 3] {
        [&self.x_bn, &self.trunk_bn1, &self.trunk_bn2]
    }

    pub fn bn_buffers(&self) -> Vec<(Array2<f64>, Array2<f64>)> {
        self.bn_layers().iter().map(|bn| bn.buffers()).collect()
    }

    pub fn set_bn_buffers(&self, buffers: Vec<(Array2<f64>, Array2<f64>)>) {
        assert_eq!(buffers.len(), 3, "encoder has three batch-norm layers");
        for (bn, (m, v)) in self.bn_layers().iter().zip(buffers) {
            bn.set_buffers(m, v);
        }
    }
}

// ── functional views ──────────────────────────────────────────────────

/// Energy as a graph-building function; implemented by staged networks and
/// by closed-form test models.
pub trait EnergyFn {
    fn energy(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Var;
}

pub trait GeneratorFn {
    fn generate(&self, tape: &mut Tape, x_t: Var, z: Var, ts: &[usize]) -> Var;
}

pub trait EncoderFn {
    fn encode(&self, tape: &mut Tape, x_prev: Var, x_t: Var, ts: &[usize]) -> (Var, Var);
}

/// An [`EnergyNet`] staged onto a tape.
pub struct StagedEnergy<'a> {
    pub net: &'a EnergyNet,
    pub vars: Vec<Var>,
}

impl<'a> StagedEnergy<'a> {
    pub fn new(net: &'a EnergyNet, tape: &mut Tape) -> Self {
        let vars = net.store.stage(tape);
        StagedEnergy { net, vars }
    }
}

impl EnergyFn for StagedEnergy<'_> {
    fn energy(&self, tape: &mut Tape, x: Var, ts: &[usize]) -> Var {
        self.net.energy(tape, &self.vars, x, ts)
    }
}

pub struct StagedGenerator<'a> {
    pub net: &'a GeneratorNet,
    pub vars: Vec<Var>,
    pub train: bool,
}

impl<'a> StagedGenerator<'a> {
    pub fn new(net: &'a GeneratorNet, tape: &mut Tape, train: bool) -> Self {
        let vars = net.store.stage(tape);
        StagedGenerator { net, vars, train }
    }
}

impl GeneratorFn for StagedGenerator<'_> {
    fn generate(&self, tape: &mut Tape, x_t: Var, z: Var, ts: &[usize]) -> Var {
        self.net.generate(tape, &self.vars, x_t, z, ts, self.train)
    }
}

pub struct StagedEncoder<'a> {
    pub net: &'a EncoderNet,
    pub vars: Vec<Var>,
    pub train: bool,
}

impl<'a> StagedEncoder<'a> {
    pub fn new(net: &'a EncoderNet, tape: &mut Tape, train: bool) -> Self {
        let vars = net.store.stage(tape);
        StagedEncoder { net, vars, train }
    }
}

impl EncoderFn for StagedEncoder<'_> {
    fn encode(&self, tape: &mut Tape, x_prev: Var, x_t: Var, ts: &[usize]) -> (Var, Var) {
        self.net.encode(tape, &self.vars, x_prev, x_t, ts, self.train)
    }
}

// ── model triple ──────────────────────────────────────────────────────

/// The trainable state of the game: the three networks plus EMA shadows.
pub struct ModelTriple {
    pub energy: EnergyNet,
    pub generator: GeneratorNet,
    pub encoder: EncoderNet,
    /// Shadow generator used for sampling; tracks trainable parameters
    /// with an exponential moving average, buffers follow the source.
    pub ema_generator: GeneratorNet,
    /// Optional shadow of the energy network.
    pub ema_energy: Option<EnergyNet>,
}

impl ModelTriple {
    pub fn new(shape: &NetworkShape, track_energy_ema: bool, rng: &mut ChaCha12Rng) -> Self {
        let energy = EnergyNet::new(shape, rng);
        let generator = GeneratorNet::new(shape, rng);
        let encoder = EncoderNet::new(shape, rng);
        let ema_generator = generator.clone();
        let ema_energy = track_energy_ema.then(|| energy.clone());
        ModelTriple { energy, generator, encoder, ema_generator, ema_energy }
    }

    pub fn latent_dim(&self) -> usize {
        self.generator.shape.latent_dim
    }

    pub fn data_dim(&self) -> usize {
        self.generator.shape.data_dim
    }

    /// `shadow <- decay * shadow + (1 - decay) * current` for every tracked
    /// parameter; batch-norm buffers are copied from the source.
    pub fn ema_update(&mut self, decay: f64) {
        assert!((0.0..1.0).contains(&decay), "EMA decay must be in [0, 1)");
        self.ema_generator.store.ema_from(&self.generator.store, decay);
        self.ema_generator.sync_buffers_from(&self.generator);
        if let Some(shadow) = &mut self.ema_energy {
            shadow.store.ema_from(&self.energy.store, decay);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use crate::nn::randn;
    use ndarray::array;
    use rand::SeedableRng;

    fn toy_shape() -> NetworkShape {
        NetworkShape::toy(2, 2)
    }

    #[test]
    fn l2_head_zero_residual_and_arithmetic() {
        let mut tape = Tape::new();
        // f(x) = x gives zero energy everywhere.
        let x = tape.leaf(array![[1.0, -2.0], [0.3, 4.0]]);
        let e = l2_energy_head(&mut tape, x, x);
        assert_eq!(tape.value(e), &array![[0.0], [0.0]]);

        // x = (1,0), f = (0,0) -> -0.5
        let x = tape.leaf(array![[1.0, 0.0]]);
        let f = tape.zeros((1, 2));
        let e = l2_energy_head(&mut tape, x, f);
        assert_eq!(tape.scalar(e), -0.5);
    }

    #[test]
    fn energy_is_nonpositive_everywhere() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let net = EnergyNet::new(&toy_shape(), &mut rng);
        let x = randn(&mut rng, (10_000, 2)) * 50.0;
        let ts = vec![1usize; 10_000];
        let e = net.energy_batch(&x, &ts).unwrap();
        assert!(e.iter().all(|v| *v <= 0.0));
    }

    #[test]
    fn energy_input_gradient_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let net = EnergyNet::new(&toy_shape(), &mut rng);
        let x = randn(&mut rng, (50, 2));
        let ts: Vec<usize> = (0..50).map(|i| i % 4).collect();
        let g = net.energy_input_grad(&x, &ts).unwrap();
        let e0 = net.energy_batch(&x, &ts).unwrap();
        let mut checked = 0;
        for i in 0..50 {
            for j in 0..2 {
                let mut p = x.clone();
                let mut m = x.clone();
                p[(i, j)] += 1e-4;
                m[(i, j)] -= 1e-4;
                let ep = net.energy_batch(&p, &ts).unwrap()[i];
                let em = net.energy_batch(&m, &ts).unwrap()[i];
                // Central differences are invalid where the window straddles
                // a PReLU kink; one-sided slopes expose those spots.
                let fwd = (ep - e0[i]) / 1e-4;
                let bwd = (e0[i] - em) / 1e-4;
                if (fwd - bwd).abs() > 1e-3 * fwd.abs().max(bwd.abs()).max(1.0) {
                    continue;
                }
                checked += 1;
                let num = (ep - em) / 2e-4;
                let rel = (g[(i, j)] - num).abs() / num.abs().max(1e-6);
                assert!(rel <= 1e-4, "({i},{j}): {} vs {num}", g[(i, j)]);
            }
        }
        assert!(checked >= 80, "too many kink skips: {checked}");
    }

    #[test]
    fn generator_is_deterministic_and_shape_preserving() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let net = GeneratorNet::new(&toy_shape(), &mut rng);
        let x_t = randn(&mut rng, (128, 2));
        let z = randn(&mut rng, (128, 2));
        let ts = vec![2usize; 128];
        let a = net.generate_batch(&x_t, &z, &ts).unwrap();
        let b = net.generate_batch(&x_t, &z, &ts).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dim(), (128, 2));
        // Latent width errors are reported, not silently broadcast.
        assert!(net.generate_batch(&x_t, &randn(&mut rng, (128, 3)), &ts).is_err());
    }

    #[test]
    fn generator_zero_head_ignores_latent() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let mut net = GeneratorNet::new(&toy_shape(), &mut rng);
        let head_w = net.head.w;
        net.store.get_mut(head_w).fill(0.0);
        let x_t = randn(&mut rng, (16, 2));
        let ts = vec![1usize; 16];
        let za = randn(&mut rng, (16, 2));
        let zb = randn(&mut rng, (16, 2));
        let a = net.generate_batch(&x_t, &za, &ts).unwrap();
        let b = net.generate_batch(&x_t, &zb, &ts).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn encoder_outputs_latent_dims_and_clamps() {
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let mut net = EncoderNet::new(&toy_shape(), &mut rng);
        let x_prev = randn(&mut rng, (9, 2));
        let x_t = randn(&mut rng, (9, 2));
        let ts = vec![3usize; 9];
        let (mean, logvar) = net.encode_batch(&x_prev, &x_t, &ts).unwrap();
        assert_eq!(mean.dim(), (9, 2));
        assert_eq!(logvar.dim(), (9, 2));
        let again = net.encode_batch(&x_prev, &x_t, &ts).unwrap();
        assert_eq!(mean, again.0);
        assert_eq!(logvar, again.1);

        // Force a huge raw logvar through the bias and check the clamp.
        let bias = net.logvar_head.b;
        net.store.get_mut(bias).fill(50.0);
        let (_, logvar) = net.encode_batch(&x_prev, &x_t, &ts).unwrap();
        assert!(logvar.iter().all(|v| *v <= LOGVAR_MAX + 1e-12));
        assert!(logvar.iter().any(|v| (*v - LOGVAR_MAX).abs() < 1e-9));
    }

    #[test]
    fn all_models_finite_on_extreme_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        let shape = toy_shape();
        let energy = EnergyNet::new(&shape, &mut rng);
        let generator = GeneratorNet::new(&shape, &mut rng);
        let encoder = EncoderNet::new(&shape, &mut rng);
        let big = array![[1e6, -1e6], [-1e6, 1e6]];
        let z = randn(&mut rng, (2, 2));
        let ts = vec![0usize, 3];
        assert!(energy.energy_batch(&big, &ts).unwrap().iter().all(|v| v.is_finite()));
        assert!(generator.generate_batch(&big, &z, &ts).unwrap().iter().all(|v| v.is_finite()));
        let (m, lv) = encoder.encode_batch(&big, &big, &ts).unwrap();
        assert!(m.iter().chain(lv.iter()).all(|v| v.is_finite()));
    }

    // Parameter-gradient finite-difference spot check across all three
    // networks: a random 10-parameter slice per network.
    #[test]
    fn parameter_gradients_match_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let shape = toy_shape();
        let x = randn(&mut rng, (6, 2));
        let z = randn(&mut rng, (6, 2));
        let ts = vec![1usize, 2, 3, 0, 1, 2];

        // Closure builders: evaluate the scalar loss given a store.
        let energy_loss = |net: &EnergyNet| {
            let mut tape = Tape::new();
            let vars = net.store.stage(&mut tape);
            let xv = tape.leaf(x.clone());
            let e = net.energy(&mut tape, &vars, xv, &ts);
            let loss = tape.mean_all(e);
            tape.scalar(loss)
        };
        let gen_loss = |net: &GeneratorNet| {
            let mut tape = Tape::new();
            let vars = net.store.stage(&mut tape);
            let xv = tape.leaf(x.clone());
            let zv = tape.leaf(z.clone());
            let out = net.generate(&mut tape, &vars, xv, zv, &ts, true);
            let sq = tape.square(out);
            let loss = tape.mean_all(sq);
            tape.scalar(loss)
        };
        let enc_loss = |net: &EncoderNet| {
            let mut tape = Tape::new();
            let vars = net.store.stage(&mut tape);
            let xp = tape.leaf(x.clone());
            let xt = tape.leaf(z.clone());
            let (mean, logvar) = net.encode(&mut tape, &vars, xp, xt, &ts, true);
            let m2 = tape.square(mean);
            let sum = tape.add(m2, logvar);
            let loss = tape.mean_all(sum);
            tape.scalar(loss)
        };

        // Energy network.
        {
            let mut net = EnergyNet::new(&shape, &mut rng);
            let mut tape = Tape::new();
            let vars = net.store.stage(&mut tape);
            let xv = tape.leaf(x.clone());
            let e = net.energy(&mut tape, &vars, xv, &ts);
            let loss = tape.mean_all(e);
            let grads = tape.grad(loss, &vars);
            for _ in 0..10 {
                let pi = rng.random_range(0..net.store.len());
                let arr_dim = net.store.get(crate::nn::PId(pi)).dim();
                let i = rng.random_range(0..arr_dim.0);
                let j = rng.random_range(0..arr_dim.1);
                let analytic = grads[pi].map(|g| tape.value(g)[(i, j)]).unwrap_or(0.0);
                let orig = net.store.get(crate::nn::PId(pi))[(i, j)];
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig + 1e-4;
                let fp = energy_loss(&net);
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig - 1e-4;
                let fm = energy_loss(&net);
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig;
                let num = (fp - fm) / 2e-4;
                assert!(
                    (analytic - num).abs() / num.abs().max(1e-3) <= 1e-3,
                    "energy param {pi} ({i},{j}): {analytic} vs {num}"
                );
            }
        }

        // Generator network (train mode, exercises batch norm).
        {
            let mut net = GeneratorNet::new(&shape, &mut rng);
            let mut tape = Tape::new();
            let vars = net.store.stage(&mut tape);
            let xv = tape.leaf(x.clone());
            let zv = tape.leaf(z.clone());
            let out = net.generate(&mut tape, &vars, xv, zv, &ts, true);
            let sq = tape.square(out);
            let loss = tape.mean_all(sq);
            let grads = tape.grad(loss, &vars);
            for _ in 0..10 {
                let pi = rng.random_range(0..net.store.len());
                let arr_dim = net.store.get(crate::nn::PId(pi)).dim();
                let i = rng.random_range(0..arr_dim.0);
                let j = rng.random_range(0..arr_dim.1);
                let analytic = grads[pi].map(|g| tape.value(g)[(i, j)]).unwrap_or(0.0);
                let orig = net.store.get(crate::nn::PId(pi))[(i, j)];
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig + 1e-4;
                let fp = gen_loss(&net);
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig - 1e-4;
                let fm = gen_loss(&net);
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig;
                let num = (fp - fm) / 2e-4;
                assert!(
                    (analytic - num).abs() / num.abs().max(1e-3) <= 1e-3,
                    "generator param {pi} ({i},{j}): {analytic} vs {num}"
                );
            }
        }

        // Encoder network.
        {
            let mut net = EncoderNet::new(&shape, &mut rng);
            let mut tape = Tape::new();
            let vars = net.store.stage(&mut tape);
            let xp = tape.leaf(x.clone());
            let xt = tape.leaf(z.clone());
            let (mean, logvar) = net.encode(&mut tape, &vars, xp, xt, &ts, true);
            let m2 = tape.square(mean);
            let sum = tape.add(m2, logvar);
            let loss = tape.mean_all(sum);
            let grads = tape.grad(loss, &vars);
            for _ in 0..10 {
                let pi = rng.random_range(0..net.store.len());
                let arr_dim = net.store.get(crate::nn::PId(pi)).dim();
                let i = rng.random_range(0..arr_dim.0);
                let j = rng.random_range(0..arr_dim.1);
                let analytic = grads[pi].map(|g| tape.value(g)[(i, j)]).unwrap_or(0.0);
                let orig = net.store.get(crate::nn::PId(pi))[(i, j)];
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig + 1e-4;
                let fp = enc_loss(&net);
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig - 1e-4;
                let fm = enc_loss(&net);
                net.store.get_mut(crate::nn::PId(pi))[(i, j)] = orig;
                let num = (fp - fm) / 2e-4;
                assert!(
                    (analytic - num).abs() / num.abs().max(1e-3) <= 1e-3,
                    "encoder param {pi} ({i},{j}): {analytic} vs {num}"
                );
            }
        }
    }

    #[test]
    fn ema_decay_zero_copies_current() {
        let mut rng = ChaCha12Rng::seed_from_u64(28);
        let mut triple = ModelTriple::new(&toy_shape(), false, &mut rng);
        // Perturb the generator, then EMA with decay 0.
        for p in triple.generator.store.values_mut() {
            *p += 0.5;
        }
        triple.ema_update(0.0);
        for (a, b) in triple
            .ema_generator
            .store
            .values()
            .iter()
            .zip(triple.generator.store.values())
        {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn ema_shadow_never_non_finite_and_shapes_match() {
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let mut triple = ModelTriple::new(&toy_shape(), true, &mut rng);
        for step in 0..5 {
            for p in triple.generator.store.values_mut() {
                *p += 0.01 * step as f64;
            }
            triple.ema_update(0.999);
        }
        for (a, b) in triple
            .ema_generator
            .store
            .values()
            .iter()
            .zip(triple.generator.store.values())
        {
            assert_eq!(a.dim(), b.dim());
            assert!(a.iter().all(|v| v.is_finite()));
        }
        let shadow_energy = triple.ema_energy.as_ref().unwrap();
        for (a, b) in shadow_energy.store.values().iter().zip(triple.energy.store.values()) {
            assert_eq!(a.dim(), b.dim());
        }
    }

    #[test]
    fn ema_two_updates_from_constant_current() {
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        let mut triple = ModelTriple::new(&toy_shape(), false, &mut rng);
        let current = triple.generator.store.clone();
        // Seed the shadow away from the current parameters.
        for p in triple.ema_generator.store.values_mut() {
            p.fill(1.0);
        }
        triple.ema_update(0.5);
        triple.ema_update(0.5);
        for (s, c) in triple.ema_generator.store.values().iter().zip(current.values()) {
            for (sv, cv) in s.iter().zip(c.iter()) {
                assert_abs_diff_eq!(*sv, 0.25 * 1.0 + 0.75 * cv, epsilon = 1e-12);
            }
        }
    }
}
