//! Loss terms of the minimax game, plus shared Gaussian analytics.
//!
//! The generator/encoder pair minimizes the sum of two Monte-Carlo bounds
//! on the per-step Jeffrey divergence between the generated and the
//! energy-defined denoising distributions:
//!
//! - the forward-KL part draws `z ~ p(z)`, pushes it through the generator
//!   and the forward-chain posterior, and scores the result against the
//!   frozen energy, the forward kernel, and the encoder;
//! - the reverse-KL part is an ELBO on real chain pairs, reweighted by the
//!   time-dependent importance ratio `lambda(t-1)` that stands in for the
//!   intractable model denoising density.
//!
//! The energy maximizes its gap between forward-chain pairs and generated
//! pairs, regularized by a squared-gradient penalty on
//! `E(x_{t-1}, t-1) + log q(x_t | x_{t-1})` — the score of the unnormalized
//! conditional model — which requires differentiating through an input
//! gradient (the tape supports that).
//!
//! Gradient routing is structural: each loss stages only the networks it
//! optimizes; the opposing player is staged onto fresh leaves, so its
//! parameter gradients are identically zero rather than merely discarded.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::models::{
    EncoderFn, EnergyFn, GeneratorFn, ModelTriple, StagedEncoder, StagedEnergy, StagedGenerator,
};
use crate::schedule::{Schedule, LN_2PI};
use crate::tape::{Tape, Var};

/// Hyperparameters of the two objectives.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Importance-ratio endpoint value at `t' = 1`.
    pub w: f64,
    /// Importance-ratio value at `t' = 1/2`.
    pub w_mid: f64,
    /// Gradient-penalty coefficient. No published value exists for this
    /// knob; 0.05 is the default that keeps the toy game stable.
    pub gamma: f64,
    /// Down-weighting of the generated-sample term in the energy objective.
    pub fake_term_weight: f64,
    /// Relative weight of the ELBO part against the forward-KL part.
    pub l2_scale: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { w: 1.0, w_mid: 1.0, gamma: 0.05, fake_term_weight: 1.0, l2_scale: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w_mid > 0.0) {
            return Err(Error::invalid("importance weights w, w_mid must be positive"));
        }
        if self.gamma < 0.0 {
            return Err(Error::invalid("gamma must be nonnegative"));
        }
        if !(self.fake_term_weight > 0.0 && self.fake_term_weight <= 1.0) {
            return Err(Error::invalid("fake_term_weight must be in (0, 1]"));
        }
        Ok(())
    }
}

/// Objective ablations. `drop_qpsi` only makes sense on top of `kl_only`
/// (without the ELBO part there is no other encoder term to keep).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    /// Replace every latent draw with zeros.
    pub no_latent: bool,
    /// Drop the ELBO (reverse-KL) part; plain KL objective.
    pub kl_only: bool,
    /// Additionally drop the encoder term from the forward-KL part,
    /// leaving a per-step WGAN-like objective.
    pub drop_qpsi: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.drop_qpsi && !self.kl_only {
            return Err(Error::invalid("drop_qpsi requires kl_only"));
        }
        Ok(())
    }
}

// ── Gaussian analytics ────────────────────────────────────────────────

/// Per-sample log density of an isotropic Gaussian, summed over
/// coordinates.
pub fn gaussian_log_prob(x: &Array2<f64>, mean: &Array2<f64>, var: f64) -> Result<Array1<f64>> {
    if var <= 0.0 {
        return Err(Error::invalid(format!("gaussian_log_prob: variance {var} <= 0")));
    }
    if x.dim() != mean.dim() {
        return Err(Error::shape("gaussian_log_prob: x vs mean"));
    }
    let d = x.ncols() as f64;
    let log_norm = -0.5 * d * (LN_2PI + var.ln());
    let mut out = Array1::zeros(x.nrows());
    for (i, (rx, rm)) in x.rows().into_iter().zip(mean.rows()).enumerate() {
        let sq: f64 = rx.iter().zip(rm.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
        out[i] = log_norm - 0.5 * sq / var;
    }
    Ok(out)
}

/// Diagonal-Gaussian variant; `var` holds per-coordinate variances.
pub fn gaussian_log_prob_diag(
    x: &Array2<f64>,
    mean: &Array2<f64>,
    var: &Array2<f64>,
) -> Result<Array1<f64>> {
    if var.iter().any(|v| *v <= 0.0) {
        return Err(Error::invalid("gaussian_log_prob_diag: nonpositive variance"));
    }
    if x.dim() != mean.dim() || x.dim() != var.dim() {
        return Err(Error::shape("gaussian_log_prob_diag: shapes"));
    }
    let mut out = Array1::zeros(x.nrows());
    for i in 0..x.nrows() {
        let mut acc = 0.0;
        for j in 0..x.ncols() {
            let r = x[(i, j)] - mean[(i, j)];
            let v = var[(i, j)];
            acc += LN_2PI + v.ln() + r * r / v;
        }
        out[i] = -0.5 * acc;
    }
    Ok(out)
}

/// Entropy of a diagonal Gaussian: `dim/2 (1 + ln 2pi) + sum(logvar)/2`.
///
/// `logvar` may hold one entry per dimension or a single shared entry.
pub fn gaussian_entropy(dim: usize, logvar: &[f64]) -> f64 {
    assert!(dim >= 1);
    assert!(logvar.len() == dim || logvar.len() == 1, "logvar length");
    let logdet: f64 =
        if logvar.len() == 1 { logvar[0] * dim as f64 } else { logvar.iter().sum() };
    0.5 * dim as f64 * (1.0 + LN_2PI) + 0.5 * logdet
}

/// Per-sample `KL(N(mean, diag(exp(logvar))) || N(0, I))`.
pub fn kl_to_standard_normal(mean: &Array2<f64>, logvar: &Array2<f64>) -> Array1<f64> {
    assert_eq!(mean.dim(), logvar.dim(), "kl_to_standard_normal shapes");
    let mut out = Array1::zeros(mean.nrows());
    for i in 0..mean.nrows() {
        let mut acc = 0.0;
        for j in 0..mean.ncols() {
            let m = mean[(i, j)];
            let lv = logvar[(i, j)];
            acc += m * m + lv.exp() - 1.0 - lv;
        }
        out[i] = 0.5 * acc;
    }
    out
}

/// Time-dependent importance ratio `lambda(t-1)`, evaluated at `t'(t)`.
///
/// Implemented as `w^(1-u) * w_mid^u` with `u = log_{1/2}(t')`, which is
/// algebraically the design formula `w * t'^(log_{1/2}(w_mid / w))` but
/// hits the anchor points `lambda(1/2) = w_mid` and `lambda(1) = w`
/// exactly in floating point.
pub fn importance_ratio(schedule: &Schedule, t_index: usize, weights: &LossWeights) -> Result<f64> {
    if !(1..=schedule.steps()).contains(&t_index) {
        return Err(Error::invalid(format!(
            "importance_ratio: t_index {t_index} out of range 1..={}",
            schedule.steps()
        )));
    }
    let tp = schedule.t_prime(t_index);
    let u = tp.ln() / 0.5f64.ln();
    Ok(weights.w.powf(1.0 - u) * weights.w_mid.powf(u))
}

/// Symmetric `KL(p||q) + KL(q||p)` for diagonal Gaussians; test oracle.
pub fn jeffrey_divergence_oracle(
    p_mean: &[f64],
    p_var: &[f64],
    q_mean: &[f64],
    q_var: &[f64],
) -> Result<f64> {
    let d = p_mean.len();
    if q_mean.len() != d || p_var.len() != d || q_var.len() != d {
        return Err(Error::shape("jeffrey_divergence_oracle: dimension mismatch"));
    }
    if p_var.iter().chain(q_var.iter()).any(|v| *v <= 0.0) {
        return Err(Error::invalid("jeffrey_divergence_oracle: nonpositive variance"));
    }
    let kl = |am: &[f64], av: &[f64], bm: &[f64], bv: &[f64]| -> f64 {
        (0..d)
            .map(|j| {
                let dm = am[j] - bm[j];
                0.5 * ((bv[j] / av[j]).ln() + (av[j] + dm * dm) / bv[j] - 1.0)
            })
            .sum()
    };
    Ok(kl(p_mean, p_var, q_mean, q_var) + kl(q_mean, q_var, p_mean, p_var))
}

// ── tape-side Gaussian helpers ────────────────────────────────────────

/// Per-sample diagonal-Gaussian log density as a graph node; `logvar`
/// parameterizes the variance.
pub fn gaussian_logprob_diag_node(tape: &mut Tape, x: Var, mean: Var, logvar: Var) -> Var {
    let d = tape.shape(x).1 as f64;
    let diff = tape.sub(x, mean);
    let sq = tape.square(diff);
    let neg_lv = tape.neg(logvar);
    let inv_var = tape.exp(neg_lv);
    let quad = tape.mul(sq, inv_var);
    let inner = tape.add(quad, logvar);
    let s = tape.sum_cols(inner);
    let shifted = tape.add_scalar(s, d * LN_2PI);
    tape.scale(shifted, -0.5)
}

/// Per-sample `KL(N(mean, diag(exp(logvar))) || N(0, I))` as a graph node.
pub fn kl_std_normal_node(tape: &mut Tape, mean: Var, logvar: Var) -> Var {
    let m2 = tape.square(mean);
    let ev = tape.exp(logvar);
    let sum = tape.add(m2, ev);
    let minus_lv = tape.sub(sum, logvar);
    let inner = tape.add_scalar(minus_lv, -1.0);
    let s = tape.sum_cols(inner);
    tape.scale(s, 0.5)
}

// ── batch plumbing ────────────────────────────────────────────────────

pub fn sample_standard_normal(rng: &mut ChaCha12Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

/// Uniform per-sample time indices in `1..=T`.
pub fn sample_time_indices(rng: &mut ChaCha12Rng, n: usize, steps: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(1..=steps)).collect()
}

/// (n,1) column from a per-sample map of the time index.
fn time_col(ts: &[usize], f: impl Fn(usize) -> f64) -> Array2<f64> {
    Array2::from_shape_fn((ts.len(), 1), |(i, _)| f(ts[i]))
}

/// Multiply each row of `arr` by the matching entry of the (n,1) column.
fn scale_rows(arr: &Array2<f64>, col: &Array2<f64>) -> Array2<f64> {
    let mut out = arr.clone();
    for (i, mut row) in out.rows_mut().into_iter().enumerate() {
        row *= col[(i, 0)];
    }
    out
}

/// A jointly drawn forward-chain pair `(x_{t-1}, x_t)` with per-sample `t`.
pub struct ForwardPair {
    pub x_prev: Array2<f64>,
    pub x_t: Array2<f64>,
}

/// Draw `x_{t-1}` from the closed-form marginal and chain one kernel step
/// to `x_t`; consumes two standard-normal tensors.
pub fn forward_pair(
    schedule: &Schedule,
    x0: &Array2<f64>,
    ts: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<ForwardPair> {
    validate_ts(schedule, x0.nrows(), ts)?;
    let e1 = sample_standard_normal(rng, x0.dim());
    let e2 = sample_standard_normal(rng, x0.dim());
    let sq_ab_prev = time_col(ts, |t| schedule.alpha_bar(t - 1).sqrt());
    let sq_1m_ab_prev = time_col(ts, |t| (1.0 - schedule.alpha_bar(t - 1)).sqrt());
    let sq_1mb = time_col(ts, |t| (1.0 - schedule.beta(t)).sqrt());
    let sq_b = time_col(ts, |t| schedule.beta(t).sqrt());
    let x_prev = scale_rows(x0, &sq_ab_prev) + scale_rows(&e1, &sq_1m_ab_prev);
    let x_t = scale_rows(&x_prev, &sq_1mb) + scale_rows(&e2, &sq_b);
    Ok(ForwardPair { x_prev, x_t })
}

fn validate_ts(schedule: &Schedule, n: usize, ts: &[usize]) -> Result<()> {
    if ts.len() != n {
        return Err(Error::shape(format!("time index count {} vs batch {n}", ts.len())));
    }
    if ts.iter().any(|t| *t < 1 || *t > schedule.steps()) {
        return Err(Error::invalid("time indices must lie in 1..=T"));
    }
    Ok(())
}

// ── generator/encoder objective ───────────────────────────────────────

/// Graph handles for the generator/encoder objective.
pub struct GeneratorLossParts {
    pub loss: Var,
    /// Per-sample forward-KL bound values, (n,1).
    pub l1_per: Var,
    /// Per-sample weighted ELBO bound values; absent under `kl_only`.
    pub l2_per: Option<Var>,
}

/// Build the minimization objective on `tape`.
///
/// `gen` and `enc` should be staged for optimization; `energy` must be
/// staged on fresh leaves so that no gradient reaches the energy
/// parameters.
#[allow(clippy::too_many_arguments)]
pub fn generator_loss_graph<G, Q, E>(
    tape: &mut Tape,
    schedule: &Schedule,
    weights: &LossWeights,
    flags: &AblationFlags,
    gen: &G,
    enc: &Q,
    energy: &E,
    latent_dim: usize,
    x0: &Array2<f64>,
    ts: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<GeneratorLossParts>
where
    G: GeneratorFn,
    Q: EncoderFn,
    E: EnergyFn,
{
    weights.validate()?;
    flags.validate()?;
    validate_ts(schedule, x0.nrows(), ts)?;
    let (n, d) = x0.dim();

    let pair = forward_pair(schedule, x0, ts, rng)?;
    let ts_m1: Vec<usize> = ts.iter().map(|t| t - 1).collect();

    // Per-sample schedule constants.
    let c0 = time_col(ts, |t| schedule.posterior_coeffs(t).0);
    let ct = time_col(ts, |t| schedule.posterior_coeffs(t).1);
    let sq_btilde = time_col(ts, |t| schedule.beta_tilde(t).sqrt());
    let half_inv_beta = time_col(ts, |t| 0.5 / schedule.beta(t));
    let log_norm_fwd = time_col(ts, |t| -0.5 * d as f64 * (LN_2PI + schedule.beta(t).ln()));
    let sq_1mb = time_col(ts, |t| (1.0 - schedule.beta(t)).sqrt());

    let x_t_leaf = tape.leaf(pair.x_t.clone());

    // Forward-KL part: z ~ p(z), reparameterized posterior draw.
    let z_arr = if flags.no_latent {
        Array2::zeros((n, latent_dim))
    } else {
        sample_standard_normal(rng, (n, latent_dim))
    };
    let e3 = sample_standard_normal(rng, (n, d));
    let z_leaf = tape.leaf(z_arr);
    let x0_hat = gen.generate(tape, x_t_leaf, z_leaf, ts);
    let scaled_hat = tape.mul_const(x0_hat, c0.clone());
    let drift = scale_rows(&pair.x_t, &ct) + scale_rows(&e3, &sq_btilde);
    let x_prev_gen = tape.add_const(scaled_hat, drift);

    let e_term = energy.energy(tape, x_prev_gen, &ts_m1);

    let mean_fwd = tape.mul_const(x_prev_gen, sq_1mb);
    let diff_fwd = tape.sub(x_t_leaf, mean_fwd);
    let sq_fwd = tape.square(diff_fwd);
    let ssq_fwd = tape.sum_cols(sq_fwd);
    let quad_fwd = tape.mul_const(ssq_fwd, half_inv_beta);
    let neg_quad = tape.neg(quad_fwd);
    let log_q_fwd = tape.add_const(neg_quad, log_norm_fwd);

    let neg_e = tape.neg(e_term);
    let mut l1_per = tape.sub(neg_e, log_q_fwd);
    if !flags.drop_qpsi {
        let (mean_psi, logvar_psi) = enc.encode(tape, x_prev_gen, x_t_leaf, ts);
        let log_q_psi = gaussian_logprob_diag_node(tape, z_leaf, mean_psi, logvar_psi);
        l1_per = tape.sub(l1_per, log_q_psi);
    }
    let l1_mean = tape.mean_all(l1_per);

    // ELBO part on the real chain pair, importance-weighted.
    let (loss, l2_per) = if flags.kl_only {
        (l1_mean, None)
    } else {
        let x_prev_leaf = tape.leaf(pair.x_prev.clone());
        let (mean_psi, logvar_psi) = enc.encode(tape, x_prev_leaf, x_t_leaf, ts);
        let kl = kl_std_normal_node(tape, mean_psi, logvar_psi);

        let z_prime = if flags.no_latent {
            tape.zeros((n, latent_dim))
        } else {
            let e4 = sample_standard_normal(rng, (n, latent_dim));
            let half_lv = tape.scale(logvar_psi, 0.5);
            let std = tape.exp(half_lv);
            let noise = tape.mul_const(std, e4);
            tape.add(mean_psi, noise)
        };
        let x0_hat2 = gen.generate(tape, x_t_leaf, z_prime, ts);

        // Density of the real x_{t-1} under the generated posterior; the
        // t = 1 posterior is a Dirac, so the clipped variance stands in.
        let half_inv_btc = time_col(ts, |t| 0.5 / schedule.beta_tilde_clipped(t));
        let log_norm_post =
            time_col(ts, |t| -0.5 * d as f64 * (LN_2PI + schedule.beta_tilde_clipped(t).ln()));
        let scaled_hat2 = tape.mul_const(x0_hat2, c0);
        let mean_post = tape.add_const(scaled_hat2, scale_rows(&pair.x_t, &ct));
        let diff_post = tape.sub(x_prev_leaf, mean_post);
        let sq_post = tape.square(diff_post);
        let ssq_post = tape.sum_cols(sq_post);
        let quad_post = tape.mul_const(ssq_post, half_inv_btc);
        let neg_quad_post = tape.neg(quad_post);
        let recon = tape.add_const(neg_quad_post, log_norm_post);

        let raw = tape.sub(kl, recon);
        let lambda = time_col(ts, |t| {
            importance_ratio(schedule, t, weights).expect("t validated above")
        });
        let l2_per = tape.mul_const(raw, lambda);
        let l2_mean = tape.mean_all(l2_per);
        let l2_scaled = tape.scale(l2_mean, weights.l2_scale);
        (tape.add(l1_mean, l2_scaled), Some(l2_per))
    };

    Ok(GeneratorLossParts { loss, l1_per, l2_per })
}

// ── energy objective ──────────────────────────────────────────────────

/// Graph handles for the energy objective.
pub struct EnergyLossParts {
    pub loss: Var,
    pub real_mean: Var,
    pub fake_mean: Var,
    /// Mean squared norm of the regularized score; zero node when
    /// `gamma = 0`.
    pub penalty: Var,
}

/// Build the maximization objective (negated for minimization) on `tape`.
///
/// `energy` should be staged for optimization; `gen` must be staged on
/// fresh leaves so generator parameters receive no gradient.
#[allow(clippy::too_many_arguments)]
pub fn energy_loss_graph<G, E>(
    tape: &mut Tape,
    schedule: &Schedule,
    weights: &LossWeights,
    flags: &AblationFlags,
    gen: &G,
    energy: &E,
    latent_dim: usize,
    x0: &Array2<f64>,
    ts: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<EnergyLossParts>
where
    G: GeneratorFn,
    E: EnergyFn,
{
    weights.validate()?;
    flags.validate()?;
    validate_ts(schedule, x0.nrows(), ts)?;
    let (n, d) = x0.dim();

    let pair = forward_pair(schedule, x0, ts, rng)?;
    let ts_m1: Vec<usize> = ts.iter().map(|t| t - 1).collect();

    let c0 = time_col(ts, |t| schedule.posterior_coeffs(t).0);
    let ct = time_col(ts, |t| schedule.posterior_coeffs(t).1);
    let sq_btilde = time_col(ts, |t| schedule.beta_tilde(t).sqrt());
    let half_inv_beta = time_col(ts, |t| 0.5 / schedule.beta(t));
    let log_norm_fwd = time_col(ts, |t| -0.5 * d as f64 * (LN_2PI + schedule.beta(t).ln()));
    let sq_1mb = time_col(ts, |t| (1.0 - schedule.beta(t)).sqrt());

    let x_t_leaf = tape.leaf(pair.x_t.clone());
    let real_x = tape.leaf(pair.x_prev.clone());

    let e_real = energy.energy(tape, real_x, &ts_m1);

    // Generated x_{t-1} through the frozen generator.
    let z_arr = if flags.no_latent {
        Array2::zeros((n, latent_dim))
    } else {
        sample_standard_normal(rng, (n, latent_dim))
    };
    let e3 = sample_standard_normal(rng, (n, d));
    let z_leaf = tape.leaf(z_arr);
    let x0_hat = gen.generate(tape, x_t_leaf, z_leaf, ts);
    // The generator is frozen here; detaching its output keeps the
    // backward pass out of its graph entirely.
    let x0_hat = tape.detach(x0_hat);
    let scaled_hat = tape.mul_const(x0_hat, c0);
    let drift = scale_rows(&pair.x_t, &ct) + scale_rows(&e3, &sq_btilde);
    let fake_x = tape.add_const(scaled_hat, drift);
    let e_fake = energy.energy(tape, fake_x, &ts_m1);

    let real_mean = tape.mean_all(e_real);
    let fake_mean = tape.mean_all(e_fake);

    // Gradient penalty on the score of the unnormalized conditional model.
    let penalty = if weights.gamma > 0.0 {
        let mean_fwd = tape.mul_const(real_x, sq_1mb);
        let diff = tape.sub(x_t_leaf, mean_fwd);
        let sq = tape.square(diff);
        let ssq = tape.sum_cols(sq);
        let quad = tape.mul_const(ssq, half_inv_beta);
        let neg_quad = tape.neg(quad);
        let log_q = tape.add_const(neg_quad, log_norm_fwd);
        let inner = tape.add(e_real, log_q);
        let total = tape.sum_all(inner);
        let gx = tape.grad(total, &[real_x])[0].expect("real_x reaches the loss");
        let gsq = tape.square(gx);
        let per = tape.sum_cols(gsq);
        tape.mean_all(per)
    } else {
        tape.zeros((1, 1))
    };

    let neg_real = tape.neg(real_mean);
    let fake_w = tape.scale(fake_mean, weights.fake_term_weight);
    let main = tape.add(neg_real, fake_w);
    let pen_w = tape.scale(penalty, weights.gamma / 2.0);
    let loss = tape.add(main, pen_w);

    Ok(EnergyLossParts { loss, real_mean, fake_mean, penalty })
}

// ── value-level wrappers over a model triple ──────────────────────────

#[derive(Debug, Clone, Copy)]
pub struct GenDiagnostics {
    pub total: f64,
    pub l1: f64,
    pub l2: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct EnergyDiagnostics {
    pub total: f64,
    pub real_energy: f64,
    pub fake_energy: f64,
    pub energy_gap: f64,
    pub grad_penalty: f64,
}

/// Evaluate the generator/encoder loss on a fresh tape; gradients reach
/// only the generator and encoder when the caller differentiates.
pub fn loss_generator(
    triple: &ModelTriple,
    schedule: &Schedule,
    weights: &LossWeights,
    flags: &AblationFlags,
    x0: &Array2<f64>,
    ts: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<(f64, GenDiagnostics)> {
    let mut tape = Tape::new();
    let gen = StagedGenerator::new(&triple.generator, &mut tape, true);
    let enc = StagedEncoder::new(&triple.encoder, &mut tape, true);
    let energy = StagedEnergy::new(&triple.energy, &mut tape);
    let parts = generator_loss_graph(
        &mut tape,
        schedule,
        weights,
        flags,
        &gen,
        &enc,
        &energy,
        triple.latent_dim(),
        x0,
        ts,
        rng,
    )?;
    let diag = gen_diagnostics(&tape, &parts, weights);
    if !diag.total.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            detail: format!("generator loss is not finite: l1={}, l2={}", diag.l1, diag.l2),
        });
    }
    Ok((diag.total, diag))
}

pub(crate) fn gen_diagnostics(
    tape: &Tape,
    parts: &GeneratorLossParts,
    weights: &LossWeights,
) -> GenDiagnostics {
    let total = tape.scalar(parts.loss);
    let l1 = mean_of(tape.value(parts.l1_per));
    let l2 = parts.l2_per.map(|v| mean_of(tape.value(v)) * weights.l2_scale).unwrap_or(0.0);
    GenDiagnostics { total, l1, l2 }
}

/// Evaluate the energy loss on a fresh tape; gradients reach only the
/// energy network when the caller differentiates.
pub fn loss_energy(
    triple: &ModelTriple,
    schedule: &Schedule,
    weights: &LossWeights,
    flags: &AblationFlags,
    x0: &Array2<f64>,
    ts: &[usize],
    rng: &mut ChaCha12Rng,
) -> Result<(f64, EnergyDiagnostics)> {
    let mut tape = Tape::new();
    let gen = StagedGenerator::new(&triple.generator, &mut tape, true);
    let energy = StagedEnergy::new(&triple.energy, &mut tape);
    let parts = energy_loss_graph(
        &mut tape,
        schedule,
        weights,
        flags,
        &gen,
        &energy,
        triple.latent_dim(),
        x0,
        ts,
        rng,
    )?;
    let diag = energy_diagnostics(&tape, &parts);
    if !diag.total.is_finite() {
        return Err(Error::Diverged {
            iteration: 0,
            detail: format!(
                "energy loss is not finite: real={}, fake={}, penalty={}",
                diag.real_energy, diag.fake_energy, diag.grad_penalty
            ),
        });
    }
    Ok((diag.total, diag))
}

pub(crate) fn energy_diagnostics(tape: &Tape, parts: &EnergyLossParts) -> EnergyDiagnostics {
    let real = tape.scalar(parts.real_mean);
    let fake = tape.scalar(parts.fake_mean);
    EnergyDiagnostics {
        total: tape.scalar(parts.loss),
        real_energy: real,
        fake_energy: fake,
        energy_gap: real - fake,
        grad_penalty: tape.scalar(parts.penalty),
    }
}

fn mean_of(arr: &Array2<f64>) -> f64 {
    arr.sum() / arr.len() as f64
}
