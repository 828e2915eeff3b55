//! Dense layers, PReLU, batch norm, time embeddings, and Adam.
//!
//! Parameters live in a [`ParamStore`] per network — a flat, deterministic
//! list of `(name, Array2)` entries. At the start of a training phase the
//! store is *staged* onto a [`Tape`] (one leaf per parameter); layers then
//! reference staged vars by index, so the gradient vector returned by
//! `Tape::grad` lines up one-to-one with the store for the optimizer.

use std::cell::RefCell;

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

use crate::tape::{Tape, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PId(pub usize);

/// Flat named parameter list for one network.
#[derive(Debug, Clone)]
pub struct ParamStore {
    values: Vec<Array2<f64>>,
    names: Vec<String>,
}

impl Default for ParamStore {
    fn default() -> Self {
        Self::new()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore { values: Vec::new(), names: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Array2<f64>) -> PId {
        self.values.push(value);
        self.names.push(name.into());
        PId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: PId) -> &Array2<f64> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: PId) -> &mut Array2<f64> {
        &mut self.values[id.0]
    }

    pub fn values(&self) -> &[Array2<f64>] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.values
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Put every parameter on the tape as a leaf, in store order.
    pub fn stage(&self, tape: &mut Tape) -> Vec<Var> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    /// Total scalar count, for logging.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// `self = decay * self + (1 - decay) * other`, elementwise.
    pub fn ema_from(&mut self, other: &ParamStore, decay: f64) {
        assert_eq!(self.values.len(), other.values.len(), "EMA param count");
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            dst.zip_mut_with(src, |d, s| *d = decay * *d + (1.0 - decay) * s);
        }
    }
}

pub fn randn(rng: &mut ChaCha12Rng, shape: (usize, usize)) -> Array2<f64> {
    Array2::from_shape_fn(shape, |_| rng.sample(StandardNormal))
}

/// Fully connected layer; weight (in, out), bias (1, out).
#[derive(Debug, Clone)]
pub struct Dense {
    pub w: PId,
    pub b: PId,
}

impl Dense {
    /// Fan-in scaled normal init, `std = gain / sqrt(in_dim)`, zero bias.
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha12Rng,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        gain: f64,
    ) -> Self {
        let std = gain / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.w"), randn(rng, (in_dim, out_dim)) * std);
        let b = store.add(format!("{name}.b"), Array2::zeros((1, out_dim)));
        Dense { w, b }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let h = tape.matmul(x, vars[self.w.0]);
        tape.add_row(h, vars[self.b.0])
    }
}

/// PReLU with one learnable slope per layer.
#[derive(Debug, Clone)]
pub struct PRelu {
    pub alpha: PId,
}

impl PRelu {
    pub fn new(store: &mut ParamStore, name: &str) -> Self {
        PRelu { alpha: store.add(format!("{name}.alpha"), Array2::from_elem((1, 1), 0.25)) }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var) -> Var {
        let pos = tape.relu(x);
        let neg = tape.neg_part(x);
        let scaled = tape.mul_scalar_var(neg, vars[self.alpha.0]);
        tape.add(pos, scaled)
    }
}

#[derive(Debug, Clone)]
struct BnStats {
    mean: Array2<f64>,
    var: Array2<f64>,
}

/// Batch normalization over the batch axis.
///
/// Training mode normalizes with batch statistics and folds them into the
/// running buffers; eval mode normalizes with the buffers as constants.
/// Buffer updates happen inside `forward`, hence the `RefCell`.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: PId,
    pub beta: PId,
    stats: RefCell<BnStats>,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Array2::ones((1, dim))),
            beta: store.add(format!("{name}.beta"), Array2::zeros((1, dim))),
            stats: RefCell::new(BnStats {
                mean: Array2::zeros((1, dim)),
                var: Array2::ones((1, dim)),
            }),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], x: Var, train: bool) -> Var {
        let (n, m) = tape.shape(x);
        let normalized = if train {
            let mean = tape.mean_rows(x);
            let mean_b = tape.broadcast_row(mean, n);
            let centered = tape.sub(x, mean_b);
            let sq = tape.square(centered);
            let var = tape.mean_rows(sq);
            {
                let mut stats = self.stats.borrow_mut();
                let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
                let bm = tape.value(mean);
                let bv = tape.value(var);
                stats.mean.zip_mut_with(bm, |r, b| *r = (1.0 - self.momentum) * *r + self.momentum * b);
                stats.var.zip_mut_with(bv, |r, b| {
                    *r = (1.0 - self.momentum) * *r + self.momentum * b * unbias
                });
            }
            let shifted = tape.add_scalar(var, self.eps);
            let std = tape.sqrt(shifted);
            let inv = tape.recip(std);
            let inv_b = tape.broadcast_row(inv, n);
            tape.mul(centered, inv_b)
        } else {
            let stats = self.stats.borrow();
            let neg_mean = stats.mean.mapv(|v| -v);
            let inv_std = stats.var.mapv(|v| 1.0 / (v + self.eps).sqrt());
            let centered = tape.add_const(x, neg_mean);
            tape.mul_const(centered, inv_std)
        };
        let gamma_b = tape.broadcast_row(vars[self.gamma.0], n);
        let scaled = tape.mul(normalized, gamma_b);
        let _ = m;
        tape.add_row(scaled, vars[self.beta.0])
    }

    pub fn buffers(&self) -> (Array2<f64>, Array2<f64>) {
        let s = self.stats.borrow();
        (s.mean.clone(), s.var.clone())
    }

    pub fn set_buffers(&self, mean: Array2<f64>, var: Array2<f64>) {
        let mut s = self.stats.borrow_mut();
        s.mean = mean;
        s.var = var;
    }
}

/// Sinusoidal embedding of integer time steps, one row per entry.
pub fn sinusoidal_embedding(ts: &[usize], dim: usize) -> Array2<f64> {
    assert!(dim >= 2 && dim % 2 == 0, "embedding dim must be even and >= 2");
    let half = dim / 2;
    let mut out = Array2::zeros((ts.len(), dim));
    for (i, &t) in ts.iter().enumerate() {
        for k in 0..half {
            let freq = (10_000f64).powf(-(k as f64) / half as f64);
            let angle = t as f64 * freq;
            out[(i, 2 * k)] = angle.sin();
            out[(i, 2 * k + 1)] = angle.cos();
        }
    }
    out
}

/// Hard clamp built from two relus; gradient is 1 inside, 0 outside.
pub fn clamp(tape: &mut Tape, x: Var, lo: f64, hi: f64) -> Var {
    let above_lo = tape.add_scalar(x, -lo);
    let r_lo = tape.relu(above_lo);
    let above_hi = tape.add_scalar(x, -hi);
    let r_hi = tape.relu(above_hi);
    let span = tape.sub(r_lo, r_hi);
    tape.add_scalar(span, lo)
}

/// Adam over one [`ParamStore`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub step: u64,
    /// Global-norm gradient clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            m: store.values().iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: store.values().iter().map(|p| Array2::zeros(p.dim())).collect(),
            step: 0,
            clip_norm: None,
        }
    }

    /// One update; `grads[i] = None` means a zero gradient for parameter `i`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &[Option<Array2<f64>>]) {
        assert_eq!(grads.len(), store.len(), "gradient count");
        self.step += 1;
        let scale = match self.clip_norm {
            Some(max_norm) => {
                let total: f64 = grads
                    .iter()
                    .flatten()
                    .map(|g| g.iter().map(|x| x * x).sum::<f64>())
                    .sum();
                let norm = total.sqrt();
                if norm > max_norm {
                    max_norm / norm
                } else {
                    1.0
                }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, grad) in grads.iter().enumerate() {
            let Some(grad) = grad else { continue };
            let g = grad * scale;
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(&g, |m, g| *m = self.beta1 * *m + (1.0 - self.beta1) * g);
            v.zip_mut_with(&g, |v, g| *v = self.beta2 * *v + (1.0 - self.beta2) * g * g);
            let p = &mut store.values_mut()[i];
            ndarray::Zip::from(&mut *p).and(&*m).and(&*v).for_each(|p, m, v| {
                let mh = m / bc1;
                let vh = v / bc2;
                *p -= self.lr * mh / (vh.sqrt() + self.eps);
            });
        }
    }
}
