//! Discretized VP-SDE diffusion schedule and forward-process kernels.
//!
//! The forward chain adds Gaussian noise in `T` steps,
//! `q(x_t | x_{t-1}) = N(sqrt(1 - beta_t) x_{t-1}, beta_t I)`, with the
//! per-step variances derived from the continuous VP-SDE variance function
//!
//! ```text
//! sigma^2(t') = 1 - exp(-beta_min t' - 0.5 (beta_max - beta_min) t'^2)
//! beta_t      = 1 - (1 - sigma^2(t'(t))) / (1 - sigma^2(t'(t-1)))
//! ```
//!
//! where `t'(t)` maps the integer step onto SDE time in `[0, 1]`. Two maps
//! are supported: equidistant `t/T`, and a truncated map that spends most
//! of the budget on the low-noise region and jumps to 1 at the last step.
//!
//! This construction telescopes, so the cumulative products satisfy
//! `alpha_bar_t = 1 - sigma^2(t'(t))` exactly; that identity is kept as a
//! construction-time check. All arrays are computed once in f64 and the
//! schedule is immutable afterwards.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LN_2PI: f64 = 1.8378770664093453;

/// Choice of the step-to-SDE-time map `t'(t)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMap {
    /// `t'(t) = t / T`.
    Equidistant,
    /// `t'(t) = t * floor(500 / (T-1)) / 999` for `t < T`, and `t'(T) = 1`.
    /// Concentrates steps in the low-noise first stage of the process.
    Truncated,
}

/// Precomputed diffusion constants for `t = 0..=T`.
///
/// Immutable after construction; every method is a pure function of the
/// stored arrays, so shared references can be used from any number of
/// threads.
#[derive(Debug, Clone)]
pub struct Schedule {
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    time_map: TimeMap,
    t_prime: Vec<f64>,
    sigma2: Vec<f64>,
    /// beta[t] for t in 1..=T; index 0 unused.
    beta: Vec<f64>,
    alpha_bar: Vec<f64>,
    /// Posterior variance beta~[t] for t in 1..=T; index 0 unused.
    beta_tilde: Vec<f64>,
}

/// Build a schedule; this is the only constructor.
///
/// ```
/// use ddaebm::schedule::{make_schedule, TimeMap};
/// let s = make_schedule(4, 0.1, 20.0, TimeMap::Equidistant).unwrap();
/// assert!((s.beta(1) - 0.47632).abs() < 1e-4);
/// assert!(s.alpha_bar(4) < 1e-4); // x_T is almost pure noise
/// ```
pub fn make_schedule(
    steps: usize,
    beta_min: f64,
    beta_max: f64,
    time_map: TimeMap,
) -> Result<Schedule> {
    if steps < 1 {
        return Err(Error::invalid("schedule requires T >= 1"));
    }
    if !(beta_min > 0.0 && beta_max > beta_min) {
        return Err(Error::invalid(format!(
            "schedule requires 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
        )));
    }
    if time_map == TimeMap::Truncated {
        if steps < 2 || steps > 999 {
            return Err(Error::invalid(format!(
                "truncated time map requires 2 <= T <= 999, got T = {steps}"
            )));
        }
        // floor(500 / (T-1)) must stay positive or t'(t) stops increasing.
        if 500 / (steps - 1) == 0 {
            return Err(Error::invalid(format!(
                "truncated time map degenerates for T = {steps}: floor(500/(T-1)) = 0"
            )));
        }
    }

    let t_prime: Vec<f64> = match time_map {
        TimeMap::Equidistant => (0..=steps).map(|t| t as f64 / steps as f64).collect(),
        TimeMap::Truncated => {
            let stride = (500 / (steps - 1)) as f64;
            (0..=steps)
                .map(|t| if t == steps { 1.0 } else { t as f64 * stride / 999.0 })
                .collect()
        }
    };

    let variance = |tp: f64| 1.0 - (-beta_min * tp - 0.5 * (beta_max - beta_min) * tp * tp).exp();
    let sigma2: Vec<f64> = t_prime.iter().map(|&tp| variance(tp)).collect();

    let mut beta = vec![f64::NAN; steps + 1];
    for t in 1..=steps {
        beta[t] = 1.0 - (1.0 - sigma2[t]) / (1.0 - sigma2[t - 1]);
    }

    let mut alpha_bar = vec![1.0; steps + 1];
    for t in 1..=steps {
        alpha_bar[t] = alpha_bar[t - 1] * (1.0 - beta[t]);
    }

    let mut beta_tilde = vec![f64::NAN; steps + 1];
    for t in 1..=steps {
        beta_tilde[t] = beta[t] * (1.0 - alpha_bar[t - 1]) / (1.0 - alpha_bar[t]);
    }

    let schedule = Schedule {
        steps,
        beta_min,
        beta_max,
        time_map,
        t_prime,
        sigma2,
        beta,
        alpha_bar,
        beta_tilde,
    };
    schedule.check_identities()?;
    Ok(schedule)
}

impl Schedule {
    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta_min(&self) -> f64 {
        self.beta_min
    }

    pub fn beta_max(&self) -> f64 {
        self.beta_max
    }

    pub fn time_map(&self) -> TimeMap {
        self.time_map
    }

    /// SDE time of step `t`, for `0 <= t <= T`.
    pub fn t_prime(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "t out of range");
        self.t_prime[t]
    }

    pub fn sigma2(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "t out of range");
        self.sigma2[t]
    }

    /// Per-step noise variance, `1 <= t <= T`.
    pub fn beta(&self, t: usize) -> f64 {
        assert!((1..=self.steps).contains(&t), "beta index out of range");
        self.beta[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        assert!(t <= self.steps, "t out of range");
        self.alpha_bar[t]
    }

    /// Posterior variance of `q(x_{t-1} | x_t, x_0)`; zero at `t = 1`.
    pub fn beta_tilde(&self, t: usize) -> f64 {
        assert!((1..=self.steps).contains(&t), "beta_tilde index out of range");
        self.beta_tilde[t]
    }

    /// Posterior variance with the degenerate `t = 1` entry replaced by the
    /// first positive one (the usual clipped-log-variance convention), for
    /// density evaluations where a zero variance would blow up. When the
    /// schedule has a single step there is no second entry; the forward
    /// kernel variance stands in.
    pub fn beta_tilde_clipped(&self, t: usize) -> f64 {
        assert!((1..=self.steps).contains(&t), "beta_tilde index out of range");
        if t > 1 {
            self.beta_tilde[t]
        } else if self.steps >= 2 {
            self.beta_tilde[2]
        } else {
            self.beta[1]
        }
    }

    fn check_identities(&self) -> Result<()> {
        for t in 0..=self.steps {
            let drift = (self.alpha_bar[t] - (1.0 - self.sigma2[t])).abs();
            if drift > 1e-12 {
                return Err(Error::invalid(format!(
                    "alpha_bar/sigma2 identity drift {drift:e} at t = {t}"
                )));
            }
        }
        for t in 1..=self.steps {
            if !(self.beta[t] > 0.0 && self.beta[t] < 1.0) {
                return Err(Error::invalid(format!("beta[{t}] = {} out of (0,1)", self.beta[t])));
            }
        }
        Ok(())
    }

    /// Closed-form marginal draw: `sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    ///
    /// `noise` must be a standard-normal draw of the same shape as `x0`;
    /// `t = 0` returns `x0` unchanged.
    pub fn forward_sample(
        &self,
        x0: &Array2<f64>,
        t: usize,
        noise: &Array2<f64>,
    ) -> Result<Array2<f64>> {
        if t > self.steps {
            return Err(Error::invalid(format!("t = {t} out of range 0..={}", self.steps)));
        }
        if x0.dim() != noise.dim() {
            return Err(Error::shape(format!(
                "forward_sample: x0 {:?} vs noise {:?}",
                x0.dim(),
                noise.dim()
            )));
        }
        let ab = self.alpha_bar[t];
        Ok(x0 * ab.sqrt() + noise * (1.0 - ab).sqrt())
    }

    /// Coefficients `(c0, ct)` of the posterior mean
    /// `mean = c0 * x0 + ct * x_t`, plus the posterior variance.
    pub fn posterior_coeffs(&self, t: usize) -> (f64, f64, f64) {
        assert!((1..=self.steps).contains(&t), "posterior needs 1 <= t <= T");
        let ab_prev = self.alpha_bar[t - 1];
        let ab = self.alpha_bar[t];
        let beta = self.beta[t];
        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
        (c0, ct, self.beta_tilde[t])
    }

    /// Mean and (isotropic) variance of `q(x_{t-1} | x_t, x_0)`.
    ///
    /// At `t = 1` the variance is exactly zero and the mean equals `x0`;
    /// samplers must return the mean rather than divide by the variance.
    pub fn posterior_params(
        &self,
        x_t: &Array2<f64>,
        x0: &Array2<f64>,
        t: usize,
    ) -> Result<(Array2<f64>, f64)> {
        if !(1..=self.steps).contains(&t) {
            return Err(Error::invalid(format!(
                "posterior_params: t = {t} out of range 1..={}",
                self.steps
            )));
        }
        if x_t.dim() != x0.dim() {
            return Err(Error::shape(format!(
                "posterior_params: x_t {:?} vs x0 {:?}",
                x_t.dim(),
                x0.dim()
            )));
        }
        let (c0, ct, var) = self.posterior_coeffs(t);
        Ok((x0 * c0 + x_t * ct, var))
    }

    /// Per-sample log density of the forward kernel,
    /// `log N(x_t; sqrt(1 - beta_t) x_prev, beta_t I)`, summed over
    /// coordinates.
    pub fn log_q_transition(
        &self,
        x_t: &Array2<f64>,
        x_prev: &Array2<f64>,
        t: usize,
    ) -> Result<Array1<f64>> {
        if !(1..=self.steps).contains(&t) {
            return Err(Error::invalid(format!(
                "log_q_transition: t = {t} out of range 1..={}",
                self.steps
            )));
        }
        if x_t.dim() != x_prev.dim() {
            return Err(Error::shape(format!(
                "log_q_transition: x_t {:?} vs x_prev {:?}",
                x_t.dim(),
                x_prev.dim()
            )));
        }
        let beta = self.beta[t];
        let scale = (1.0 - beta).sqrt();
        let dim = x_t.ncols() as f64;
        let log_norm = -0.5 * dim * (LN_2PI + beta.ln());
        let mut out = Array1::zeros(x_t.nrows());
        for (i, (rt, rp)) in x_t.rows().into_iter().zip(x_prev.rows()).enumerate() {
            let mut sq = 0.0;
            for (a, b) in rt.iter().zip(rp.iter()) {
                let r = a - scale * b;
                sq += r * r;
            }
            out[i] = log_norm - 0.5 * sq / beta;
        }
        Ok(out)
    }
}
