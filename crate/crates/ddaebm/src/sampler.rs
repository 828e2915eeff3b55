//! Ancestral sampling through the learned chain, plus one-step energy
//! refinement.
//!
//! A chain starts at `x_T ~ N(0, I)` and walks down: at each step the
//! generator predicts a clean point from `(x_t, z, t)` and the next state
//! is a draw from the forward-process posterior around that prediction.
//! The cost is exactly `T` generator evaluations per sample. The `t = 1`
//! posterior has zero variance, so the final step is deterministic and
//! consumes no noise: a chain uses `T` Gaussian noise tensors (one for
//! `x_T`, one per step above `t = 1`) and `T` latent draws.
//!
//! Refinement is a single gradient-ascent step on the `t = 0` energy,
//! `x + step * grad E(x, 0)` — a cheap, one-step substitute for an MCMC
//! polish.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::models::{EnergyNet, ModelTriple};
use crate::objectives::{sample_standard_normal, AblationFlags};
use crate::schedule::Schedule;

/// What to generate and how.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SampleRequest {
    pub n: usize,
    /// Sample through the EMA generator (the default) or the live one.
    pub use_ema: bool,
    pub refine: bool,
    /// Step size of the refinement; must be positive when `refine` is set.
    /// `None` picks the first-step noise scale `2 (1 - alpha_bar_1)`.
    pub refine_step_size: Option<f64>,
    pub seed: u64,
}

impl Default for SampleRequest {
    fn default() -> Self {
        SampleRequest { n: 1, use_ema: true, refine: false, refine_step_size: None, seed: 0 }
    }
}

/// Resource accounting for one sampling call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SampleStats {
    /// Generator forward passes per sample (the NFE).
    pub generator_evals: usize,
    /// Standard-normal tensors drawn per chain (initial state + posterior
    /// noise above `t = 1`).
    pub noise_tensors: usize,
    /// Latent draws per chain.
    pub latent_draws: usize,
    /// Energy gradient evaluations (1 when refinement ran).
    pub energy_grad_evals: usize,
}

/// Default refinement step: the first-step noise variance scale.
pub fn default_refine_step(schedule: &Schedule) -> f64 {
    2.0 * (1.0 - schedule.alpha_bar(1))
}

/// Chain core, generic over the denoiser so closed-form generators can be
/// pushed through it in tests. `gen` maps `(x_t, z, ts)` to the predicted
/// clean batch.
pub fn ancestral_chain<F>(
    gen: F,
    schedule: &Schedule,
    n: usize,
    data_dim: usize,
    latent_dim: usize,
    no_latent: bool,
    rng: &mut ChaCha12Rng,
) -> Result<(Array2<f64>, SampleStats)>
where
    F: Fn(&Array2<f64>, &Array2<f64>, &[usize]) -> Result<Array2<f64>>,
{
    if n < 1 {
        return Err(Error::invalid("sampling requires n >= 1"));
    }
    let steps = schedule.steps();
    let mut stats =
        SampleStats { generator_evals: 0, noise_tensors: 0, latent_draws: 0, energy_grad_evals: 0 };

    let mut x = sample_standard_normal(rng, (n, data_dim));
    stats.noise_tensors += 1;
    for t in (1..=steps).rev() {
        let z = if no_latent {
            Array2::zeros((n, latent_dim))
        } else {
            sample_standard_normal(rng, (n, latent_dim))
        };
        stats.latent_draws += 1;
        let x0_hat = gen(&x, &z, &vec![t; n])?;
        if x0_hat.dim() != x.dim() {
            return Err(Error::shape(format!(
                "generator output {:?} vs chain state {:?}",
                x0_hat.dim(),
                x.dim()
            )));
        }
        let (mean, var) = schedule.posterior_params(&x, &x0_hat, t)?;
        if var > 0.0 {
            let eps = sample_standard_normal(rng, (n, data_dim));
            stats.noise_tensors += 1;
            x = mean + eps * var.sqrt();
        } else {
            // Dirac posterior at t = 1: the mean is the sample.
            x = mean;
        }
        stats.generator_evals += 1;
    }
    Ok((x, stats))
}

/// Generate `request.n` points from a trained triple.
pub fn ancestral_sample(
    triple: &ModelTriple,
    schedule: &Schedule,
    flags: &AblationFlags,
    request: &SampleRequest,
) -> Result<(Array2<f64>, SampleStats)> {
    let generator = if request.use_ema { &triple.ema_generator } else { &triple.generator };
    if let Some(step) = request.refine_step_size {
        if request.refine && step <= 0.0 {
            return Err(Error::invalid("refine_step_size must be positive"));
        }
    }
    let mut rng = ChaCha12Rng::seed_from_u64(request.seed);
    let (samples, mut stats) = ancestral_chain(
        |x_t, z, ts| generator.generate_batch(x_t, z, ts),
        schedule,
        request.n,
        triple.data_dim(),
        triple.latent_dim(),
        flags.no_latent,
        &mut rng,
    )?;
    if request.refine {
        let step = request.refine_step_size.unwrap_or_else(|| default_refine_step(schedule));
        let energy = match (&triple.ema_energy, request.use_ema) {
            (Some(shadow), true) => shadow,
            _ => &triple.energy,
        };
        let refined = refine(energy, &samples, step)?;
        stats.energy_grad_evals += 1;
        return Ok((refined, stats));
    }
    Ok((samples, stats))
}

/// One gradient-ascent step on the clean-data energy:
/// `x + step * grad_x E(x, 0)`.
pub fn refine(energy: &EnergyNet, x0: &Array2<f64>, step_size: f64) -> Result<Array2<f64>> {
    if step_size < 0.0 {
        return Err(Error::invalid("refine step size must be nonnegative"));
    }
    let ts = vec![0usize; x0.nrows()];
    let grad = energy.energy_input_grad(x0, &ts)?;
    if grad.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged {
            iteration: 0,
            detail: "non-finite energy gradient during refinement".into(),
        });
    }
    Ok(x0 + &(grad * step_size))
}
