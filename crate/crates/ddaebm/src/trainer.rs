//! Alternating minimax training loop.
//!
//! Each iteration runs exactly one minimization substep (generator and
//! encoder, against the frozen energy) followed by one maximization
//! substep (energy, against the frozen generator), then folds the
//! generator parameters into the EMA shadow. Both substeps reuse the same
//! clean batch with fresh noise, latent, and time draws from a single
//! ChaCha stream, so a `(config, seed)` pair pins the entire metric
//! stream bit for bit.
//!
//! Divergence is a first-class outcome, not a silent one: a non-finite
//! loss or an energy gap beyond the configured bound aborts with the
//! iteration number attached (and a post-mortem checkpoint when a
//! checkpoint directory is configured).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{toy_batch, DatasetName, ImageSet, ToyParams};
use crate::error::{Error, Result};
use crate::models::{ModelTriple, NetworkShape, StagedEncoder, StagedEnergy, StagedGenerator};
use crate::nn::Adam;
use crate::objectives::{
    energy_diagnostics, energy_loss_graph, gen_diagnostics, generator_loss_graph,
    sample_time_indices, AblationFlags, EnergyDiagnostics, GenDiagnostics, LossWeights,
};
use crate::schedule::{make_schedule, Schedule, TimeMap};
use crate::tape::Tape;

/// Hidden-layer sizes shared by the three networks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkSizes {
    pub branch_hidden: usize,
    pub branch_out: usize,
    pub trunk_hidden: usize,
    pub time_embed_dim: usize,
    pub encoder_trunk_out: usize,
}

impl Default for NetworkSizes {
    fn default() -> Self {
        NetworkSizes {
            branch_hidden: 16,
            branch_out: 32,
            trunk_hidden: 300,
            time_embed_dim: 16,
            encoder_trunk_out: 16,
        }
    }
}

impl NetworkSizes {
    pub fn to_shape(&self, data_dim: usize, latent_dim: usize) -> NetworkShape {
        NetworkShape {
            data_dim,
            latent_dim,
            branch_hidden: self.branch_hidden,
            branch_out: self.branch_out,
            trunk_hidden: self.trunk_hidden,
            time_embed_dim: self.time_embed_dim,
            encoder_trunk_out: self.encoder_trunk_out,
        }
    }
}

/// Everything a run needs; serializable into configs and checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of diffusion steps T.
    pub steps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub time_map: TimeMap,
    pub weights: LossWeights,
    pub ablation: AblationFlags,
    pub latent_dim: usize,
    pub network: NetworkSizes,
    pub lr_generator: f64,
    pub lr_encoder: f64,
    pub lr_energy: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    /// `None` disables averaging (the shadow mirrors the live weights).
    pub ema_decay: Option<f64>,
    pub ema_track_energy: bool,
    pub batch_size: usize,
    pub total_iterations: u64,
    pub seed: u64,
    pub dataset: String,
    /// Image file or folder for the non-toy datasets.
    pub data_path: Option<PathBuf>,
    pub toy: ToyParams,
    pub grad_clip: Option<f64>,
    /// Abort when |mean real energy - mean fake energy| exceeds this.
    pub divergence_gap_limit: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 4,
            beta_min: 0.1,
            beta_max: 20.0,
            time_map: TimeMap::Equidistant,
            weights: LossWeights::default(),
            ablation: AblationFlags::default(),
            latent_dim: 2,
            network: NetworkSizes::default(),
            lr_generator: 1e-4,
            lr_encoder: 1e-4,
            lr_energy: 1e-4,
            adam_beta1: 0.0,
            adam_beta2: 0.9,
            ema_decay: Some(0.999),
            ema_track_energy: false,
            batch_size: 200,
            total_iterations: 20_000,
            seed: 0,
            dataset: "gaussians25".into(),
            data_path: None,
            toy: ToyParams::default(),
            grad_clip: None,
            divergence_gap_limit: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::invalid("batch_size must be at least 2"));
        }
        if !(self.lr_generator > 0.0 && self.lr_encoder > 0.0 && self.lr_energy > 0.0)
            && !(self.lr_generator == 0.0 && self.lr_encoder == 0.0 && self.lr_energy == 0.0)
        {
            // All-zero learning rates are allowed for dry runs; otherwise
            // each rate must be positive.
            return Err(Error::invalid("learning rates must be positive (or all zero)"));
        }
        if let Some(decay) = self.ema_decay {
            if !(0.0..1.0).contains(&decay) {
                return Err(Error::invalid("ema_decay must lie in [0, 1)"));
            }
        }
        if self.total_iterations == 0 {
            return Err(Error::invalid("total_iterations must be positive"));
        }
        self.weights.validate()?;
        self.ablation.validate()?;
        DatasetName::parse(&self.dataset)?;
        Ok(())
    }
}

enum DataProvider {
    Toy { name: DatasetName, params: ToyParams },
    Images(ImageSet),
}

impl DataProvider {
    fn dim(&self) -> usize {
        match self {
            DataProvider::Toy { .. } => 2,
            DataProvider::Images(set) => set.dim(),
        }
    }

    fn batch(&self, n: usize, rng: &mut ChaCha12Rng) -> Result<Array2<f64>> {
        match self {
            DataProvider::Toy { name, params } => toy_batch(*name, params, n, rng),
            DataProvider::Images(set) => {
                let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..set.len())).collect();
                Ok(set.gather(&idx))
            }
        }
    }
}

/// Per-step record; this is also the metrics-log line schema.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct StepMetrics {
    pub iteration: u64,
    pub loss_gen: f64,
    pub loss_energy: f64,
    pub energy_gap: f64,
    pub grad_penalty: f64,
    pub wallclock: f64,
}

/// Live training state. Everything that affects future iterations is
/// serializable; see the checkpoint format in [`crate::persistence`].
pub struct TrainState {
    pub config: TrainConfig,
    pub schedule: Schedule,
    pub triple: ModelTriple,
    pub opt_generator: Adam,
    pub opt_encoder: Adam,
    pub opt_energy: Adam,
    pub rng: ChaCha12Rng,
    pub iteration: u64,
    data: DataProvider,
    started: Instant,
}

impl TrainState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let schedule =
            make_schedule(config.steps, config.beta_min, config.beta_max, config.time_map)?;
        let data = build_provider(config)?;
        let shape = config.network.to_shape(data.dim(), config.latent_dim);
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let triple = ModelTriple::new(&shape, config.ema_track_energy, &mut rng);
        let mut opt_generator =
            Adam::new(&triple.generator.store, config.lr_generator, config.adam_beta1, config.adam_beta2);
        let mut opt_encoder =
            Adam::new(&triple.encoder.store, config.lr_encoder, config.adam_beta1, config.adam_beta2);
        let mut opt_energy =
            Adam::new(&triple.energy.store, config.lr_energy, config.adam_beta1, config.adam_beta2);
        opt_generator.clip_norm = config.grad_clip;
        opt_encoder.clip_norm = config.grad_clip;
        opt_energy.clip_norm = config.grad_clip;
        Ok(TrainState {
            config: config.clone(),
            schedule,
            triple,
            opt_generator,
            opt_encoder,
            opt_energy,
            rng,
            iteration: 0,
            data,
            started: Instant::now(),
        })
    }

    pub fn data_dim(&self) -> usize {
        self.data.dim()
    }

    /// `(channels, height, width)` when training on image data.
    pub fn example_image_shape(&self) -> Option<(usize, usize, usize)> {
        match &self.data {
            DataProvider::Images(set) => Some(set.example_shape()),
            DataProvider::Toy { .. } => None,
        }
    }

    /// Fresh clean batch from the configured dataset.
    pub fn draw_batch(&mut self) -> Result<Array2<f64>> {
        self.data.batch(self.config.batch_size, &mut self.rng)
    }

    fn diverged(&self, detail: String) -> Error {
        Error::Diverged { iteration: self.iteration, detail }
    }
}

fn build_provider(config: &TrainConfig) -> Result<DataProvider> {
    let name = DatasetName::parse(&config.dataset)?;
    match name {
        n if n.is_toy() => Ok(DataProvider::Toy { name: n, params: config.toy }),
        DatasetName::Mnist => {
            let path = config
                .data_path
                .as_ref()
                .ok_or_else(|| Error::Config("mnist requires data_path (IDX file)".into()))?;
            Ok(DataProvider::Images(crate::datasets::load_idx_images(path)?))
        }
        DatasetName::ImageFolder => {
            let path = config
                .data_path
                .as_ref()
                .ok_or_else(|| Error::Config("image_folder requires data_path".into()))?;
            Ok(DataProvider::Images(crate::datasets::load_image_folder(path)?))
        }
        _ => unreachable!("toy handled above"),
    }
}

/// Minimization substep: update generator and encoder against the frozen
/// energy. Returns the loss diagnostics.
fn generator_substep(state: &mut TrainState, x0: &Array2<f64>, ts: &[usize]) -> Result<GenDiagnostics> {
    let mut tape = Tape::new();
    let gen = StagedGenerator::new(&state.triple.generator, &mut tape, true);
    let enc = StagedEncoder::new(&state.triple.encoder, &mut tape, true);
    let frozen_energy = StagedEnergy::new(&state.triple.energy, &mut tape);
    let parts = generator_loss_graph(
        &mut tape,
        &state.schedule,
        &state.config.weights,
        &state.config.ablation,
        &gen,
        &enc,
        &frozen_energy,
        state.config.latent_dim,
        x0,
        ts,
        &mut state.rng,
    )?;
    let diag = gen_diagnostics(&tape, &parts, &state.config.weights);
    if !diag.total.is_finite() {
        return Err(state.diverged(format!("generator loss not finite (l1={}, l2={})", diag.l1, diag.l2)));
    }
    let mut wrt = gen.vars.clone();
    wrt.extend_from_slice(&enc.vars);
    let grads = tape.grad(parts.loss, &wrt);
    let values: Vec<Option<Array2<f64>>> =
        grads.iter().map(|g| g.map(|v| tape.value(v).clone())).collect();
    let (gen_grads, enc_grads) = values.split_at(gen.vars.len());
    state.opt_generator.apply(&mut state.triple.generator.store, gen_grads);
    state.opt_encoder.apply(&mut state.triple.encoder.store, enc_grads);
    Ok(diag)
}

/// Maximization substep: update the energy against the frozen generator.
fn energy_substep(state: &mut TrainState, x0: &Array2<f64>, ts: &[usize]) -> Result<EnergyDiagnostics> {
    let mut tape = Tape::new();
    let energy = StagedEnergy::new(&state.triple.energy, &mut tape);
    let frozen_gen = StagedGenerator::new(&state.triple.generator, &mut tape, true);
    let parts = energy_loss_graph(
        &mut tape,
        &state.schedule,
        &state.config.weights,
        &state.config.ablation,
        &frozen_gen,
        &energy,
        state.config.latent_dim,
        x0,
        ts,
        &mut state.rng,
    )?;
    let diag = energy_diagnostics(&tape, &parts);
    if !diag.total.is_finite() {
        return Err(state.diverged(format!(
            "energy loss not finite (real={}, fake={}, penalty={})",
            diag.real_energy, diag.fake_energy, diag.grad_penalty
        )));
    }
    let grads = tape.grad(parts.loss, &energy.vars);
    let values: Vec<Option<Array2<f64>>> =
        grads.iter().map(|g| g.map(|v| tape.value(v).clone())).collect();
    state.opt_energy.apply(&mut state.triple.energy.store, &values);
    Ok(diag)
}

/// One full iteration of the game: minimize, then maximize, then EMA.
pub fn train_step(state: &mut TrainState, x0: &Array2<f64>) -> Result<StepMetrics> {
    if x0.nrows() < 2 {
        return Err(Error::invalid("train_step requires a batch of at least 2"));
    }
    let ts = sample_time_indices(&mut state.rng, x0.nrows(), state.schedule.steps());
    let gen_diag = generator_substep(state, x0, &ts)?;
    let energy_diag = energy_substep(state, x0, &ts)?;
    state.triple.ema_update(state.config.ema_decay.unwrap_or(0.0));
    state.iteration += 1;
    if energy_diag.energy_gap.abs() > state.config.divergence_gap_limit {
        return Err(state.diverged(format!(
            "energy gap {} exceeded limit {}",
            energy_diag.energy_gap, state.config.divergence_gap_limit
        )));
    }
    Ok(StepMetrics {
        iteration: state.iteration,
        loss_gen: gen_diag.total,
        loss_energy: energy_diag.total,
        energy_gap: energy_diag.energy_gap,
        grad_penalty: energy_diag.grad_penalty,
        wallclock: state.started.elapsed().as_secs_f64(),
    })
}

/// Output sinks for [`fit`]; everything optional.
#[derive(Default)]
pub struct FitSinks<'a> {
    /// Newline-delimited JSON records, one per step.
    pub metrics: Option<&'a mut dyn Write>,
    pub checkpoint_dir: Option<&'a Path>,
    /// Periodic checkpoint interval in iterations; 0 writes only the final
    /// checkpoint.
    pub checkpoint_every: u64,
    pub on_step: Option<&'a mut dyn FnMut(&StepMetrics)>,
}

#[derive(Debug, Clone, Copy)]
pub struct FitReport {
    pub iterations_run: u64,
    pub final_metrics: Option<StepMetrics>,
}

/// Run `train_step` until `total_iterations`, drawing fresh batches.
///
/// Resumable: a state restored from a checkpoint continues where it left
/// off and reproduces the uninterrupted metric stream exactly (wallclock
/// excepted). On divergence a post-mortem checkpoint is written before the
/// error propagates.
pub fn fit(state: &mut TrainState, sinks: Option<FitSinks>) -> Result<FitReport> {
    let mut sinks = sinks.unwrap_or_default();
    let start_iteration = state.iteration;
    let mut last = None;
    while state.iteration < state.config.total_iterations {
        let x0 = state.draw_batch()?;
        let metrics = match train_step(state, &x0) {
            Ok(m) => m,
            Err(err) => {
                if let Some(dir) = sinks.checkpoint_dir {
                    // Post-mortem snapshot for debugging; best effort.
                    let _ = crate::persistence::save_checkpoint(
                        state,
                        &dir.join("postmortem.ckpt"),
                    );
                }
                return Err(err);
            }
        };
        if let Some(w) = sinks.metrics.as_deref_mut() {
            serde_json::to_writer(&mut *w, &metrics)
                .map_err(|e| Error::Persistence(format!("metrics log: {e}")))?;
            writeln!(w)?;
        }
        if let Some(cb) = sinks.on_step.as_deref_mut() {
            cb(&metrics);
        }
        if let Some(dir) = sinks.checkpoint_dir {
            let every = sinks.checkpoint_every;
            if every > 0 && metrics.iteration % every == 0 {
                crate::persistence::save_checkpoint(
                    state,
                    &dir.join(format!("iter_{:08}.ckpt", metrics.iteration)),
                )?;
            }
        }
        last = Some(metrics);
    }
    if let Some(dir) = sinks.checkpoint_dir {
        crate::persistence::save_checkpoint(state, &dir.join("final.ckpt"))?;
    }
    Ok(FitReport { iterations_run: state.iteration - start_iteration, final_metrics: last })
}
