//! Checkpoints, array files, run configs, presets, metrics, run locks.
//!
//! Two binary containers, both little-endian f64 with JSON headers:
//!
//! - **Array file** (`DDARRAY1`): shape + dtype header followed by the raw
//!   payload; trivially readable from any language.
//! - **Checkpoint** (`DDAEBMCK`): the full training state — config, RNG
//!   position, every parameter and buffer, optimizer moments — such that
//!   `save -> load -> train` is bit-identical to training straight
//!   through. Loading rejects unknown format versions.
//!
//! Run configuration is TOML: a `preset` name plus a `[train]` table where
//! any field may be overridden per key. Unknown keys are rejected with the
//! offending key named.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trainer::{NetworkSizes, StepMetrics, TrainConfig, TrainState};

const ARRAY_MAGIC: &[u8; 8] = b"DDARRAY1";
const CHECKPOINT_MAGIC: &[u8; 8] = b"DDAEBMCK";
pub const CHECKPOINT_VERSION: u32 = 1;

// ── array files ───────────────────────────────────────────────────────

/// Write a matrix as a self-describing little-endian container.
pub fn write_matrix(path: &Path, data: &Array2<f64>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(ARRAY_MAGIC)?;
    let header = serde_json::json!({
        "dtype": "f64",
        "order": "row_major",
        "shape": [data.nrows(), data.ncols()],
    })
    .to_string();
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(header.as_bytes())?;
    for v in data.iter() {
        file.write_all(&v.to_le_bytes())?;
    }
    file.flush()?;
    Ok(())
}

/// Read a matrix written by [`write_matrix`].
pub fn read_matrix(path: &Path) -> Result<Array2<f64>> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != ARRAY_MAGIC {
        return Err(Error::Persistence(format!("not an array file: {}", path.display())));
    }
    let mut len = [0u8; 4];
    file.read_exact(&mut len)?;
    let mut header = vec![0u8; u32::from_le_bytes(len) as usize];
    file.read_exact(&mut header)?;
    let header: serde_json::Value = serde_json::from_slice(&header)
        .map_err(|e| Error::Persistence(format!("array header: {e}")))?;
    if header["dtype"] != "f64" {
        return Err(Error::Persistence(format!("unsupported dtype {}", header["dtype"])));
    }
    let shape: Vec<usize> = serde_json::from_value(header["shape"].clone())
        .map_err(|e| Error::Persistence(format!("array shape: {e}")))?;
    if shape.len() != 2 {
        return Err(Error::Persistence("array files hold rank-2 data".into()));
    }
    let mut payload = Vec::new();
    file.read_to_end(&mut payload)?;
    if payload.len() != shape[0] * shape[1] * 8 {
        return Err(Error::Persistence(format!(
            "payload {} bytes does not match shape {shape:?}",
            payload.len()
        )));
    }
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Array2::from_shape_vec((shape[0], shape[1]), values)
        .map_err(|e| Error::Persistence(format!("array reshape: {e}")))
}

// ── checkpoints ───────────────────────────────────────────────────────

#[derive(Serialize, Deserialize)]
struct RngState {
    seed: [u8; 32],
    stream: u64,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

impl RngState {
    fn capture(rng: &ChaCha12Rng) -> Self {
        let pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    fn restore(&self) -> ChaCha12Rng {
        let mut rng = ChaCha12Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config: TrainConfig,
    iteration: u64,
    rng: RngState,
    opt_steps: [u64; 3],
    arrays: Vec<ArrayEntry>,
}

struct ArrayBundle {
    entries: Vec<ArrayEntry>,
    arrays: Vec<Array2<f64>>,
}

impl ArrayBundle {
    fn new() -> Self {
        ArrayBundle { entries: Vec::new(), arrays: Vec::new() }
    }

    fn push(&mut self, name: String, arr: Array2<f64>) {
        self.entries.push(ArrayEntry { name, rows: arr.nrows(), cols: arr.ncols() });
        self.arrays.push(arr);
    }

    fn push_store(&mut self, prefix: &str, store: &crate::nn::ParamStore) {
        for (i, arr) in store.values().iter().enumerate() {
            self.push(format!("{prefix}.{i}"), arr.clone());
        }
    }

    fn push_bn(&mut self, prefix: &str, buffers: Vec<(Array2<f64>, Array2<f64>)>) {
        for (i, (mean, var)) in buffers.into_iter().enumerate() {
            self.push(format!("{prefix}.bn{i}.mean"), mean);
            self.push(format!("{prefix}.bn{i}.var"), var);
        }
    }

    fn push_adam(&mut self, prefix: &str, adam: &crate::nn::Adam) {
        for (i, m) in adam.m.iter().enumerate() {
            self.push(format!("{prefix}.m.{i}"), m.clone());
        }
        for (i, v) in adam.v.iter().enumerate() {
            self.push(format!("{prefix}.v.{i}"), v.clone());
        }
    }
}

fn collect_state(state: &TrainState) -> ArrayBundle {
    let mut bundle = ArrayBundle::new();
    bundle.push_store("theta", &state.triple.energy.store);
    bundle.push_store("phi", &state.triple.generator.store);
    bundle.push_store("psi", &state.triple.encoder.store);
    bundle.push_store("ema_phi", &state.triple.ema_generator.store);
    if let Some(shadow) = &state.triple.ema_energy {
        bundle.push_store("ema_theta", &shadow.store);
    }
    bundle.push_bn("phi", state.triple.generator.bn_buffers());
    bundle.push_bn("psi", state.triple.encoder.bn_buffers());
    bundle.push_bn("ema_phi", state.triple.ema_generator.bn_buffers());
    bundle.push_adam("opt_theta", &state.opt_energy);
    bundle.push_adam("opt_phi", &state.opt_generator);
    bundle.push_adam("opt_psi", &state.opt_encoder);
    bundle
}

/// Serialize the complete training state.
pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let bundle = collect_state(state);
    let header = CheckpointHeader {
        version: CHECKPOINT_VERSION,
        config: state.config.clone(),
        iteration: state.iteration,
        rng: RngState::capture(&state.rng),
        opt_steps: [state.opt_energy.step, state.opt_generator.step, state.opt_encoder.step],
        arrays: bundle.entries,
    };
    let header_bytes = serde_json::to_vec(&header)
        .map_err(|e| Error::Persistence(format!("checkpoint header: {e}")))?;

    let mut file = BufWriter::new(File::create(path)?);
    file.write_all(CHECKPOINT_MAGIC)?;
    file.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    file.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    file.write_all(&header_bytes)?;
    for arr in &bundle.arrays {
        for v in arr.iter() {
            file.write_all(&v.to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

/// Restore a training state; the result continues training bit-for-bit.
pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    let mut file = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Persistence(format!("not a checkpoint file: {}", path.display())));
    }
    let mut version = [0u8; 4];
    file.read_exact(&mut version)?;
    let version = u32::from_le_bytes(version);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Persistence(format!(
            "unsupported checkpoint version {version} (this build reads {CHECKPOINT_VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    file.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    file.read_exact(&mut header)?;
    let header: CheckpointHeader = serde_json::from_slice(&header)
        .map_err(|e| Error::Persistence(format!("checkpoint header: {e}")))?;

    let mut arrays = Vec::with_capacity(header.arrays.len());
    for entry in &header.arrays {
        let mut buf = vec![0u8; entry.rows * entry.cols * 8];
        file.read_exact(&mut buf).map_err(|_| {
            Error::Persistence(format!("checkpoint truncated while reading {}", entry.name))
        })?;
        let values: Vec<f64> =
            buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        arrays.push(
            Array2::from_shape_vec((entry.rows, entry.cols), values)
                .map_err(|e| Error::Persistence(format!("array {}: {e}", entry.name)))?,
        );
    }

    let mut state = TrainState::new(&header.config)?;
    let mut cursor = 0usize;
    let mut take = |expected_prefix: &str,
                    count: usize,
                    entries: &[ArrayEntry]|
     -> Result<Vec<Array2<f64>>> {
        let mut out = Vec::with_capacity(count);
        for k in 0..count {
            let entry = entries.get(cursor).ok_or_else(|| {
                Error::Persistence(format!("checkpoint missing arrays for {expected_prefix}"))
            })?;
            if !entry.name.starts_with(expected_prefix) {
                return Err(Error::Persistence(format!(
                    "checkpoint layout mismatch: expected {expected_prefix}.{k}, found {}",
                    entry.name
                )));
            }
            out.push(arrays[cursor].clone());
            cursor += 1;
        }
        Ok(out)
    };

    let assign_store = |store: &mut crate::nn::ParamStore, values: Vec<Array2<f64>>| -> Result<()> {
        if store.len() != values.len() {
            return Err(Error::Persistence(format!(
                "parameter count mismatch: store {} vs checkpoint {}",
                store.len(),
                values.len()
            )));
        }
        for (dst, src) in store.values_mut().iter_mut().zip(values) {
            if dst.dim() != src.dim() {
                return Err(Error::Persistence(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    dst.dim(),
                    src.dim()
                )));
            }
            *dst = src;
        }
        Ok(())
    };

    let entries = &header.arrays;
    let n_theta = state.triple.energy.store.len();
    let n_phi = state.triple.generator.store.len();
    let n_psi = state.triple.encoder.store.len();

    assign_store(&mut state.triple.energy.store, take("theta.", n_theta, entries)?)?;
    assign_store(&mut state.triple.generator.store, take("phi.", n_phi, entries)?)?;
    assign_store(&mut state.triple.encoder.store, take("psi.", n_psi, entries)?)?;
    assign_store(&mut state.triple.ema_generator.store, take("ema_phi.", n_phi, entries)?)?;
    if state.triple.ema_energy.is_some() {
        let values = take("ema_theta.", n_theta, entries)?;
        assign_store(&mut state.triple.ema_energy.as_mut().unwrap().store, values)?;
    }

    let to_pairs = |values: Vec<Array2<f64>>| -> Vec<(Array2<f64>, Array2<f64>)> {
        values.chunks(2).map(|c| (c[0].clone(), c[1].clone())).collect()
    };
    state.triple.generator.set_bn_buffers(to_pairs(take("phi.bn", 6, entries)?));
    state.triple.encoder.set_bn_buffers(to_pairs(take("psi.bn", 6, entries)?));
    state.triple.ema_generator.set_bn_buffers(to_pairs(take("ema_phi.bn", 6, entries)?));

    let mut assign_adam = |adam: &mut crate::nn::Adam, prefix: &str, count: usize| -> Result<()> {
        adam.m = take(&format!("{prefix}.m"), count, entries)?;
        adam.v = take(&format!("{prefix}.v"), count, entries)?;
        Ok(())
    };
    assign_adam(&mut state.opt_energy, "opt_theta", n_theta)?;
    assign_adam(&mut state.opt_generator, "opt_phi", n_phi)?;
    assign_adam(&mut state.opt_encoder, "opt_psi", n_psi)?;
    state.opt_energy.step = header.opt_steps[0];
    state.opt_generator.step = header.opt_steps[1];
    state.opt_encoder.step = header.opt_steps[2];

    state.rng = header.rng.restore();
    state.iteration = header.iteration;
    Ok(state)
}

// ── run configuration and presets ─────────────────────────────────────

/// Reference-scale hyperparameters recorded for documentation; the desk
/// build never trains these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceArchitecture {
    pub resnet_blocks_per_scale: u32,
    pub initial_channels: u32,
    pub channel_multipliers: Vec<u32>,
    pub attention_scale: u32,
    pub latent_mapping_layers: u32,
    pub latent_embed_dim: u32,
    pub epochs: u32,
    pub gpus: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Mnist,
    Cifar10Reference,
    CelebaReference,
    LsunReference,
}

impl Preset {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Preset::Toy),
            "mnist" => Ok(Preset::Mnist),
            "cifar10-reference" => Ok(Preset::Cifar10Reference),
            "celeba-reference" => Ok(Preset::CelebaReference),
            "lsun-reference" => Ok(Preset::LsunReference),
            other => Err(Error::Config(format!(
                "unknown preset {other}; expected toy, mnist, cifar10-reference, \
                 celeba-reference, or lsun-reference"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Preset::Toy => "toy",
            Preset::Mnist => "mnist",
            Preset::Cifar10Reference => "cifar10-reference",
            Preset::CelebaReference => "celeba-reference",
            Preset::LsunReference => "lsun-reference",
        }
    }

    /// Reference presets document full-scale runs and warn when launched.
    pub fn is_reference(&self) -> bool {
        matches!(
            self,
            Preset::Cifar10Reference | Preset::CelebaReference | Preset::LsunReference
        )
    }
}

/// A resolved run configuration: trainable settings plus, for reference
/// presets, the documented full-scale architecture.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub reference: Option<ReferenceArchitecture>,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> RunConfig {
        use crate::schedule::TimeMap;
        let base = TrainConfig::default();
        match preset {
            Preset::Toy => RunConfig { preset, train: base, reference: None },
            Preset::Mnist => RunConfig {
                preset,
                train: TrainConfig {
                    beta_min: 0.1,
                    beta_max: 10.0,
                    latent_dim: 50,
                    ema_decay: None,
                    batch_size: 128,
                    total_iterations: 187_500, // 400 epochs of 60k images
                    dataset: "mnist".into(),
                    network: NetworkSizes {
                        branch_hidden: 1600,
                        branch_out: 1600,
                        trunk_hidden: 1600,
                        time_embed_dim: 50,
                        encoder_trunk_out: 100,
                    },
                    ..base
                },
                reference: None,
            },
            Preset::Cifar10Reference => RunConfig {
                preset,
                train: TrainConfig {
                    lr_generator: 1e-4,
                    lr_encoder: 1e-4,
                    lr_energy: 1e-4,
                    latent_dim: 100,
                    ema_decay: Some(0.9999),
                    batch_size: 64,
                    total_iterations: 1_000_000,
                    dataset: "image_folder".into(),
                    ..base.clone()
                },
                reference: Some(ReferenceArchitecture {
                    resnet_blocks_per_scale: 2,
                    initial_channels: 128,
                    channel_multipliers: vec![1, 2, 2, 2],
                    attention_scale: 16,
                    latent_mapping_layers: 4,
                    latent_embed_dim: 256,
                    epochs: 1200,
                    gpus: 4,
                }),
            },
            Preset::CelebaReference => RunConfig {
                preset,
                train: TrainConfig {
                    lr_generator: 5e-5,
                    lr_encoder: 5e-5,
                    lr_energy: 5e-5,
                    latent_dim: 100,
                    ema_decay: Some(0.999),
                    batch_size: 32,
                    total_iterations: 1_000_000,
                    dataset: "image_folder".into(),
                    ..base.clone()
                },
                reference: Some(ReferenceArchitecture {
                    resnet_blocks_per_scale: 2,
                    initial_channels: 64,
                    channel_multipliers: vec![1, 1, 2, 2, 4],
                    attention_scale: 16,
                    latent_mapping_layers: 4,
                    latent_embed_dim: 256,
                    epochs: 400,
                    gpus: 4,
                }),
            },
            Preset::LsunReference => RunConfig {
                preset,
                train: TrainConfig {
                    lr_generator: 5e-5,
                    lr_encoder: 5e-5,
                    lr_energy: 5e-5,
                    time_map: TimeMap::Truncated,
                    weights: crate::objectives::LossWeights {
                        w: 0.6,
                        w_mid: 0.2,
                        ..Default::default()
                    },
                    latent_dim: 100,
                    ema_decay: Some(0.999),
                    batch_size: 12,
                    total_iterations: 1_000_000,
                    dataset: "image_folder".into(),
                    ..base
                },
                reference: Some(ReferenceArchitecture {
                    resnet_blocks_per_scale: 2,
                    initial_channels: 64,
                    channel_multipliers: vec![1, 2, 2, 4, 4],
                    attention_scale: 16,
                    latent_mapping_layers: 4,
                    latent_embed_dim: 256,
                    epochs: 400,
                    gpus: 4,
                }),
            },
        }
    }
}

fn merge_toml(base: &mut toml::Value, overlay: toml::Value) {
    match (base, overlay) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parse a run-config document: optional `preset` plus per-key `[train]`
/// overrides. Unknown keys fail with the key named.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let table: toml::Table =
        toml::from_str(text).map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    for key in table.keys() {
        if key != "preset" && key != "train" {
            return Err(Error::Config(format!("unknown config key: {key}")));
        }
    }
    let preset = match table.get("preset") {
        Some(v) => Preset::parse(
            v.as_str().ok_or_else(|| Error::Config("preset must be a string".into()))?,
        )?,
        None => Preset::Toy,
    };
    let mut config = RunConfig::preset(preset);
    if let Some(overrides) = table.get("train") {
        let base_text = toml::to_string(&config.train)
            .map_err(|e| Error::Config(format!("config serialize: {e}")))?;
        let mut base = toml::Value::Table(
            toml::from_str(&base_text).map_err(|e| Error::Config(format!("config: {e}")))?,
        );
        merge_toml(&mut base, overrides.clone());
        config.train = base
            .try_into()
            .map_err(|e| Error::Config(format!("config field error: {e}")))?;
    }
    config.train.validate()?;
    Ok(config)
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_run_config(&text)
}

// ── metrics log ───────────────────────────────────────────────────────

pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            serde_json::from_str(l).map_err(|e| Error::Persistence(format!("metrics line: {e}")))
        })
        .collect()
}

// ── run lock ──────────────────────────────────────────────────────────

/// Exclusive lock on a run directory; at most one trainer writes a given
/// checkpoint path. Released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(dir: &Path) -> Result<RunLock> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".ddaebm.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory {} is locked by another trainer (remove {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::{fit, train_step, FitSinks};
    use ndarray::array;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            batch_size: 16,
            total_iterations: 30,
            network: NetworkSizes {
                branch_hidden: 8,
                branch_out: 8,
                trunk_hidden: 24,
                time_embed_dim: 8,
                encoder_trunk_out: 8,
            },
            seed: 9,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn array_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.arr");
        let m = array![[1.5, -2.25, 3.0], [0.0, f64::MIN_POSITIVE, 1e300]];
        write_matrix(&path, &m).unwrap();
        let back = read_matrix(&path).unwrap();
        assert_eq!(m, back);
        std::fs::write(&path, b"garbage").unwrap();
        assert!(read_matrix(&path).is_err());
    }

    #[test]
    fn checkpoint_roundtrip_resumes_bit_for_bit() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();

        // Straight-through run: 5 warmup steps + 10 recorded steps.
        let mut straight = TrainState::new(&config).unwrap();
        for _ in 0..5 {
            let x0 = straight.draw_batch().unwrap();
            train_step(&mut straight, &x0).unwrap();
        }
        let ckpt = dir.path().join("mid.ckpt");
        save_checkpoint(&straight, &ckpt).unwrap();
        let mut wanted = Vec::new();
        for _ in 0..10 {
            let x0 = straight.draw_batch().unwrap();
            let m = train_step(&mut straight, &x0).unwrap();
            wanted.push((m.iteration, m.loss_gen, m.loss_energy, m.energy_gap, m.grad_penalty));
        }

        // Resumed run reproduces the stream exactly.
        let mut resumed = load_checkpoint(&ckpt).unwrap();
        assert_eq!(resumed.iteration, 5);
        for want in wanted {
            let x0 = resumed.draw_batch().unwrap();
            let m = train_step(&mut resumed, &x0).unwrap();
            assert_eq!(
                (m.iteration, m.loss_gen, m.loss_energy, m.energy_gap, m.grad_penalty),
                want
            );
        }
    }

    #[test]
    fn checkpoint_rejects_other_versions() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config();
        let state = TrainState::new(&config).unwrap();
        let path = dir.path().join("v.ckpt");
        save_checkpoint(&state, &path).unwrap();
        // Corrupt the version field (bytes 8..12).
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(err) => assert!(err.to_string().contains("version"), "unexpected error: {err}"),
            Ok(_) => panic!("corrupted version must be rejected"),
        }
    }

    #[test]
    fn fit_writes_final_checkpoint_and_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let config = TrainConfig { total_iterations: 3, ..tiny_config() };
        let mut state = TrainState::new(&config).unwrap();
        let metrics_path = dir.path().join("metrics.jsonl");
        let mut metrics_file = std::fs::File::create(&metrics_path).unwrap();
        fit(
            &mut state,
            Some(FitSinks {
                metrics: Some(&mut metrics_file),
                checkpoint_dir: Some(dir.path()),
                checkpoint_every: 2,
                on_step: None,
            }),
        )
        .unwrap();
        assert!(dir.path().join("final.ckpt").exists());
        assert!(dir.path().join("iter_00000002.ckpt").exists());
        let metrics = read_metrics(&metrics_path).unwrap();
        assert_eq!(metrics.len(), 3);
        assert_eq!(metrics[2].iteration, 3);
    }

    #[test]
    fn presets_reproduce_published_table() {
        // Optimization table, field for field.
        let mnist = RunConfig::preset(Preset::Mnist).train;
        assert_eq!(mnist.lr_generator, 1e-4);
        assert_eq!((mnist.beta_min, mnist.beta_max), (0.1, 10.0));
        assert_eq!((mnist.weights.w, mnist.weights.w_mid), (1.0, 1.0));
        assert_eq!((mnist.adam_beta1, mnist.adam_beta2), (0.0, 0.9));
        assert_eq!(mnist.ema_decay, None);
        assert_eq!(mnist.batch_size, 128);

        let cifar = RunConfig::preset(Preset::Cifar10Reference);
        assert_eq!(cifar.train.lr_generator, 1e-4);
        assert_eq!((cifar.train.beta_min, cifar.train.beta_max), (0.1, 20.0));
        assert_eq!((cifar.train.weights.w, cifar.train.weights.w_mid), (1.0, 1.0));
        assert_eq!(cifar.train.ema_decay, Some(0.9999));
        assert_eq!(cifar.train.batch_size, 64);
        let arch = cifar.reference.unwrap();
        assert_eq!(arch.resnet_blocks_per_scale, 2);
        assert_eq!(arch.initial_channels, 128);
        assert_eq!(arch.channel_multipliers, vec![1, 2, 2, 2]);
        assert_eq!(arch.attention_scale, 16);
        assert_eq!(arch.latent_mapping_layers, 4);
        assert_eq!(arch.latent_embed_dim, 256);
        assert_eq!((arch.epochs, arch.gpus), (1200, 4));
        assert_eq!(cifar.train.latent_dim, 100);

        let celeba = RunConfig::preset(Preset::CelebaReference);
        assert_eq!(celeba.train.lr_generator, 5e-5);
        assert_eq!(celeba.train.ema_decay, Some(0.999));
        assert_eq!(celeba.train.batch_size, 32);
        let arch = celeba.reference.unwrap();
        assert_eq!(arch.initial_channels, 64);
        assert_eq!(arch.channel_multipliers, vec![1, 1, 2, 2, 4]);
        assert_eq!((arch.epochs, arch.gpus), (400, 4));

        let lsun = RunConfig::preset(Preset::LsunReference);
        assert_eq!(lsun.train.lr_generator, 5e-5);
        assert_eq!((lsun.train.weights.w, lsun.train.weights.w_mid), (0.6, 0.2));
        assert_eq!(lsun.train.ema_decay, Some(0.999));
        assert_eq!(lsun.train.batch_size, 12);
        assert_eq!(lsun.train.time_map, crate::schedule::TimeMap::Truncated);
        let arch = lsun.reference.unwrap();
        assert_eq!(arch.channel_multipliers, vec![1, 2, 2, 4, 4]);

        // Toy preset mirrors the toy training protocol.
        let toy = RunConfig::preset(Preset::Toy).train;
        assert_eq!(toy.lr_generator, 1e-4);
        assert_eq!(toy.batch_size, 200);
        assert_eq!(toy.latent_dim, 2);
        assert_eq!(toy.steps, 4);
    }

    #[test]
    fn config_overrides_apply_per_key() {
        let parsed = parse_run_config(
            r#"
            preset = "toy"
            [train]
            seed = 42
            total_iterations = 777
            [train.weights]
            gamma = 0.2
            "#,
        )
        .unwrap();
        assert_eq!(parsed.train.seed, 42);
        assert_eq!(parsed.train.total_iterations, 777);
        assert_eq!(parsed.train.weights.gamma, 0.2);
        // Untouched keys keep preset values.
        assert_eq!(parsed.train.batch_size, 200);
    }

    #[test]
    fn unknown_config_keys_are_named() {
        let err = parse_run_config("banana = 1").unwrap_err();
        assert!(err.to_string().contains("banana"), "{err}");
        let err = parse_run_config("[train]\nlearning_rate = 0.1").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
        let err = parse_run_config("preset = \"nope\"").unwrap_err();
        assert!(err.to_string().contains("nope"), "{err}");
    }

    #[test]
    fn run_lock_is_exclusive_and_released() {
        let dir = tempfile::tempdir().unwrap();
        let lock = RunLock::acquire(dir.path()).unwrap();
        assert!(RunLock::acquire(dir.path()).is_err());
        drop(lock);
        let again = RunLock::acquire(dir.path()).unwrap();
        drop(again);
    }
}
