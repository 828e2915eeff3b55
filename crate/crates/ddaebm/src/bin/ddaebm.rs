//! Command-line shell: train, sample, eval.

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use ddaebm::datasets::{gaussians25_modes, toy_sample, DatasetName};
use ddaebm::error::{Error, Result};
use ddaebm::evaluation::{
    density_grid, energy_histogram, mode_coverage, ood_auroc, AurocEntry, Bounds, DensityReport,
    EvalReport, ModeReport,
};
use ddaebm::objectives::sample_standard_normal;
use ddaebm::persistence::{
    load_checkpoint, load_run_config, save_checkpoint, write_matrix, Preset, RunConfig, RunLock,
};
use ddaebm::plot::{heatmap_png, histogram_png, image_grid_png, scatter_png};
use ddaebm::sampler::{ancestral_sample, SampleRequest};
use ddaebm::trainer::{fit, FitSinks, TrainState};

#[derive(Parser)]
#[command(name = "ddaebm", version, about = "Denoising diffusion adversarial energy-based models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a preset or a TOML config.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Evaluate a checkpoint: density grids, OOD scores, mode coverage,
    /// histograms.
    Eval(EvalArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML run config; `preset` plus per-key `[train]` overrides.
    #[arg(long, conflicts_with = "preset")]
    config: Option<PathBuf>,
    /// Built-in preset: toy, mnist, cifar10-reference, celeba-reference,
    /// lsun-reference.
    #[arg(long)]
    preset: Option<String>,
    /// Dataset name override (gaussians25, pinwheel, swissroll, mnist,
    /// image_folder).
    #[arg(long)]
    dataset: Option<String>,
    /// Image file or folder for mnist / image_folder datasets.
    #[arg(long)]
    data_path: Option<PathBuf>,
    /// Total training iterations.
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Number of diffusion steps T.
    #[arg(long = "t")]
    steps: Option<usize>,
    /// Gradient penalty coefficient.
    #[arg(long)]
    gamma: Option<f64>,
    /// Objective ablation: no_latent, kl_only, or kl_only_no_qpsi
    /// (comma-separable).
    #[arg(long)]
    ablation: Option<String>,
    /// Run directory for checkpoints and the metrics log.
    #[arg(long, default_value = "runs/run")]
    out: PathBuf,
    /// Console progress interval in iterations.
    #[arg(long, default_value_t = 500)]
    log_every: u64,
    /// Periodic checkpoint interval; 0 keeps only the final checkpoint.
    #[arg(long, default_value_t = 0)]
    checkpoint_every: u64,
    /// Resume from an existing checkpoint instead of initializing.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Apply the one-step energy refinement to the final samples.
    #[arg(long)]
    refine: bool,
    /// Refinement step size; defaults to the first-step noise scale.
    #[arg(long)]
    refine_step: Option<f64>,
    /// Sample through the live weights instead of the EMA shadow.
    #[arg(long)]
    no_ema: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output prefix; writes `<out>.arr` and `<out>.png`.
    #[arg(long, default_value = "samples")]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Tasks to run: density, ood, modes, histograms (comma-separable,
    /// repeatable).
    #[arg(long, required = true)]
    task: Vec<String>,
    /// Square window for the density grid.
    #[arg(long, num_args = 2, value_names = ["LO", "HI"], allow_hyphen_values = true)]
    bounds: Option<Vec<f64>>,
    /// Density grid resolution.
    #[arg(long, default_value_t = 200)]
    res: usize,
    /// Noise standard deviations for the OOD protocol.
    #[arg(long, num_args = 1.., default_values_t = vec![0.01, 0.1, 0.5])]
    noise_stds: Vec<f64>,
    /// Held-out / generated sample count per score set.
    #[arg(long, default_value_t = 10_000)]
    n: usize,
    /// Histogram bin count.
    #[arg(long, default_value_t = 60)]
    bins: usize,
    /// Mode-coverage radius; defaults to 3 component standard deviations.
    #[arg(long)]
    radius: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "eval_out")]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Train(args) => run_train(args),
        Command::Sample(args) => run_sample(args),
        Command::Eval(args) => run_eval(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var("DDAEBM_SEED") {
        Ok(v) => v
            .parse::<u64>()
            .map(Some)
            .map_err(|_| Error::Config(format!("DDAEBM_SEED must be an integer, got {v}"))),
        Err(_) => Ok(None),
    }
}

fn parse_ablation(spec: &str) -> Result<ddaebm::objectives::AblationFlags> {
    let mut flags = ddaebm::objectives::AblationFlags::default();
    for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        match part {
            "no_latent" => flags.no_latent = true,
            "kl_only" => flags.kl_only = true,
            "kl_only_no_qpsi" | "drop_qpsi" => {
                flags.kl_only = true;
                flags.drop_qpsi = true;
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown ablation {other}; expected no_latent, kl_only, or kl_only_no_qpsi"
                )))
            }
        }
    }
    flags.validate()?;
    Ok(flags)
}

fn run_train(args: TrainArgs) -> Result<()> {
    let mut run: RunConfig = match (&args.config, &args.preset) {
        (Some(path), _) => load_run_config(path)?,
        (None, Some(name)) => RunConfig::preset(Preset::parse(name)?),
        (None, None) => RunConfig::preset(Preset::Toy),
    };
    if run.preset.is_reference() {
        eprintln!(
            "warning: preset {} documents a full-scale run; training it at desk scale \
             is not expected to reproduce published results",
            run.preset.name()
        );
    }
    if let Some(dataset) = args.dataset {
        run.train.dataset = dataset;
    }
    if let Some(path) = args.data_path {
        run.train.data_path = Some(path);
    }
    if let Some(iters) = args.iters {
        run.train.total_iterations = iters;
    }
    if let Some(seed) = args.seed {
        run.train.seed = seed;
    }
    if let Some(batch) = args.batch {
        run.train.batch_size = batch;
    }
    if let Some(steps) = args.steps {
        run.train.steps = steps;
    }
    if let Some(gamma) = args.gamma {
        run.train.weights.gamma = gamma;
    }
    if let Some(spec) = args.ablation.as_deref() {
        run.train.ablation = parse_ablation(spec)?;
    }
    if let Some(seed) = env_seed()? {
        run.train.seed = seed;
    }
    run.train.validate()?;

    fs::create_dir_all(&args.out)?;
    let _lock = RunLock::acquire(&args.out)?;

    let (mut state, metrics_file) = match &args.resume {
        Some(ckpt) => {
            let state = load_checkpoint(ckpt)?;
            let file = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(args.out.join("metrics.jsonl"))?;
            println!("resumed from {} at iteration {}", ckpt.display(), state.iteration);
            (state, file)
        }
        None => {
            let state = TrainState::new(&run.train)?;
            let file = fs::File::create(args.out.join("metrics.jsonl"))?;
            (state, file)
        }
    };
    println!(
        "training {} on {} for {} iterations (T = {}, seed = {})",
        run.preset.name(),
        state.config.dataset,
        state.config.total_iterations,
        state.config.steps,
        state.config.seed
    );

    let mut metrics_file = metrics_file;
    let log_every = args.log_every.max(1);
    let mut on_step = |m: &ddaebm::trainer::StepMetrics| {
        if m.iteration % log_every == 0 || m.iteration == 1 {
            println!(
                "iter {:>8}  loss_gen {:>10.4}  loss_energy {:>10.4}  gap {:>9.4}  gp {:>8.4}  t {:>7.1}s",
                m.iteration, m.loss_gen, m.loss_energy, m.energy_gap, m.grad_penalty, m.wallclock
            );
        }
    };
    let report = fit(
        &mut state,
        Some(FitSinks {
            metrics: Some(&mut metrics_file),
            checkpoint_dir: Some(&args.out),
            checkpoint_every: args.checkpoint_every,
            on_step: Some(&mut on_step),
        }),
    )?;
    save_checkpoint(&state, &args.out.join("final.ckpt"))?;
    println!(
        "done: {} iterations, checkpoint at {}",
        report.iterations_run,
        args.out.join("final.ckpt").display()
    );
    Ok(())
}

fn run_sample(args: SampleArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let mut seed = args.seed;
    if let Some(env) = env_seed()? {
        seed = env;
    }
    let request = SampleRequest {
        n: args.n,
        use_ema: !args.no_ema,
        refine: args.refine,
        refine_step_size: args.refine_step,
        seed,
    };
    let (samples, stats) =
        ancestral_sample(&state.triple, &state.schedule, &state.config.ablation, &request)?;

    let arr_path = args.out.with_extension("arr");
    let png_path = args.out.with_extension("png");
    if let Some(parent) = arr_path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    write_matrix(&arr_path, &samples)?;
    if state.data_dim() == 2 {
        scatter_png(&png_path, &samples, Bounds::new(-6.0, 6.0)?, 600)?;
    } else if let Some(shape) = state.example_image_shape() {
        let shown = samples.nrows().min(64);
        let head = samples.slice(ndarray::s![..shown, ..]).to_owned();
        image_grid_png(&png_path, &head, shape, 2)?;
    }
    println!(
        "wrote {} samples to {} (NFE {} per sample, {} noise tensors, {} latent draws{})",
        samples.nrows(),
        arr_path.display(),
        stats.generator_evals,
        stats.noise_tensors,
        stats.latent_draws,
        if stats.energy_grad_evals > 0 { ", refined" } else { "" }
    );
    Ok(())
}

fn parse_tasks(specs: &[String]) -> Result<Vec<String>> {
    let mut tasks = Vec::new();
    for spec in specs {
        for part in spec.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            match part {
                "density" | "ood" | "modes" | "histograms" => tasks.push(part.to_string()),
                other => {
                    return Err(Error::Config(format!(
                        "unknown eval task {other}; expected density, ood, modes, histograms"
                    )))
                }
            }
        }
    }
    if tasks.is_empty() {
        return Err(Error::Config("no eval tasks given".into()));
    }
    Ok(tasks)
}

/// Held-out in-distribution data for scoring; toy datasets redraw from the
/// generator with an offset seed so evaluation never reuses training draws.
fn held_out(state: &TrainState, n: usize, seed: u64) -> Result<Array2<f64>> {
    let name = DatasetName::parse(&state.config.dataset)?;
    if name.is_toy() {
        toy_sample(name, &state.config.toy, n, seed ^ 0x5EED_0FF5)
    } else {
        Err(Error::invalid(
            "held-out scoring currently supports toy datasets; image-scale OOD is out of scope",
        ))
    }
}

fn run_eval(args: EvalArgs) -> Result<()> {
    let state = load_checkpoint(&args.checkpoint)?;
    let tasks = parse_tasks(&args.task)?;
    let mut seed = args.seed;
    if let Some(env) = env_seed()? {
        seed = env;
    }
    fs::create_dir_all(&args.out)?;
    let mut report = EvalReport::default();

    let bounds = match args.bounds.as_deref() {
        Some([lo, hi]) => Bounds::new(*lo, *hi)?,
        Some(_) => return Err(Error::Config("--bounds takes exactly two numbers".into())),
        None => Bounds::new(-6.0, 6.0)?,
    };

    for task in &tasks {
        match task.as_str() {
            "density" => {
                let grid = density_grid(&state.triple.energy, bounds, args.res)?;
                let grid_file = args.out.join("density_grid.arr");
                write_matrix(&grid_file, &grid)?;
                heatmap_png(&args.out.join("density_grid.png"), &grid, 3)?;
                report.density = Some(DensityReport {
                    bounds,
                    resolution: args.res,
                    grid_file: grid_file.display().to_string(),
                });
            }
            "ood" => {
                let real = held_out(&state, args.n, seed)?;
                let ts = vec![0usize; real.nrows()];
                let real_scores = state.triple.energy.energy_batch(&real, &ts)?;
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xBAD5EED);
                for &std in &args.noise_stds {
                    let noise = sample_standard_normal(&mut rng, real.dim());
                    let noisy = &real + &(noise * std);
                    let noisy_scores = state.triple.energy.energy_batch(&noisy, &ts)?;
                    let auroc = ood_auroc(
                        real_scores.as_slice().unwrap(),
                        noisy_scores.as_slice().unwrap(),
                    )?;
                    report.auroc.push(AurocEntry {
                        in_set: state.config.dataset.clone(),
                        out_set: format!("noise_{std}"),
                        auroc,
                        mean_in: real_scores.mean().unwrap_or(f64::NAN),
                        mean_out: noisy_scores.mean().unwrap_or(f64::NAN),
                    });
                }
            }
            "modes" => {
                if DatasetName::parse(&state.config.dataset)? != DatasetName::Gaussians25 {
                    return Err(Error::invalid(
                        "mode coverage is defined against the 25-Gaussians grid; \
                         train with dataset gaussians25",
                    ));
                }
                let request = SampleRequest { n: args.n, seed, ..Default::default() };
                let (samples, _) = ancestral_sample(
                    &state.triple,
                    &state.schedule,
                    &state.config.ablation,
                    &request,
                )?;
                let radius = args.radius.unwrap_or(3.0 * state.config.toy.gaussians25_std);
                let cov = mode_coverage(&samples, &gaussians25_modes(), radius)?;
                if cov.assigned == 0 {
                    eprintln!("warning: no sample landed within {radius} of any mode");
                }
                write_matrix(&args.out.join("mode_samples.arr"), &samples)?;
                scatter_png(&args.out.join("mode_samples.png"), &samples, bounds, 600)?;
                report.modes = Some(ModeReport {
                    count: cov.count,
                    kl: cov.kl,
                    assigned: cov.assigned,
                    total_samples: args.n,
                    radius,
                });
            }
            "histograms" => {
                let real = held_out(&state, args.n, seed)?;
                let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xFA4E);
                // Generated protocol: diffuse one step, then denoise through
                // the generator (the t = 1 posterior is a Dirac at the
                // prediction).
                let noise = sample_standard_normal(&mut rng, real.dim());
                let x1 = state.schedule.forward_sample(&real, 1, &noise)?;
                let z =
                    sample_standard_normal(&mut rng, (real.nrows(), state.triple.latent_dim()));
                let fake =
                    state.triple.ema_generator.generate_batch(&x1, &z, &vec![1; real.nrows()])?;
                let mut sets =
                    vec![("real".to_string(), real.clone()), ("fake".to_string(), fake)];
                for &std in &args.noise_stds {
                    let noise = sample_standard_normal(&mut rng, real.dim());
                    sets.push((format!("noise_{std}"), &real + &(noise * std)));
                }
                let hist = energy_histogram(&state.triple.energy, &sets, args.bins)?;
                histogram_png(&args.out.join("energy_histograms.png"), &hist, 800, 400)?;
                report.histograms = Some(hist);
            }
            _ => unreachable!("tasks validated"),
        }
    }

    let report_path = args.out.join("report.json");
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| Error::Persistence(format!("report serialize: {e}")))?;
    fs::write(&report_path, json)?;
    println!("wrote {}", report_path.display());
    if let Some(modes) = &report.modes {
        println!("modes covered: {}/25, categorical KL {:.4}", modes.count, modes.kl);
    }
    for entry in &report.auroc {
        println!(
            "auroc {} vs {}: {:.4} (mean E {:.3} vs {:.3})",
            entry.in_set, entry.out_set, entry.auroc, entry.mean_in, entry.mean_out
        );
    }
    Ok(())
}
