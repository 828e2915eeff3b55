//! Denoising Diffusion Adversarial Energy-Based Models.
//!
//! An energy function, a latent-variable generator, and a variational
//! encoder are trained against each other inside a discretized VP-SDE
//! diffusion process. Each denoising step hosts one adversarial game:
//! the generator/encoder pair minimizes a symmetric (Jeffrey) divergence
//! bound against the conditional energy model, then the energy function
//! is pushed up on forward-diffused data and down on generated data.
//! No MCMC anywhere — training and sampling both run on ancestral
//! Gaussian draws.
//!
//! The crate is organized around the training pipeline:
//!
//! - [`schedule`]: discretized VP-SDE constants and forward-process kernels
//! - [`tape`]: a small reverse-mode autodiff tape (supports grad-of-grad,
//!   which the energy gradient penalty needs)
//! - [`nn`]: dense layers, PReLU, batch norm, sinusoidal time embeddings
//! - [`models`]: the three networks and their EMA shadows
//! - [`objectives`]: the minimax losses and Gaussian analytic helpers
//! - [`trainer`]: the alternating update loop with checkpointing
//! - [`sampler`]: ancestral sampling plus one-step energy refinement
//! - [`datasets`]: 2D toy generators and image ingestion
//! - [`evaluation`]: density grids, OOD scoring, mode coverage
//! - [`persistence`]: array files, checkpoints, run configs, metrics logs
//!
//! A 30-second tour on a toy dataset:
//!
//! ```
//! use ddaebm::persistence::{Preset, RunConfig};
//!
//! let mut config = RunConfig::preset(Preset::Toy).train;
//! config.dataset = "gaussians25".into();
//! config.total_iterations = 5; // doc-sized; the toy preset defaults higher
//! config.batch_size = 16;
//! config.seed = 7;
//! let mut state = ddaebm::trainer::TrainState::new(&config).unwrap();
//! let report = ddaebm::trainer::fit(&mut state, None).unwrap();
//! assert_eq!(report.iterations_run, 5);
//! ```

pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod models;
pub mod nn;
pub mod objectives;
pub mod persistence;
pub mod plot;
pub mod sampler;
pub mod schedule;
pub mod tape;
pub mod trainer;

pub use error::{Error, Result};
