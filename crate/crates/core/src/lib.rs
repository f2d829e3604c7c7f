//! Latent diffusion over neural signed distance functions.
//!
//! A point-cloud encoder and VAE compress each shape into a latent vector
//! that modulates a shared SDF network; a transformer denoiser learns the
//! latent distribution, optionally conditioned on a partial point cloud.
//! The [`pipeline`] module strings the phases together on disk.

pub mod config;
pub mod data;
pub mod diffusion;
mod error;
pub mod format;
pub mod metrics;
pub mod modulation;
pub mod pipeline;
pub mod rng;

pub use data::{generate_dataset, Dataset, LatentManifest, Manifest, Split};
pub use config::{Conditioning, DenoiserConfig, ModulationConfig, ScheduleConfig, TrainConfig};
pub use diffusion::{condition_dropout, sample, Denoiser, Guidance, Schedule};
pub use error::{CoreError, Result};
pub use format::{Checkpoint, LatentSet};
pub use metrics::EvalReport;
pub use modulation::{ModulationBatch, ModulationLoss, ModulationModel, PointEncoder, SdfDecoder};
pub use pipeline::{Generation, GenerateOptions, Models, PhaseOutcome};
pub use rng::{substream, Stream};
