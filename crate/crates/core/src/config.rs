//! Architecture and training hyperparameters, serialized as JSON.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModulationConfig {
    /// Width F of the shape features π and π′.
    pub feature_dim: usize,
    /// Width D of the latent vector z.
    pub latent_dim: usize,
    /// Hidden width of the per-point encoder MLP.
    pub point_hidden: usize,
    /// Hidden width of the five-layer VAE encoder and decoder.
    pub vae_hidden: usize,
    /// Hidden width of the SDF decoder.
    pub sdf_hidden: usize,
    /// Number of hidden layers in the SDF decoder.
    pub sdf_layers: usize,
    /// Standard deviation of the Gaussian latent prior.
    pub prior_std: f64,
}

impl Default for ModulationConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            latent_dim: 64,
            point_hidden: 128,
            vae_hidden: 256,
            sdf_hidden: 128,
            sdf_layers: 8,
            prior_std: 0.25,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    /// No condition input.
    None,
    /// Each block cross-attends to a single condition token.
    CrossAttention,
    /// The condition is appended as an extra token to self-attention.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenoiserConfig {
    pub model_dim: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward hidden width as a multiple of `model_dim`.
    pub ff_mult: usize,
    /// Width of the sinusoidal timestep embedding.
    pub time_dim: usize,
    pub conditioning: Conditioning,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            model_dim: 128,
            blocks: 6,
            heads: 1,
            ff_mult: 2,
            time_dim: 64,
            conditioning: Conditioning::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Everything a training phase needs besides file paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    /// Shapes per step for modulation and fine-tuning; latents per step for diffusion.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub queries_per_shape: usize,
    /// Surface points fed to the point encoder per shape.
    pub encoder_points: usize,
    pub near_fraction: f64,
    pub noise_std: f64,
    /// Weight β of the KL term.
    pub kl_weight: f64,
    /// Probability of replacing the condition with the zero-mask.
    pub condition_dropout: f64,
    /// Guidance weight ω used when sampling.
    pub omega: f64,
    pub log_every: u64,
    pub checkpoint_every: u64,
    /// Fine-tuning: keep the SDF decoder fixed.
    pub freeze_sdf: bool,
    /// Fine-tuning: keep the denoiser fixed.
    pub freeze_denoiser: bool,
    pub modulation: ModulationConfig,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            steps: 2000,
            batch_size: 8,
            learning_rate: 1e-4,
            queries_per_shape: 1024,
            encoder_points: 512,
            near_fraction: 0.7,
            noise_std: 0.05,
            kl_weight: 1e-5,
            condition_dropout: 0.8,
            omega: 0.0,
            log_every: 50,
            checkpoint_every: 500,
            freeze_sdf: false,
            freeze_denoiser: false,
            modulation: ModulationConfig::default(),
            denoiser: DenoiserConfig::default(),
            schedule: ScheduleConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(CoreError::Config(msg));
        if self.batch_size == 0 || self.queries_per_shape == 0 || self.encoder_points == 0 {
            return bad("batch size, queries and encoder points must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.learning_rate));
        }
        for (name, p) in [
            ("near_fraction", self.near_fraction),
            ("condition_dropout", self.condition_dropout),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(format!("{name} {p} outside [0, 1]"));
            }
        }
        if self.noise_std < 0.0 || self.kl_weight < 0.0 || self.omega < 0.0 {
            return bad("noise_std, kl_weight and omega must be non-negative".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be positive".into());
        }
        let m = &self.modulation;
        if m.feature_dim == 0 || m.latent_dim == 0 || m.sdf_layers == 0 || m.prior_std <= 0.0 {
            return bad("modulation dimensions and prior std must be positive".into());
        }
        let d = &self.denoiser;
        if d.model_dim < 2 || d.blocks == 0 || d.heads == 0 || !d.model_dim.is_multiple_of(d.heads) {
            return bad(format!(
                "denoiser width {} must be ≥ 2 and divisible by {} heads",
                d.model_dim, d.heads
            ));
        }
        if d.time_dim == 0 || !d.time_dim.is_multiple_of(2) {
            return bad(format!("time embedding width {} must be positive and even", d.time_dim));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs always serialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: TrainConfig = serde_json::from_str(text)?;
        c.validate()?;
        Ok(c)
    }
}
