#![allow(dead_code)]

use dsdf_core::modulation::{gaussian, ModulationBatch};
use dsdf_core::{Conditioning, DenoiserConfig, ModulationConfig, ScheduleConfig, TrainConfig};
use dsdf_tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn tiny_modulation() -> ModulationConfig {
    ModulationConfig {
        feature_dim: 6,
        latent_dim: 4,
        point_hidden: 8,
        vae_hidden: 8,
        sdf_hidden: 8,
        sdf_layers: 2,
        prior_std: 0.25,
    }
}

pub fn tiny_denoiser(conditioning: Conditioning) -> DenoiserConfig {
    DenoiserConfig {
        model_dim: 8,
        blocks: 2,
        heads: 2,
        ff_mult: 2,
        time_dim: 4,
        conditioning,
    }
}

pub fn tiny_train_config() -> TrainConfig {
    TrainConfig {
        steps: 6,
        batch_size: 2,
        queries_per_shape: 16,
        encoder_points: 32,
        learning_rate: 1e-3,
        log_every: 2,
        checkpoint_every: 3,
        modulation: tiny_modulation(),
        denoiser: tiny_denoiser(Conditioning::None),
        schedule: ScheduleConfig {
            steps: 20,
            beta_start: 1e-3,
            beta_end: 0.2,
        },
        ..TrainConfig::default()
    }
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Random batch of `s` shapes with `n` encoder points and `q` queries.
pub fn random_batch(s: usize, n: usize, q: usize, d: usize, rng: &mut ChaCha8Rng) -> ModulationBatch {
    ModulationBatch {
        points: uniform(&[s, n, 3], -1.0, 1.0, rng),
        queries: uniform(&[s, q, 3], -1.0, 1.0, rng),
        sdf: uniform(&[s, q], -0.5, 0.5, rng),
        eps: Some(gaussian(vec![s, d], rng)),
    }
}
