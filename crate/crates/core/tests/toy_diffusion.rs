//! Denoiser training on hand-made latent sets: loss against the
//! Bayes-optimal predictor, and mode recovery when sampling.

mod common;

use std::path::PathBuf;

use common::*;
use dsdf_core::data::LatentEntry;
use dsdf_core::diffusion::sample;
use dsdf_core::modulation::gaussian;
use dsdf_core::pipeline::{load_denoiser, sample_streams, train_diffusion};
use dsdf_core::{
    Conditioning, DenoiserConfig, Guidance, LatentManifest, LatentSet, Split, TrainConfig,
};
use dsdf_geometry::Category;
use dsdf_tensor::{Tape, Tensor};
use rand::Rng;

fn toy_config(dim: usize, steps: u64) -> TrainConfig {
    let mut c = TrainConfig {
        steps,
        batch_size: 64,
        learning_rate: 3e-3,
        log_every: 100,
        checkpoint_every: 0,
        denoiser: DenoiserConfig {
            model_dim: 32,
            blocks: 2,
            heads: 2,
            ff_mult: 2,
            time_dim: 16,
            conditioning: Conditioning::None,
        },
        ..TrainConfig::default()
    };
    c.modulation.latent_dim = dim;
    c
}

fn toy_set(protos: &[Vec<f64>]) -> (LatentSet, LatentManifest) {
    let dim = protos[0].len();
    let latents = LatentSet::new(dim, protos.iter().flatten().copied().collect()).unwrap();
    let entries = (0..protos.len())
        .map(|i| LatentEntry {
            index: i,
            id: format!("{i}"),
            split: Split::Train,
            category: Category::ALL[0],
            cloud: PathBuf::from("unused.xyz"),
        })
        .collect();
    let manifest = LatentManifest {
        latents: PathBuf::from("latents.dsdf"),
        dim,
        entries,
    };
    (latents, manifest)
}

/// Posterior mean `E[z0 | z_t]` for a uniform prior over `protos`.
fn bayes_prediction(protos: &[Vec<f64>], zt: &[f64], alpha_bar: f64) -> Vec<f64> {
    let logs: Vec<f64> = protos
        .iter()
        .map(|p| {
            let d2: f64 = p.iter().zip(zt).map(|(a, z)| (z - alpha_bar.sqrt() * a).powi(2)).sum();
            -d2 / (2.0 * (1.0 - alpha_bar))
        })
        .collect();
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    let total: f64 = w.iter().sum();
    (0..zt.len())
        .map(|d| protos.iter().zip(&w).map(|(p, wi)| p[d] * wi).sum::<f64>() / total)
        .collect()
}

#[test]
fn two_latent_loss_approaches_bayes_optimum() {
    let protos = vec![vec![0.1, 0.1, -0.1, 0.1], vec![-0.1, -0.1, 0.1, -0.1]];
    let (latents, manifest) = toy_set(&protos);
    let dir = tempfile::tempdir().unwrap();
    let out = train_diffusion(&toy_config(4, 3000), &latents, &manifest, None, dir.path(), None).unwrap();
    let (den, schedule) = load_denoiser(&out.checkpoint).unwrap();
    assert!((den.latent_scale - 10.0).abs() < 1e-9);
    // 100-step moving averages fall from the start to step 2000.
    let avg = |k: usize| out.step_losses[k..k + 100].iter().sum::<f64>() / 100.0;
    assert!(avg(1900) < avg(0), "{} → {}", avg(0), avg(1900));

    // Fixed evaluation draws, scored in the denoiser's scaled space.
    let scaled: Vec<Vec<f64>> = protos.iter().map(|p| p.iter().map(|v| v * den.latent_scale).collect()).collect();
    let n = 4000;
    let mut r = rng(20);
    let ks: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let ts: Vec<usize> = (0..n).map(|_| r.random_range(1..=schedule.steps())).collect();
    let eps = gaussian(vec![n, 4], &mut r);
    let z0 = Tensor::new(vec![n, 4], ks.iter().flat_map(|&k| scaled[k].clone()).collect()).unwrap();
    let tape = Tape::inference();
    let z0v = tape.constant(z0.clone());
    let zt = schedule.q_sample_var(&tape, &z0v, &ts, &eps).unwrap();
    let model_loss = den.loss(&tape, &z0v, &zt, &ts, None).unwrap().0.item().unwrap();
    let mut bayes_loss = 0.0;
    for i in 0..n {
        let pred = bayes_prediction(&scaled, &zt.value().data()[i * 4..i * 4 + 4], schedule.alpha_bar(ts[i]));
        bayes_loss += pred.iter().zip(&scaled[ks[i]]).map(|(p, z)| (p - z).powi(2)).sum::<f64>() / 4.0;
    }
    bayes_loss /= n as f64;
    let raw = model_loss / den.latent_scale.powi(2);
    assert!(model_loss <= 1.1 * bayes_loss, "model {model_loss} vs Bayes {bayes_loss}");
    assert!(raw < 0.01, "loss in latent units {raw}");
}

#[test]
fn four_latent_sampling_recovers_the_modes() {
    let protos = vec![
        vec![0.5, 0.5, 0.0, 0.0],
        vec![-0.5, 0.5, 0.0, 0.0],
        vec![0.0, 0.0, 0.5, -0.5],
        vec![0.0, 0.0, -0.5, -0.5],
    ];
    let (latents, manifest) = toy_set(&protos);
    let dir = tempfile::tempdir().unwrap();
    let out = train_diffusion(&toy_config(4, 5000), &latents, &manifest, None, dir.path(), None).unwrap();
    let (den, schedule) = load_denoiser(&out.checkpoint).unwrap();
    let mut rngs = sample_streams(1, 50);
    let z = sample(&den, &schedule, None, Guidance::default(), &mut rngs).unwrap();
    let mut hits = [0usize; 4];
    for row in z.data().chunks(4) {
        let (k, best) = protos
            .iter()
            .map(|p| p.iter().zip(row).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt())
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        assert!(best < 0.1, "sample {row:?} is {best} from the nearest training latent");
        hits[k] += 1;
    }
    assert!(hits.iter().all(|&h| h > 0), "modes hit {hits:?}");
}

#[test]
fn latent_scale_round_trips_through_the_checkpoint() {
    let (latents, manifest) = toy_set(&[vec![0.3, 0.0], vec![0.0, -0.4]]);
    let dir = tempfile::tempdir().unwrap();
    let out = train_diffusion(&toy_config(2, 2), &latents, &manifest, None, dir.path(), None).unwrap();
    let (den, _) = load_denoiser(&out.checkpoint).unwrap();
    // RMS of {0.3, 0, 0, −0.4} is 0.25.
    assert!((den.latent_scale - 4.0).abs() < 1e-12);
}
