//! Training phases, latent extraction and generation, with checkpoints in a
//! directory holding `modulation.dsdf` and `diffusion.dsdf`.
//!
//! Every random draw of training step `s` comes from the stream
//! `(seed, phase, s)`, and optimizer moments are checkpointed, so a resumed
//! run continues exactly where the original would have.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dsdf_geometry::{crop_partial, Mesh, PointCloud, CROP_INPUT};
use dsdf_nn::{Adam, AdamConfig, NnError};
use dsdf_tensor::{Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::{Conditioning, TrainConfig};
use crate::data::{create_dir, read_json, write_json, Dataset, LatentEntry, LatentManifest, ShapeRecord, Split};
use crate::diffusion::{sample, unit_rms_scale, Denoiser, Guidance, Schedule};
use crate::error::{CoreError, Result};
use crate::format::{Checkpoint, LatentSet};
use crate::metrics::cons_from_values;
use crate::modulation::{gaussian, stack_clouds, ModulationBatch, ModulationModel};
use crate::rng::{substream, Stream};

pub const MODULATION_FILE: &str = "modulation.dsdf";
pub const DIFFUSION_FILE: &str = "diffusion.dsdf";
pub const LATENT_FILE: &str = "latents.dsdf";
pub const LATENT_MANIFEST_FILE: &str = "latents.json";
const ADAM_PREFIX: &str = "adam.";
const EXTRACT_CHUNK: usize = 16;

/// Loss values recorded every `log_every` steps, written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LossLog {
    pub columns: Vec<String>,
    pub rows: Vec<(u64, Vec<f64>)>,
}

impl LossLog {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("step,{}\n", self.columns.join(","));
        for (step, values) in &self.rows {
            let cells: Vec<String> = values.iter().map(|v| v.to_string()).collect();
            out.push_str(&format!("{step},{}\n", cells.join(",")));
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |detail: String| CoreError::Format { what: "loss log", detail };
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty file".into()))?;
        let mut columns: Vec<String> = header.split(',').map(str::to_string).collect();
        if columns.first().map(String::as_str) != Some("step") {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        columns.remove(0);
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let mut cells = line.split(',');
            let step = cells
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad(format!("line {}: bad step", n + 2)))?;
            let values = cells
                .map(|c| c.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| bad(format!("line {}: {e}", n + 2)))?;
            if values.len() != columns.len() {
                return Err(bad(format!("line {}: {} values for {} columns", n + 2, values.len(), columns.len())));
            }
            rows.push((step, values));
        }
        Ok(Self { columns, rows })
    }

    fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| CoreError::io(path, e))
    }

    /// The log at `path` truncated to rows up to `step`, or an empty log.
    fn resume(path: &Path, columns: &[&str], step: u64) -> Result<Self> {
        if !path.exists() {
            return Ok(Self::new(columns));
        }
        let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
        let mut log = Self::from_csv(&text)?;
        log.rows.retain(|(s, _)| *s <= step);
        Ok(log)
    }
}

/// Result of one training phase.
#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub checkpoint: Checkpoint,
    pub log: LossLog,
    /// Total loss of every step run in this call.
    pub step_losses: Vec<f64>,
}

fn is_non_finite(e: &CoreError) -> bool {
    matches!(
        e,
        CoreError::Tensor(TensorError::NonFinite { .. })
            | CoreError::Nn(NnError::Tensor(TensorError::NonFinite { .. }))
            | CoreError::Nn(NnError::NonFiniteGradient { .. })
    )
}

fn adam_config(config: &TrainConfig) -> AdamConfig {
    AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    }
}

fn config_of(ckpt: &Checkpoint) -> Result<TrainConfig> {
    TrainConfig::from_json(&ckpt.config)
}

fn expect_phase(ckpt: &Checkpoint, phases: &[&str]) -> Result<()> {
    if !phases.contains(&ckpt.phase.as_str()) {
        return Err(CoreError::Config(format!(
            "checkpoint phase `{}` is not one of {phases:?}",
            ckpt.phase
        )));
    }
    Ok(())
}

/// Rebuilds the modulation model stored in a checkpoint.
pub fn load_modulation(ckpt: &Checkpoint) -> Result<ModulationModel> {
    expect_phase(ckpt, &["modulation", "finetune"])?;
    let config = config_of(ckpt)?;
    let mut model = ModulationModel::new(config.modulation, config.seed)?;
    model.load_parameters(&ckpt.tensors)?;
    Ok(model)
}

/// Rebuilds the denoiser and its schedule stored in a checkpoint.
pub fn load_denoiser(ckpt: &Checkpoint) -> Result<(Denoiser, Schedule)> {
    expect_phase(ckpt, &["diffusion", "finetune"])?;
    let config = config_of(ckpt)?;
    let mut denoiser = Denoiser::new(
        config.denoiser.clone(),
        config.modulation.latent_dim,
        config.modulation.feature_dim,
        config.modulation.point_hidden,
        config.seed,
    )?;
    denoiser.load_parameters(&ckpt.tensors)?;
    Ok((denoiser, Schedule::new(&config.schedule)?))
}

/// Both trained models from a checkpoint directory.
#[derive(Debug, Clone)]
pub struct Models {
    pub modulation: ModulationModel,
    pub denoiser: Denoiser,
    pub schedule: Schedule,
}

impl Models {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let modulation = load_modulation(&Checkpoint::load(dir.join(MODULATION_FILE))?)?;
        let (denoiser, schedule) = load_denoiser(&Checkpoint::load(dir.join(DIFFUSION_FILE))?)?;
        if denoiser.latent_dim != modulation.latent_dim() || denoiser.feature_dim != modulation.feature_dim() {
            return Err(CoreError::Config("modulation and diffusion checkpoints disagree on dimensions".into()));
        }
        Ok(Self {
            modulation,
            denoiser,
            schedule,
        })
    }
}

fn state_checkpoint(phase: &str, step: u64, config: &TrainConfig, params: BTreeMap<String, Tensor>, adam: BTreeMap<String, Tensor>) -> Checkpoint {
    let mut tensors = params;
    tensors.extend(adam);
    Checkpoint {
        phase: phase.to_string(),
        step,
        config: config.to_json(),
        tensors,
    }
}

/// Draws one modulation batch: shape indices, encoder subsets and queries.
pub fn modulation_batch<R: Rng>(
    shapes: &[&ShapeRecord],
    config: &TrainConfig,
    rng: &mut R,
) -> Result<(ModulationBatch, Vec<usize>)> {
    if shapes.is_empty() {
        return Err(CoreError::Config("no training shapes".into()));
    }
    let b = config.batch_size;
    let chosen: Vec<usize> = (0..b).map(|_| rng.random_range(0..shapes.len())).collect();
    let mut clouds = Vec::with_capacity(b);
    let (mut queries, mut sdf) = (Vec::new(), Vec::new());
    for &i in &chosen {
        clouds.push(shapes[i].cloud.subsample(config.encoder_points, rng));
        let s = dsdf_geometry::sample_queries(
            &shapes[i].spec,
            config.queries_per_shape,
            config.near_fraction,
            config.noise_std,
            rng,
        )?;
        queries.extend(s.points.iter().flatten());
        sdf.extend(s.distances);
    }
    let refs: Vec<&PointCloud> = clouds.iter().collect();
    let q = config.queries_per_shape;
    let batch = ModulationBatch {
        points: stack_clouds(&refs)?,
        queries: Tensor::new(vec![b, q, 3], queries)?,
        sdf: Tensor::new(vec![b, q], sdf)?,
        eps: Some(gaussian(vec![b, config.modulation.latent_dim], rng)),
    };
    Ok((batch, chosen))
}

/// Trains Ψ, Θ and Φ on the training split. On a non-finite loss the state
/// before the failing step is saved and [`CoreError::NonFiniteLoss`] returned.
pub fn train_modulation(
    config: &TrainConfig,
    data: &Dataset,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<PhaseOutcome> {
    config.validate()?;
    create_dir(out_dir)?;
    let shapes = data.split(Split::Train);
    let ckpt_path = out_dir.join(MODULATION_FILE);
    let log_path = out_dir.join("modulation_loss.csv");
    let columns = ["l1", "kl", "total"];
    let mut model = ModulationModel::new(config.modulation.clone(), config.seed)?;
    let (mut adam, start, mut log) = match resume {
        Some(ck) => {
            expect_phase(ck, &["modulation"])?;
            model.load_parameters(&ck.tensors)?;
            let adam = Adam::import(adam_config(config), ck.step, &model.store, ADAM_PREFIX, &ck.tensors)?;
            (adam, ck.step, LossLog::resume(&log_path, &columns, ck.step)?)
        }
        None => (Adam::new(adam_config(config)), 0, LossLog::new(&columns)),
    };
    let snapshot = |model: &ModulationModel, adam: &Adam, step: u64| {
        state_checkpoint("modulation", step, config, model.parameters(), adam.export(&model.store, ADAM_PREFIX))
    };
    let mut step_losses = Vec::new();
    for step in start..config.steps {
        let mut rng = substream(config.seed, Stream::ModulationStep, step);
        let (batch, _) = modulation_batch(&shapes, config, &mut rng)?;
        let attempt = (|| -> Result<[f64; 3]> {
            let tape = Tape::new();
            let loss = model.loss(&tape, &batch, config.kl_weight)?;
            let values = [loss.l1.item()?, loss.kl.item()?, loss.total.item()?];
            if !values[2].is_finite() {
                return Err(CoreError::Tensor(TensorError::NonFinite { op: "loss", index: 0 }));
            }
            let grads = tape.backward(&loss.total)?;
            adam.step(&mut model.store, &grads)?;
            Ok(values)
        })();
        let values = match attempt {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => {
                snapshot(&model, &adam, step).save(&ckpt_path)?;
                log.save(&log_path)?;
                return Err(CoreError::NonFiniteLoss {
                    phase: "modulation",
                    step,
                    checkpoint: ckpt_path,
                });
            }
            Err(e) => return Err(e),
        };
        let done = step + 1;
        step_losses.push(values[2]);
        if done % config.log_every == 0 {
            log.rows.push((done, values.to_vec()));
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            snapshot(&model, &adam, done).save(&ckpt_path)?;
            log.save(&log_path)?;
        }
    }
    let checkpoint = snapshot(&model, &adam, config.steps.max(start));
    checkpoint.save(&ckpt_path)?;
    log.save(&log_path)?;
    Ok(PhaseOutcome {
        checkpoint,
        log,
        step_losses,
    })
}

/// The first `n` points of a cloud, or all of them.
fn leading_points(cloud: &PointCloud, n: usize) -> Result<PointCloud> {
    Ok(PointCloud::new(cloud.points()[..n.min(cloud.len())].to_vec())?)
}

/// Posterior means `μ` for every shape of the dataset, in manifest order,
/// encoded from the first `encoder_points` of each cloud. Writes
/// `latents.dsdf` and `latents.json` into `out_dir`.
pub fn extract_latents(ckpt: &Checkpoint, data: &Dataset, out_dir: &Path) -> Result<(LatentSet, LatentManifest)> {
    let model = load_modulation(ckpt)?;
    let config = config_of(ckpt)?;
    create_dir(out_dir)?;
    let mut values = Vec::with_capacity(data.records.len() * model.latent_dim());
    for chunk in data.records.chunks(EXTRACT_CHUNK) {
        let clouds = chunk
            .iter()
            .map(|r| leading_points(&r.cloud, config.encoder_points))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&PointCloud> = clouds.iter().collect();
        for mu in model.latent_means(&refs)? {
            values.extend(mu);
        }
    }
    let latents = LatentSet::new(model.latent_dim(), values)?;
    let mut entries = Vec::with_capacity(data.records.len());
    for (index, r) in data.records.iter().enumerate() {
        let cloud = fs::canonicalize(&r.cloud_path).map_err(|e| CoreError::io(&r.cloud_path, e))?;
        entries.push(LatentEntry {
            index,
            id: r.entry.id.clone(),
            split: r.entry.split,
            category: r.entry.category,
            cloud,
        });
    }
    let manifest = LatentManifest {
        latents: PathBuf::from(LATENT_FILE),
        dim: latents.dim,
        entries,
    };
    latents.save(out_dir.join(LATENT_FILE))?;
    write_json(&out_dir.join(LATENT_MANIFEST_FILE), &manifest)?;
    Ok((latents, manifest))
}

/// Reads a latent manifest and the latent file it names.
pub fn load_latents(manifest_path: impl AsRef<Path>) -> Result<(LatentSet, LatentManifest)> {
    let path = manifest_path.as_ref();
    let path = if path.is_dir() { path.join(LATENT_MANIFEST_FILE) } else { path.to_path_buf() };
    let manifest: LatentManifest = read_json(&path)?;
    let root = path.parent().unwrap_or(Path::new("."));
    let latents = LatentSet::load(root.join(&manifest.latents))?;
    if latents.dim != manifest.dim || latents.len() != manifest.entries.len() {
        return Err(CoreError::Format {
            what: "latent manifest",
            detail: format!(
                "{} entries of dimension {} for a file with {} latents of dimension {}",
                manifest.entries.len(),
                manifest.dim,
                latents.len(),
                latents.dim
            ),
        });
    }
    Ok((latents, manifest))
}

/// Random 128-point subset of each cloud cropped to its 64 points nearest a
/// random viewpoint, stacked as `[B, 64, 3]`.
pub fn partial_batch<R: Rng>(clouds: &[&PointCloud], rng: &mut R) -> Result<Tensor> {
    let partials = clouds
        .iter()
        .map(|c| Ok(crop_partial(&c.subsample(CROP_INPUT, rng), rng)?))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&PointCloud> = partials.iter().collect();
    stack_clouds(&refs)
}

/// `[B, 1]` mask with zeros where the condition is dropped (probability `p`).
pub fn keep_mask<R: Rng>(b: usize, p: f64, rng: &mut R) -> Tensor {
    let data = (0..b).map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 }).collect();
    Tensor::new(vec![b, 1], data).expect("mask is finite")
}

/// `Υ(partial) ⊙ keep`, the training-time condition.
fn masked_condition(tape: &Tape, denoiser: &Denoiser, partial: &Tensor, keep: &Tensor) -> Result<Var> {
    let pi = denoiser.encode_condition(tape, &tape.constant(partial.clone()))?;
    Ok(tape.mul(&pi, &tape.constant(keep.clone()))?)
}

fn random_timesteps<R: Rng>(b: usize, steps: usize, rng: &mut R) -> Vec<usize> {
    (0..b).map(|_| rng.random_range(1..=steps)).collect()
}

/// Trains the denoiser on the training-split latents. In conditional mode each
/// step crops fresh partial clouds and drops conditions with probability
/// `condition_dropout`; `psi` (modulation tensors) warm-starts `Υ` from `Ψ`.
pub fn train_diffusion(
    config: &TrainConfig,
    latents: &LatentSet,
    manifest: &LatentManifest,
    psi: Option<&BTreeMap<String, Tensor>>,
    out_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<PhaseOutcome> {
    config.validate()?;
    if latents.dim != config.modulation.latent_dim {
        return Err(CoreError::Config(format!(
            "latents have dimension {}, config expects {}",
            latents.dim, config.modulation.latent_dim
        )));
    }
    create_dir(out_dir)?;
    let rows: Vec<usize> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.index)
        .collect();
    if rows.is_empty() {
        return Err(CoreError::Config("no training latents".into()));
    }
    let conditional = config.denoiser.conditioning != Conditioning::None;
    let clouds: Vec<PointCloud> = if conditional {
        rows.iter()
            .map(|&i| Ok(dsdf_geometry::io::read_xyz(&manifest.entries[i].cloud)?))
            .collect::<Result<_>>()?
    } else {
        Vec::new()
    };
    let schedule = Schedule::new(&config.schedule)?;
    let mut denoiser = Denoiser::new(
        config.denoiser.clone(),
        latents.dim,
        config.modulation.feature_dim,
        config.modulation.point_hidden,
        config.seed,
    )?;
    let ckpt_path = out_dir.join(DIFFUSION_FILE);
    let log_path = out_dir.join("diffusion_loss.csv");
    let columns = ["mse"];
    let (mut adam, start, mut log) = match resume {
        Some(ck) => {
            expect_phase(ck, &["diffusion"])?;
            denoiser.load_parameters(&ck.tensors)?;
            let adam = Adam::import(adam_config(config), ck.step, &denoiser.store, ADAM_PREFIX, &ck.tensors)?;
            (adam, ck.step, LossLog::resume(&log_path, &columns, ck.step)?)
        }
        None => {
            if let (true, Some(psi)) = (conditional, psi) {
                if denoiser.warm_start_condition_encoder(psi)? == 0 {
                    return Err(CoreError::Config("no `psi.` tensors to warm-start the condition encoder".into()));
                }
            }
            let train: Vec<f64> = rows.iter().flat_map(|&i| latents.row(i).to_vec()).collect();
            denoiser.latent_scale = unit_rms_scale(&train);
            (Adam::new(adam_config(config)), 0, LossLog::new(&columns))
        }
    };
    let snapshot = |d: &Denoiser, adam: &Adam, step: u64| {
        state_checkpoint("diffusion", step, config, d.parameters(), adam.export(&d.store, ADAM_PREFIX))
    };
    let b = config.batch_size;
    let mut step_losses = Vec::new();
    for step in start..config.steps {
        let mut rng = substream(config.seed, Stream::DiffusionStep, step);
        let pick: Vec<usize> = (0..b).map(|_| rng.random_range(0..rows.len())).collect();
        let z0: Vec<f64> = pick.iter().flat_map(|&k| latents.row(rows[k]).iter().map(|v| v * denoiser.latent_scale)).collect();
        let z0 = Tensor::new(vec![b, latents.dim], z0)?;
        let ts = random_timesteps(b, schedule.steps(), &mut rng);
        let eps = gaussian(vec![b, latents.dim], &mut rng);
        let cond = if conditional {
            let picked: Vec<&PointCloud> = pick.iter().map(|&k| &clouds[k]).collect();
            let partial = partial_batch(&picked, &mut rng)?;
            Some((partial, keep_mask(b, config.condition_dropout, &mut rng)))
        } else {
            None
        };
        let attempt = (|| -> Result<f64> {
            let tape = Tape::new();
            let z0 = tape.constant(z0.clone());
            let zt = schedule.q_sample_var(&tape, &z0, &ts, &eps)?;
            let pi = match &cond {
                Some((partial, keep)) => Some(masked_condition(&tape, &denoiser, partial, keep)?),
                None => None,
            };
            let (loss, _) = denoiser.loss(&tape, &z0, &zt, &ts, pi.as_ref())?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(CoreError::Tensor(TensorError::NonFinite { op: "loss", index: 0 }));
            }
            let grads = tape.backward(&loss)?;
            adam.step(&mut denoiser.store, &grads)?;
            Ok(value)
        })();
        let value = match attempt {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => {
                snapshot(&denoiser, &adam, step).save(&ckpt_path)?;
                log.save(&log_path)?;
                return Err(CoreError::NonFiniteLoss {
                    phase: "diffusion",
                    step,
                    checkpoint: ckpt_path,
                });
            }
            Err(e) => return Err(e),
        };
        let done = step + 1;
        step_losses.push(value);
        if done % config.log_every == 0 {
            log.rows.push((done, vec![value]));
        }
        if config.checkpoint_every > 0 && done % config.checkpoint_every == 0 {
            snapshot(&denoiser, &adam, done).save(&ckpt_path)?;
            log.save(&log_path)?;
        }
    }
    let checkpoint = snapshot(&denoiser, &adam, config.steps.max(start));
    checkpoint.save(&ckpt_path)?;
    log.save(&log_path)?;
    Ok(PhaseOutcome {
        checkpoint,
        log,
        step_losses,
    })
}

/// Inputs of one joint fine-tuning step.
#[derive(Debug, Clone)]
pub struct FinetuneBatch {
    pub modulation: ModulationBatch,
    pub timesteps: Vec<usize>,
    pub noise: Tensor,
    /// Partial clouds `[B, 64, 3]` and keep mask `[B, 1]` in conditional mode.
    pub condition: Option<(Tensor, Tensor)>,
}

/// The three fine-tuning terms and their unweighted sum.
#[derive(Debug, Clone)]
pub struct FinetuneTerms {
    pub modulation: Var,
    pub diffusion: Var,
    pub sdf: Var,
    pub total: Var,
}

/// `L_mod + L_diff + mean |Φ(x | Θ_dec(ẑ0)) − SDF(x)|`, where `ẑ0` is the
/// denoiser's one-step prediction from `z_t = q(μ, t, ε)` and `μ` comes from
/// the live encoder. The diffusion term is measured on scaled latents.
pub fn finetune_loss(
    tape: &Tape,
    model: &ModulationModel,
    denoiser: &Denoiser,
    schedule: &Schedule,
    batch: &FinetuneBatch,
    kl_weight: f64,
) -> Result<FinetuneTerms> {
    let m = model.loss(tape, &batch.modulation, kl_weight)?;
    let z0 = tape.scale(&m.mu, denoiser.latent_scale)?;
    let zt = schedule.q_sample_var(tape, &z0, &batch.timesteps, &batch.noise)?;
    let pi = match &batch.condition {
        Some((partial, keep)) => Some(masked_condition(tape, denoiser, partial, keep)?),
        None => None,
    };
    let (diffusion, z0_hat) = denoiser.loss(tape, &z0, &zt, &batch.timesteps, pi.as_ref())?;
    let feature = model.decode(tape, &tape.scale(&z0_hat, 1.0 / denoiser.latent_scale)?)?;
    let sdf = model.sdf_l1(tape, &feature, &batch.modulation.queries, &batch.modulation.sdf)?;
    let total = tape.add(&tape.add(&m.total, &diffusion)?, &sdf)?;
    Ok(FinetuneTerms {
        modulation: m.total,
        diffusion,
        sdf,
        total,
    })
}

/// Draws the inputs of one fine-tuning step.
pub fn finetune_batch<R: Rng>(
    shapes: &[&ShapeRecord],
    config: &TrainConfig,
    schedule: &Schedule,
    conditional: bool,
    rng: &mut R,
) -> Result<FinetuneBatch> {
    let (modulation, chosen) = modulation_batch(shapes, config, rng)?;
    let b = chosen.len();
    let timesteps = random_timesteps(b, schedule.steps(), rng);
    let noise = gaussian(vec![b, config.modulation.latent_dim], rng);
    let condition = if conditional {
        let clouds: Vec<&PointCloud> = chosen.iter().map(|&i| &shapes[i].cloud).collect();
        let partial = partial_batch(&clouds, rng)?;
        Some((partial, keep_mask(b, config.condition_dropout, rng)))
    } else {
        None
    };
    Ok(FinetuneBatch {
        modulation,
        timesteps,
        noise,
        condition,
    })
}

/// Result of joint fine-tuning: both updated checkpoints.
#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub modulation: Checkpoint,
    pub diffusion: Checkpoint,
    pub log: LossLog,
    pub step_losses: Vec<f64>,
}

/// Jointly trains both models on the fine-tuning objective for
/// `config.steps` steps. Architectures come from the input checkpoints;
/// `freeze_sdf` fixes Φ and `freeze_denoiser` fixes the whole diffusion branch.
pub fn finetune_end_to_end(
    config: &TrainConfig,
    data: &Dataset,
    modulation_ckpt: &Checkpoint,
    diffusion_ckpt: &Checkpoint,
    out_dir: &Path,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    create_dir(out_dir)?;
    let mut model = load_modulation(modulation_ckpt)?;
    let (mut denoiser, schedule) = load_denoiser(diffusion_ckpt)?;
    let mut snapshot_config = config.clone();
    snapshot_config.modulation = model.config.clone();
    snapshot_config.denoiser = denoiser.config.clone();
    snapshot_config.schedule = config_of(diffusion_ckpt)?.schedule;
    let mut run_config = config.clone();
    run_config.modulation = model.config.clone();

    denoiser.store.set_tape_offset(model.store.len());
    if config.freeze_sdf {
        model.store.set_frozen("phi.", true);
    }
    if config.freeze_denoiser {
        denoiser.store.set_frozen("", true);
    }
    let conditional = denoiser.is_conditional();
    let shapes = data.split(Split::Train);
    let mut adam_mod = Adam::new(adam_config(config));
    let mut adam_diff = Adam::new(adam_config(config));
    let mod_path = out_dir.join(MODULATION_FILE);
    let diff_path = out_dir.join(DIFFUSION_FILE);
    let log_path = out_dir.join("finetune_loss.csv");
    let mut log = LossLog::new(&["modulation", "diffusion", "sdf", "total"]);
    let save = |model: &ModulationModel, denoiser: &Denoiser, step: u64| -> Result<(Checkpoint, Checkpoint)> {
        let m = state_checkpoint("finetune", step, &snapshot_config, model.parameters(), BTreeMap::new());
        let d = state_checkpoint("finetune", step, &snapshot_config, denoiser.parameters(), BTreeMap::new());
        m.save(&mod_path)?;
        d.save(&diff_path)?;
        Ok((m, d))
    };
    let mut step_losses = Vec::new();
    for step in 0..config.steps {
        let mut rng = substream(config.seed, Stream::FinetuneStep, step);
        let batch = finetune_batch(&shapes, &run_config, &schedule, conditional, &mut rng)?;
        let attempt = (|| -> Result<[f64; 4]> {
            let tape = Tape::new();
            let t = finetune_loss(&tape, &model, &denoiser, &schedule, &batch, config.kl_weight)?;
            let values = [t.modulation.item()?, t.diffusion.item()?, t.sdf.item()?, t.total.item()?];
            if !values[3].is_finite() {
                return Err(CoreError::Tensor(TensorError::NonFinite { op: "loss", index: 0 }));
            }
            let grads = tape.backward(&t.total)?;
            let (mut m2, mut d2) = (model.store.clone(), denoiser.store.clone());
            adam_mod.step(&mut m2, &grads)?;
            adam_diff.step(&mut d2, &grads)?;
            model.store = m2;
            denoiser.store = d2;
            Ok(values)
        })();
        let values = match attempt {
            Ok(v) => v,
            Err(e) if is_non_finite(&e) => {
                save(&model, &denoiser, step)?;
                log.save(&log_path)?;
                return Err(CoreError::NonFiniteLoss {
                    phase: "finetune",
                    step,
                    checkpoint: mod_path,
                });
            }
            Err(e) => return Err(e),
        };
        let done = step + 1;
        step_losses.push(values[3]);
        if done % config.log_every == 0 {
            log.rows.push((done, values.to_vec()));
        }
    }
    let (modulation, diffusion) = save(&model, &denoiser, config.steps)?;
    log.save(&log_path)?;
    Ok(FinetuneOutcome {
        modulation,
        diffusion,
        log,
        step_losses,
    })
}

/// One generated shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub latent: Vec<f64>,
    /// Mean decoded distance at the condition points; `None` without a condition.
    pub cons: Option<f64>,
    /// `None` until meshed; an empty mesh means no zero crossing.
    pub mesh: Option<Mesh>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GenerateOptions {
    pub n: usize,
    pub resolution: usize,
    pub omega: f64,
    pub seed: u64,
    /// Keep only samples with CONS at or below this before meshing.
    pub cons_threshold: Option<f64>,
    pub signed_cons: bool,
}

impl Default for GenerateOptions {
    fn default() -> Self {
        Self {
            n: 1,
            resolution: 64,
            omega: 0.0,
            seed: 0,
            cons_threshold: None,
            signed_cons: false,
        }
    }
}

/// The per-sample streams used by generation: sample `i` always draws from
/// `(seed, i)`, independent of how many samples run together.
pub fn sample_streams(seed: u64, n: usize) -> Vec<ChaCha8Rng> {
    (0..n as u64).map(|i| substream(seed, Stream::Sample, i)).collect()
}

/// Samples `n` latents, optionally conditioned on a partial cloud encoded by
/// `Υ`, and scores each against the condition with CONS. No meshing.
pub fn sample_latents(models: &Models, condition: Option<&PointCloud>, options: &GenerateOptions) -> Result<Vec<Generation>> {
    if options.n == 0 {
        return Ok(Vec::new());
    }
    let cond = match condition {
        Some(partial) => {
            if !models.denoiser.is_conditional() {
                return Err(CoreError::Config("the diffusion checkpoint was trained without conditions".into()));
            }
            let tape = Tape::inference();
            let pts = tape.constant(stack_clouds(&[partial])?);
            let pi = models.denoiser.encode_condition(&tape, &pts)?;
            let row = pi.value().data().to_vec();
            let data: Vec<f64> = (0..options.n).flat_map(|_| row.iter().copied()).collect();
            Some(Tensor::new(vec![options.n, row.len()], data)?)
        }
        None => None,
    };
    let mut rngs = sample_streams(options.seed, options.n);
    let guidance = Guidance {
        omega: options.omega,
        force: false,
    };
    let z = sample(&models.denoiser, &models.schedule, cond.as_ref(), guidance, &mut rngs)?;
    z.data()
        .chunks(models.denoiser.latent_dim)
        .map(|latent| {
            let cons = match condition {
                Some(partial) => {
                    let values = models.modulation.sdf_values(latent, partial.points())?;
                    Some(cons_from_values(&values, options.signed_cons))
                }
                None => None,
            };
            Ok(Generation {
                latent: latent.to_vec(),
                cons,
                mesh: None,
            })
        })
        .collect()
}

/// Keeps generations whose CONS is at or below `threshold`; generations
/// without a score are kept.
pub fn filter_by_cons(generations: Vec<Generation>, threshold: f64) -> Vec<Generation> {
    generations
        .into_iter()
        .filter(|g| g.cons.is_none_or(|c| c <= threshold))
        .collect()
}

/// Samples, optionally CONS-filters, then meshes every remaining latent.
pub fn generate(models: &Models, condition: Option<&PointCloud>, options: &GenerateOptions) -> Result<Vec<Generation>> {
    let mut gens = sample_latents(models, condition, options)?;
    if let Some(t) = options.cons_threshold {
        gens = filter_by_cons(gens, t);
    }
    for g in &mut gens {
        g.mesh = Some(models.modulation.reconstruct_mesh(&g.latent, options.resolution)?);
    }
    Ok(gens)
}

/// `n` surface points of a mesh drawn from the evaluation stream `index`;
/// `None` for an empty mesh.
pub fn mesh_cloud(mesh: &Mesh, n: usize, seed: u64, index: u64) -> Result<Option<PointCloud>> {
    if mesh.is_empty() {
        return Ok(None);
    }
    let mut rng = substream(seed, Stream::Evaluation, index);
    Ok(Some(mesh.sample_points(n, &mut rng)?))
}
