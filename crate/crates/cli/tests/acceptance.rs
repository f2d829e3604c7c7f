//! Acceptance suite. Runs every criterion in order, prints one PASS or FAIL
//! line each, and exits non-zero if any failed.
//!
//! Criteria 3, 5, 6, 7 and 8 share one pipeline trained through the `dsdf`
//! binary with reduced model sizes (see `modulation_settings` and
//! `diffusion_settings`).

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use common::*;
use dsdf_core::metrics::{cov, mmd, one_nna, tmd, uhd};
use dsdf_core::modulation::{gaussian, kl_to_prior, ModulationBatch};
use dsdf_core::pipeline::{finetune_loss, mesh_cloud, FinetuneBatch};
use dsdf_core::{
    sample, Conditioning, Dataset, Denoiser, DenoiserConfig, Guidance, ModulationConfig,
    ModulationModel, Models, Schedule, ScheduleConfig, Split,
};
use dsdf_geometry::{chamfer_distance, io, marching_cubes, PointCloud, ScalarGrid, ShapeSpec};
use dsdf_nn::gradcheck::check_param_gradients;
use dsdf_nn::{Activation, AttentionBlock, LayerNorm, Mlp, NnError, ParamStore};
use dsdf_tensor::{finite_diff_check, Tape, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Outcome = (bool, String);

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn uniform(shape: &[usize], lo: f64, hi: f64, r: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| r.random_range(lo..hi)).collect()).unwrap()
}

fn main() {
    let criteria: [(&str, fn(&mut Fixture) -> Outcome); 10] = [
        ("gradient suite", gradient_suite),
        ("diffusion statistics", diffusion_statistics),
        ("modulation fidelity", modulation_fidelity),
        ("marching cubes", marching_cubes_sphere),
        ("unconditional generation", unconditional_generation),
        ("conditional completion", conditional_completion),
        ("fine-tune diversity", finetune_diversity),
        ("guidance degeneracy", guidance_degeneracy),
        ("metric oracles", metric_oracles),
        ("CLI determinism", cli_determinism),
    ];
    let mut fixture = Fixture::default();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (pass, detail) = match catch_unwind(AssertUnwindSafe(|| check(&mut fixture))) {
            Ok(outcome) => outcome,
            Err(e) => {
                let msg = e
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panicked: {msg}"))
            }
        };
        failed += usize::from(!pass);
        println!(
            "{} criterion {:>2} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// ---------------------------------------------------------------- gradients

const GRAD_TOL: f64 = 1e-3;
const GRAD_EPS: f64 = 1e-5;

fn nn<T>(r: dsdf_core::Result<T>) -> dsdf_nn::Result<T> {
    r.map_err(|e| NnError::Config(e.to_string()))
}

fn tensor_err(e: NnError) -> TensorError {
    TensorError::Domain {
        op: "layer",
        detail: e.to_string(),
    }
}

fn weighted_sum(tape: &Tape, y: &Var, w: &Tensor) -> dsdf_tensor::Result<Var> {
    let p = tape.mul(y, &tape.constant(w.clone()))?;
    tape.sum(&p, None)
}

fn tiny_modulation() -> ModulationConfig {
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

fn tiny_denoiser(conditioning: Conditioning) -> DenoiserConfig {
    DenoiserConfig {
        model_dim: 8,
        blocks: 2,
        heads: 2,
        ff_mult: 2,
        time_dim: 4,
        conditioning,
    }
}

fn tiny_schedule() -> Schedule {
    Schedule::new(&ScheduleConfig {
        steps: 20,
        beta_start: 1e-3,
        beta_end: 0.2,
    })
    .unwrap()
}

fn tiny_batch(r: &mut ChaCha8Rng) -> ModulationBatch {
    ModulationBatch {
        points: uniform(&[2, 5, 3], -1.0, 1.0, r),
        queries: uniform(&[2, 6, 3], -1.0, 1.0, r),
        sdf: uniform(&[2, 6], -0.5, 0.5, r),
        eps: Some(gaussian(vec![2, 4], r)),
    }
}

fn gradient_suite(_: &mut Fixture) -> Outcome {
    let start = Instant::now();
    let mut errors: Vec<(String, f64)> = Vec::new();
    let mut r = rng(1);

    // Layers: MLPs of both activations, layer norm and attention, in their
    // parameters and in their inputs.
    for activation in [Activation::Relu, Activation::Gelu] {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[3, 5, 4], activation, &mut r).unwrap();
        let x = uniform(&[4, 3], -1.0, 1.0, &mut r);
        let w = uniform(&[4, 4], -1.0, 1.0, &mut r);
        let loss = |t: &Tape, s: &ParamStore, x: &Var| -> dsdf_nn::Result<Var> {
            Ok(weighted_sum(t, &mlp.forward(t, s, x)?, &w)?)
        };
        let e = check_param_gradients(&store, |t, s| loss(t, s, &t.constant(x.clone())), GRAD_EPS).unwrap();
        errors.push((format!("mlp {activation:?} params"), e));
        let e = finite_diff_check(|t, v| loss(t, &store, v).map_err(tensor_err), &x, GRAD_EPS).unwrap();
        errors.push((format!("mlp {activation:?} input"), e));
    }
    {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4).unwrap();
        let x = uniform(&[3, 4], -1.0, 1.0, &mut r);
        let w = uniform(&[3, 4], -1.0, 1.0, &mut r);
        let loss = |t: &Tape, s: &ParamStore, x: &Var| -> dsdf_nn::Result<Var> {
            Ok(weighted_sum(t, &ln.forward(t, s, x)?, &w)?)
        };
        let e = check_param_gradients(&store, |t, s| loss(t, s, &t.constant(x.clone())), GRAD_EPS).unwrap();
        errors.push(("layer norm params".into(), e));
        let e = finite_diff_check(|t, v| loss(t, &store, v).map_err(tensor_err), &x, GRAD_EPS).unwrap();
        errors.push(("layer norm input".into(), e));
    }
    {
        let mut store = ParamStore::new();
        let block = AttentionBlock::new(&mut store, "att", 4, 4, 2, &mut r).unwrap();
        let q = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        let kv = uniform(&[2, 2, 4], -1.0, 1.0, &mut r);
        let w = uniform(&[2, 3, 4], -1.0, 1.0, &mut r);
        let loss = |t: &Tape, s: &ParamStore, q: &Var, kv: &Var| -> dsdf_nn::Result<Var> {
            Ok(weighted_sum(t, &block.forward(t, s, q, kv)?, &w)?)
        };
        let e = check_param_gradients(
            &store,
            |t, s| loss(t, s, &t.constant(q.clone()), &t.constant(kv.clone())),
            GRAD_EPS,
        )
        .unwrap();
        errors.push(("attention params".into(), e));
        let e = finite_diff_check(
            |t, v| loss(t, &store, v, &t.constant(kv.clone())).map_err(tensor_err),
            &q,
            GRAD_EPS,
        )
        .unwrap();
        errors.push(("attention queries".into(), e));
        let e = finite_diff_check(
            |t, v| loss(t, &store, &t.constant(q.clone()), v).map_err(tensor_err),
            &kv,
            GRAD_EPS,
        )
        .unwrap();
        errors.push(("attention keys and values".into(), e));
    }

    // Modulation loss (L1 + KL) through encoder, VAE and SDF decoder.
    let model = ModulationModel::new(tiny_modulation(), 3).unwrap();
    let batch = tiny_batch(&mut r);
    let with_store = |store: &ParamStore| {
        let mut m = model.clone();
        m.store = store.clone();
        m
    };
    let e = check_param_gradients(
        &model.store,
        |t, s| Ok(nn(with_store(s).loss(t, &batch, 0.3))?.total),
        GRAD_EPS,
    )
    .unwrap();
    errors.push(("modulation loss".into(), e));
    let x = uniform(&[3, 8], -1.0, 1.0, &mut r);
    let e = finite_diff_check(
        |t, v| {
            let mu = t.slice(v, 1, 0, 4)?;
            let lv = t.slice(v, 1, 4, 4)?;
            kl_to_prior(t, &mu, &lv, 0.25).map_err(|e| tensor_err(NnError::Config(e.to_string())))
        },
        &x,
        GRAD_EPS,
    )
    .unwrap();
    errors.push(("KL term".into(), e));

    // Diffusion loss, unconditional and with both conditioning modes, with
    // the condition produced by the point encoder.
    let schedule = tiny_schedule();
    let z0 = uniform(&[3, 4], -0.5, 0.5, &mut r);
    let ts = vec![1, 9, 20];
    let eps = gaussian(vec![3, 4], &mut r);
    let partial = uniform(&[3, 5, 3], -1.0, 1.0, &mut r);
    for conditioning in [Conditioning::None, Conditioning::CrossAttention, Conditioning::Concat] {
        let den = Denoiser::new(tiny_denoiser(conditioning), 4, 6, 8, 5).unwrap();
        let loss = |tape: &Tape, store: &ParamStore| -> dsdf_core::Result<Var> {
            let mut d = den.clone();
            d.store = store.clone();
            let z0 = tape.constant(z0.clone());
            let zt = schedule.q_sample_var(tape, &z0, &ts, &eps)?;
            let pi = match d.is_conditional() {
                true => Some(d.encode_condition(tape, &tape.constant(partial.clone()))?),
                false => None,
            };
            Ok(d.loss(tape, &z0, &zt, &ts, pi.as_ref())?.0)
        };
        let e = check_param_gradients(&den.store, |t, s| nn(loss(t, s)), GRAD_EPS).unwrap();
        errors.push((format!("diffusion loss {conditioning:?}"), e));
    }

    // End-to-end loss in the parameters of both models.
    for conditioning in [Conditioning::None, Conditioning::CrossAttention] {
        let model = ModulationModel::new(tiny_modulation(), 10).unwrap();
        let mut den = Denoiser::new(tiny_denoiser(conditioning), 4, 6, 8, 11).unwrap();
        den.store.set_tape_offset(model.store.len());
        let mut r = rng(12);
        let modulation = tiny_batch(&mut r);
        let condition = (conditioning != Conditioning::None).then(|| {
            (uniform(&[2, 5, 3], -1.0, 1.0, &mut r), Tensor::new(vec![2, 1], vec![1.0, 0.0]).unwrap())
        });
        let batch = FinetuneBatch {
            modulation,
            timesteps: vec![3, 17],
            noise: gaussian(vec![2, 4], &mut r),
            condition,
        };
        let e = check_param_gradients(
            &model.store,
            |t, s| {
                let mut m = model.clone();
                m.store = s.clone();
                Ok(nn(finetune_loss(t, &m, &den, &schedule, &batch, 0.1))?.total)
            },
            GRAD_EPS,
        )
        .unwrap();
        errors.push((format!("end-to-end loss {conditioning:?}, modulation side"), e));
        let e = check_param_gradients(
            &den.store,
            |t, s| {
                let mut d = den.clone();
                d.store = s.clone();
                Ok(nn(finetune_loss(t, &model, &d, &schedule, &batch, 0.1))?.total)
            },
            GRAD_EPS,
        )
        .unwrap();
        errors.push((format!("end-to-end loss {conditioning:?}, diffusion side"), e));
    }

    let elapsed = start.elapsed().as_secs_f64();
    let (worst, err) = errors.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
    let pass = errors.iter().all(|(_, e)| *e < GRAD_TOL) && elapsed < 60.0;
    (
        pass,
        format!("{} checks, worst relative error {err:.2e} ({worst}), {elapsed:.1}s", errors.len()),
    )
}

// ---------------------------------------------------------------- schedule

fn diffusion_statistics(_: &mut Fixture) -> Outcome {
    let start = Instant::now();
    let schedule = Schedule::new(&ScheduleConfig::default()).unwrap();
    let alpha_bar_t = schedule.alpha_bar(schedule.steps());
    let z0 = [0.8, -0.3, 0.0, 1.5];
    let n = 10_000;
    let mut r = rng(2);
    let mut worst: f64 = 0.0;
    for t in [1, 10, 100, 250, 500] {
        let ab = schedule.alpha_bar(t);
        let eps = gaussian(vec![n, z0.len()], &mut r);
        let mut draws = vec![Vec::with_capacity(n); z0.len()];
        for row in eps.data().chunks(z0.len()) {
            for (d, v) in schedule.q_sample(&z0, t, row).unwrap().into_iter().enumerate() {
                draws[d].push(v);
            }
        }
        for (d, xs) in draws.iter().enumerate() {
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let (m_true, v_true) = (ab.sqrt() * z0[d], 1.0 - ab);
            let se_mean = (v_true / n as f64).sqrt();
            let se_var = v_true * (2.0 / (n - 1) as f64).sqrt();
            worst = worst.max((mean - m_true).abs() / se_mean).max((var - v_true).abs() / se_var);
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    let pass = worst < 3.0 && alpha_bar_t < 0.01 && elapsed < 10.0;
    (
        pass,
        format!("worst deviation {worst:.2} standard errors, ᾱ_T = {alpha_bar_t:.2e}, {elapsed:.1}s"),
    )
}

// ---------------------------------------------------------------- marching cubes

fn marching_cubes_sphere(_: &mut Fixture) -> Outcome {
    let start = Instant::now();
    let spec = ShapeSpec::sphere([0.0; 3], 0.5);
    let grid = ScalarGrid::from_fn(64, |p| spec.sdf(p)).unwrap();
    let mesh = marching_cubes(&grid, 0.0).unwrap();
    let diagonal = 2.0 * 3f64.sqrt() / 63.0;
    let far = mesh.vertices.iter().map(|&v| spec.sdf(v).abs()).fold(0.0, f64::max);
    let elapsed = start.elapsed().as_secs_f64();
    let (watertight, euler) = (mesh.is_watertight(), mesh.euler_characteristic());
    let pass = watertight && euler == 2 && far < diagonal && elapsed < 5.0;
    (
        pass,
        format!(
            "{} triangles, watertight {watertight}, Euler {euler}, farthest vertex {far:.2e} (cell diagonal {diagonal:.2e}), {elapsed:.2}s",
            mesh.triangles.len()
        ),
    )
}

// ---------------------------------------------------------------- metrics

type P = [f64; 3];

fn d2(a: P, b: P) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nn2(p: P, set: &[P]) -> f64 {
    set.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min)
}

fn cd(a: &[P], b: &[P]) -> f64 {
    a.iter().map(|&p| nn2(p, b)).sum::<f64>() / a.len() as f64 + b.iter().map(|&p| nn2(p, a)).sum::<f64>() / b.len() as f64
}

fn mmd_oracle(g: &[Vec<P>], r: &[Vec<P>]) -> f64 {
    r.iter().map(|rj| g.iter().map(|gi| cd(gi, rj)).fold(f64::INFINITY, f64::min)).sum::<f64>() / r.len() as f64
}

fn cov_oracle(g: &[Vec<P>], r: &[Vec<P>]) -> f64 {
    let mut matched = vec![false; r.len()];
    for gi in g {
        let mut best = 0;
        for j in 1..r.len() {
            if cd(gi, &r[j]) < cd(gi, &r[best]) {
                best = j;
            }
        }
        matched[best] = true;
    }
    matched.iter().filter(|&&m| m).count() as f64 / r.len() as f64
}

fn nna_oracle(g: &[Vec<P>], r: &[Vec<P>]) -> f64 {
    let all: Vec<(&Vec<P>, bool)> = g.iter().map(|c| (c, false)).chain(r.iter().map(|c| (c, true))).collect();
    let mut correct = 0;
    for (i, (ci, is_ref)) in all.iter().enumerate() {
        let (mut best, mut label) = (f64::INFINITY, false);
        for (j, (cj, lj)) in all.iter().enumerate() {
            let d = cd(ci, cj);
            if i != j && (d < best || (d == best && *lj)) {
                best = d;
                label = *lj;
            }
        }
        correct += usize::from(label == *is_ref);
    }
    correct as f64 / all.len() as f64
}

fn tmd_oracle(c: &[Vec<P>]) -> f64 {
    let k = c.len();
    let mut total = 0.0;
    for i in 0..k {
        let s: f64 = (0..k).filter(|&j| j != i).map(|j| cd(&c[i], &c[j])).sum();
        total += s / (k - 1) as f64;
    }
    total / k as f64
}

fn uhd_oracle(partial: &[P], c: &[Vec<P>]) -> f64 {
    c.iter().map(|ci| partial.iter().map(|&p| nn2(p, ci).sqrt()).fold(0.0, f64::max)).sum::<f64>() / c.len() as f64
}

fn metric_oracles(_: &mut Fixture) -> Outcome {
    let mut r = rng(9);
    let raw = |n: usize, r: &mut ChaCha8Rng| -> Vec<P> {
        (0..n).map(|_| std::array::from_fn(|_| r.random_range(-1.0..1.0))).collect()
    };
    let clouds = |raw: &[Vec<P>]| -> Vec<PointCloud> { raw.iter().map(|c| PointCloud::new(c.clone()).unwrap()).collect() };
    let trials = 25;
    let mut mismatches = Vec::new();
    for trial in 0..trials {
        let (n_gen, n_ref) = (r.random_range(2..=8), r.random_range(2..=8));
        let pts = r.random_range(1..=32);
        let g: Vec<Vec<P>> = (0..n_gen).map(|_| raw(pts, &mut r)).collect();
        let rf: Vec<Vec<P>> = (0..n_ref).map(|_| raw(pts, &mut r)).collect();
        let partial = raw(r.random_range(1..=32), &mut r);
        let (gc, rc) = (clouds(&g), clouds(&rf));
        let k = n_gen.min(n_ref);
        let pc = PointCloud::new(partial.clone()).unwrap();
        let pairs = [
            ("MMD", mmd(&gc, &rc).unwrap(), mmd_oracle(&g, &rf)),
            ("COV", cov(&gc, &rc).unwrap(), cov_oracle(&g, &rf)),
            ("1-NNA", one_nna(&gc[..k], &rc[..k]).unwrap(), nna_oracle(&g[..k], &rf[..k])),
            ("TMD", tmd(&gc).unwrap(), tmd_oracle(&g)),
            ("UHD", uhd(&pc, &gc).unwrap(), uhd_oracle(&partial, &g)),
        ];
        for (name, got, want) in pairs {
            if got != want {
                mismatches.push(format!("trial {trial} {name}: {got} vs {want}"));
            }
        }
    }
    match mismatches.is_empty() {
        true => (true, format!("{trials} random trials, 5 metrics, all exactly equal")),
        false => (false, mismatches.join("; ")),
    }
}

// ---------------------------------------------------------------- trained pipeline

/// Reduced modulation settings: a 4×64 SDF decoder on 32-dimensional latents.
fn modulation_settings() -> Value {
    json!({
        "seed": 0,
        "batch_size": 8,
        "queries_per_shape": 256,
        "encoder_points": 128,
        "log_every": 100,
        "checkpoint_every": 2000,
        "modulation": {
            "feature_dim": 64, "latent_dim": 32, "point_hidden": 64,
            "vae_hidden": 128, "sdf_hidden": 64, "sdf_layers": 4
        }
    })
}

/// Modulation runs at a constant rate, then resumes at a lower one.
const MODULATION_STAGES: [(u64, f64); 2] = [(12000, 1e-3), (16000, 2e-4)];

/// Reduced denoiser settings: two blocks of width 64.
fn diffusion_settings(steps: u64) -> Value {
    json!({
        "seed": 0,
        "steps": steps,
        "batch_size": 64,
        "learning_rate": 1e-3,
        "log_every": 100,
        "checkpoint_every": 0,
        "denoiser": { "model_dim": 64, "blocks": 2, "heads": 2, "ff_mult": 2, "time_dim": 32 }
    })
}

const DIFFUSION_STEPS: u64 = 4000;
const FINETUNE_STEPS: u64 = 1000;
const FINETUNE_LR: f64 = 1e-4;
const EVAL_RESOLUTION: usize = 64;
const COMPLETION_RESOLUTION: usize = 32;

#[derive(Default)]
struct Fixture {
    trained: Option<Result<Trained, String>>,
    /// Completion reports of the conditional model before fine-tuning.
    completions: Option<Vec<Value>>,
}

#[derive(Clone)]
struct Trained {
    data: PathBuf,
    reference: PathBuf,
    latents: PathBuf,
    /// Modulation plus unconditional diffusion.
    uncond: PathBuf,
    /// Modulation plus cross-attention diffusion.
    cond: PathBuf,
    finetuned: PathBuf,
    work: PathBuf,
}

fn write_settings(path: &Path, value: &Value) -> String {
    fs::write(path, serde_json::to_string_pretty(value).unwrap()).unwrap();
    s(path)
}

fn stage_log(msg: &str, start: &Instant) {
    println!("  [{:>7.1}s] {msg}", start.elapsed().as_secs_f64());
}

fn train_pipeline() -> Trained {
    let start = Instant::now();
    let work = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    if work.exists() {
        fs::remove_dir_all(&work).unwrap();
    }
    fs::create_dir_all(&work).unwrap();
    let data = work.join("data");
    let reference = work.join("reference");
    ok(&["gen-data", "--out", &s(&data), "--train", "200", "--test", "32", "--seed", "0"]);
    ok(&["gen-data", "--out", &s(&reference), "--train", "0", "--test", "64", "--seed", "1"]);
    stage_log("datasets written", &start);

    let mod_config = write_settings(&work.join("modulation.json"), &modulation_settings());
    let mod_dir = work.join("modulation");
    for (i, (steps, lr)) in MODULATION_STAGES.iter().enumerate() {
        let mut args = vec![
            "train-mod".to_string(),
            "--data".into(),
            s(&data),
            "--out".into(),
            s(&mod_dir),
            "--config".into(),
            mod_config.clone(),
            "--steps".into(),
            steps.to_string(),
            "--lr".into(),
            lr.to_string(),
        ];
        if i > 0 {
            args.push("--resume".into());
        }
        ok(&args);
        stage_log(&format!("modulation trained to step {steps}"), &start);
    }
    let latents = work.join("latents");
    ok(&["extract-latents", "--ckpt", &s(&mod_dir), "--data", &s(&data), "--out", &s(&latents)]);

    let diff_config = write_settings(&work.join("diffusion.json"), &diffusion_settings(DIFFUSION_STEPS));
    let train_diffusion = |name: &str, conditioning: &str| -> PathBuf {
        let out = work.join(name);
        ok(&[
            "train-diff", "--latents", &s(&latents), "--modulation", &s(&mod_dir), "--out", &s(&out), "--config",
            &diff_config, "--conditioning", conditioning,
        ]);
        fs::copy(mod_dir.join("modulation.dsdf"), out.join("modulation.dsdf")).unwrap();
        stage_log(&format!("{name} diffusion trained"), &start);
        out
    };
    let uncond = train_diffusion("uncond", "none");
    let cond = train_diffusion("cond", "cross-attention");

    let finetuned = work.join("finetuned");
    let ft_settings = json!({
        "seed": 0,
        "steps": FINETUNE_STEPS,
        "batch_size": 8,
        "learning_rate": FINETUNE_LR,
        "queries_per_shape": 256,
        "encoder_points": 128,
        "log_every": 50,
        "checkpoint_every": 0
    });
    let ft_config = write_settings(&work.join("finetune.json"), &ft_settings);
    ok(&["finetune", "--ckpt", &s(&cond), "--data", &s(&data), "--out", &s(&finetuned), "--config", &ft_config]);
    stage_log("fine-tuned", &start);
    Trained {
        data,
        reference,
        latents,
        uncond,
        cond,
        finetuned,
        work,
    }
}

impl Fixture {
    fn trained(&mut self) -> Result<&Trained, String> {
        if self.trained.is_none() {
            let result = catch_unwind(train_pipeline).map_err(|e| {
                e.downcast_ref::<String>().cloned().unwrap_or_else(|| "pipeline training panicked".into())
            });
            self.trained = Some(result);
        }
        self.trained.as_ref().unwrap().as_ref().map_err(|e| e.clone())
    }
}

macro_rules! trained {
    ($fixture:expr) => {
        match $fixture.trained() {
            Ok(t) => t.clone(),
            Err(e) => return (false, format!("pipeline unavailable: {e}")),
        }
    };
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn test_records(data: &Path) -> Vec<(usize, PointCloud, PathBuf)> {
    let ds = Dataset::load(data).unwrap();
    ds.records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.entry.split == Split::Test)
        .map(|(i, r)| (i, r.cloud.clone(), r.cloud_path.clone()))
        .collect()
}

fn modulation_fidelity(f: &mut Fixture) -> Outcome {
    let t = trained!(f);
    let latents = t.latents.join("latents.dsdf");
    let meshes = t.work.join("fidelity");
    let mut cds = Vec::new();
    for (index, cloud, _) in test_records(&t.data) {
        let out = meshes.join(format!("shape_{index:03}.obj"));
        ok(&[
            "mesh", "--ckpt", &s(&t.uncond), "--latents", &s(&latents), "--index", &index.to_string(),
            "--resolution", &EVAL_RESOLUTION.to_string(), "--out", &s(&out),
        ]);
        let mesh = io::read_obj(&out).unwrap();
        let cd = match mesh_cloud(&mesh, 2048, 0, index as u64).unwrap() {
            Some(samples) => chamfer_distance(&samples, &cloud),
            None => f64::INFINITY,
        };
        cds.push(cd);
    }
    let mean = cds.iter().sum::<f64>() / cds.len() as f64;
    let worst = cds.iter().copied().fold(0.0, f64::max);
    (
        cds.len() == 32 && mean < 5e-3,
        format!("{} held-out shapes, mean squared CD {mean:.2e} (worst {worst:.2e}), bound 5e-3", cds.len()),
    )
}

fn unconditional_generation(f: &mut Fixture) -> Outcome {
    let t = trained!(f);
    let samples = t.work.join("samples");
    ok(&[
        "sample", "--ckpt", &s(&t.uncond), "--n", "80", "--seed", "0", "--resolution",
        &EVAL_RESOLUTION.to_string(), "--out", &s(&samples),
    ]);
    let report = read_json(&samples.join("samples.json"));
    let entries = report["samples"].as_array().unwrap();
    let non_empty_50 = entries[..50].iter().filter(|e| !e["empty"].as_bool().unwrap()).count();

    // 64 non-empty samples, in sample order, against 64 unseen shapes.
    let gen = t.work.join("generated");
    fs::create_dir_all(&gen).unwrap();
    let mut kept = 0;
    for e in entries.iter().filter(|e| !e["empty"].as_bool().unwrap()).take(64) {
        let name = e["mesh"].as_str().unwrap();
        fs::copy(samples.join(name), gen.join(name)).unwrap();
        kept += 1;
    }
    if kept < 64 {
        return (false, format!("{non_empty_50}/50 non-empty; only {kept} non-empty of 80 for 1-NNA"));
    }
    let eval = t.work.join("uncond_eval.json");
    ok(&[
        "eval", "--mode", "uncond", "--gen", &s(&gen), "--ref", &s(&t.reference.join("clouds")), "--out",
        &s(&eval),
    ]);
    let metrics = &read_json(&eval)["metrics"];
    let nna = metrics["1-NNA"].as_f64().unwrap();
    (
        non_empty_50 >= 45 && nna < 0.9,
        format!(
            "{non_empty_50}/50 non-empty (need 45), 1-NNA {nna:.3} (need < 0.9), MMD {:.2e}, COV {:.3}",
            metrics["MMD"].as_f64().unwrap(),
            metrics["COV"].as_f64().unwrap()
        ),
    )
}

/// Per-partial completion reports for the 16 first held-out shapes.
fn complete_all(t: &Trained, models: &Path, tag: &str, thresholds: Option<&[f64]>) -> Vec<Value> {
    test_records(&t.data)
        .iter()
        .take(16)
        .enumerate()
        .map(|(j, (_, _, path))| {
            let out = t.work.join(tag).join(format!("partial_{j:02}"));
            let mut args = vec![
                "complete".to_string(),
                "--ckpt".into(),
                s(models),
                "--partial".into(),
                s(path),
                "--n".into(),
                "10".into(),
                "--seed".into(),
                j.to_string(),
                "--resolution".into(),
                COMPLETION_RESOLUTION.to_string(),
                "--out".into(),
                s(&out),
            ];
            if let Some(th) = thresholds {
                args.extend(["--cons-threshold".into(), th[j].to_string()]);
            }
            ok(&args);
            read_json(&out.join("report.json"))
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn completion_summary(reports: &[Value]) -> (Option<f64>, Option<f64>) {
    let uhds: Vec<f64> = reports.iter().filter_map(|r| r["mean_uhd"].as_f64()).collect();
    let tmds: Vec<f64> = reports.iter().filter_map(|r| r["tmd"].as_f64()).collect();
    (
        (uhds.len() == reports.len()).then(|| mean(&uhds)),
        (tmds.len() == reports.len()).then(|| mean(&tmds)),
    )
}

fn before_finetune(f: &mut Fixture, t: &Trained) -> Vec<Value> {
    f.completions.get_or_insert_with(|| complete_all(t, &t.cond, "completions", None)).clone()
}

fn conditional_completion(f: &mut Fixture) -> Outcome {
    let t = trained!(f);
    let reports = before_finetune(f, &t);
    let thresholds: Vec<f64> = reports
        .iter()
        .map(|r| {
            let cons: Vec<f64> = r["completions"].as_array().unwrap().iter().map(|c| c["cons"].as_f64().unwrap()).collect();
            median(&cons)
        })
        .collect();
    let filtered = complete_all(&t, &t.cond, "filtered", Some(&thresholds));
    let (uhd, tmd) = completion_summary(&reports);
    let (filtered_uhd, _) = completion_summary(&filtered);
    let (Some(uhd), Some(tmd), Some(filtered_uhd)) = (uhd, tmd, filtered_uhd) else {
        return (false, "some partial produced fewer than two non-empty completions".into());
    };
    (
        uhd < 0.2 && tmd > 0.0 && filtered_uhd <= uhd,
        format!("16 partials × 10: mean UHD {uhd:.4} (< 0.2), mean TMD {tmd:.2e} (> 0), CONS-filtered UHD {filtered_uhd:.4} (≤ unfiltered)"),
    )
}

fn finetune_diversity(f: &mut Fixture) -> Outcome {
    let t = trained!(f);
    let before = completion_summary(&before_finetune(f, &t)).1;
    let after = completion_summary(&complete_all(&t, &t.finetuned, "finetuned_completions", None)).1;
    let (Some(before), Some(after)) = (before, after) else {
        return (false, "some partial produced fewer than two non-empty completions".into());
    };
    (after >= before, format!("mean TMD before {before:.3e}, after {after:.3e}"))
}

fn guidance_degeneracy(f: &mut Fixture) -> Outcome {
    let t = trained!(f);
    let models = Models::load(&t.cond).unwrap();
    let (_, cloud, _) = &test_records(&t.data)[0];
    let tape = Tape::inference();
    let points = Tensor::new(vec![1, 64, 3], cloud.points()[..64].iter().flatten().copied().collect()).unwrap();
    let pi = models.denoiser.encode_condition(&tape, &tape.constant(points)).unwrap();
    let n = 4;
    let cond = Tensor::new(vec![n, pi.value().data().len()], pi.value().data().repeat(n)).unwrap();
    let run = |force| {
        let mut rngs = dsdf_core::pipeline::sample_streams(7, n);
        let guidance = Guidance { omega: 0.0, force };
        sample(&models.denoiser, &models.schedule, Some(&cond), guidance, &mut rngs).unwrap()
    };
    let (bypassed, combined) = (run(false), run(true));
    let same = bypassed.data().iter().zip(combined.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    (same, format!("{n} conditional samples, guided path at ω = 0 {} the bypass bit for bit", if same { "equals" } else { "differs from" }))
}

// ---------------------------------------------------------------- determinism

fn cli_determinism(_: &mut Fixture) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let config = s(&tiny_config(d));
    let data = d.join("data");
    let mut checked: BTreeMap<&str, usize> = BTreeMap::new();
    let mut run = |name: &'static str, args: &[String], out: &Path| {
        let files = rerun_matches(args, out);
        checked.insert(name, files.len());
    };
    let v = |xs: &[&str]| xs.iter().map(|x| x.to_string()).collect::<Vec<_>>();
    run("gen-data", &v(&["gen-data", "--out", &s(&data), "--train", "6", "--test", "2", "--points", "256"]), &data);
    let models = d.join("models");
    run("train-mod", &v(&["train-mod", "--data", &s(&data), "--out", &s(&models), "--config", &config]), &models);
    let latents = d.join("latents");
    run(
        "extract-latents",
        &v(&["extract-latents", "--ckpt", &s(&models), "--data", &s(&data), "--out", &s(&latents)]),
        &latents,
    );
    let diff = d.join("diff");
    run(
        "train-diff",
        &v(&[
            "train-diff", "--latents", &s(&latents), "--modulation", &s(&models), "--out", &s(&diff), "--config",
            &config, "--conditioning", "cross-attention",
        ]),
        &diff,
    );
    fs::copy(diff.join("diffusion.dsdf"), models.join("diffusion.dsdf")).unwrap();
    let ft = d.join("ft");
    run(
        "finetune",
        &v(&["finetune", "--ckpt", &s(&models), "--data", &s(&data), "--out", &s(&ft), "--config", &config]),
        &ft,
    );
    let samples = d.join("samples");
    run(
        "sample",
        &v(&["sample", "--ckpt", &s(&models), "--n", "3", "--resolution", "16", "--out", &s(&samples)]),
        &samples,
    );
    let cloud = fs::read_dir(data.join("clouds")).unwrap().map(|e| e.unwrap().path()).min().unwrap();
    let comp = d.join("complete");
    run(
        "complete",
        &v(&["complete", "--ckpt", &s(&models), "--partial", &s(&cloud), "--n", "3", "--resolution", "16", "--out", &s(&comp)]),
        &comp,
    );
    let ev = d.join("eval");
    run(
        "eval",
        &v(&[
            "eval", "--mode", "uncond", "--gen", &s(&samples), "--ref", &s(&data.join("clouds")), "--points", "64",
            "--out", &s(&ev.join("report.json")),
        ]),
        &ev,
    );
    let mesh = d.join("mesh");
    run(
        "mesh",
        &v(&[
            "mesh", "--ckpt", &s(&models), "--latents", &s(&samples.join("latents.dsdf")), "--resolution", "16",
            "--out", &s(&mesh.join("shape.obj")),
        ]),
        &mesh,
    );
    let summary: Vec<String> = checked.iter().map(|(k, n)| format!("{k} ({n} files)")).collect();
    (checked.len() == 9, format!("byte-identical reruns: {}", summary.join(", ")))
}
