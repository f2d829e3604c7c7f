use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dsdf_core::metrics::{cov, mmd, one_nna, tmd, uhd};
use dsdf_core::pipeline::{
    extract_latents, finetune_end_to_end, load_latents, load_modulation, mesh_cloud, sample_latents, train_diffusion,
    train_modulation, DIFFUSION_FILE, MODULATION_FILE,
};
use dsdf_core::{
    generate_dataset, substream, Checkpoint, Dataset, EvalReport, GenerateOptions, LatentSet, Models, Stream,
    TrainConfig,
};
use dsdf_geometry::{crop_partial, hausdorff_unidirectional, io, PointCloud, CROP_INPUT};
use serde::Serialize;
use serde_json::{json, Value};

use crate::{
    CliError, Command, CompleteArgs, EvalArgs, EvalMode, ExtractArgs, FinetuneArgs, GenDataArgs, MeshArgs, Result,
    SampleArgs, TrainDiffArgs, TrainModArgs,
};

/// Points sampled from each completion mesh for UHD and TMD.
const COMPLETION_POINTS: usize = 2048;

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(&a),
        Command::TrainMod(a) => train_mod(&a),
        Command::ExtractLatents(a) => extract(&a),
        Command::TrainDiff(a) => train_diff(&a),
        Command::Finetune(a) => finetune(&a),
        Command::Sample(a) => sample(&a),
        Command::Complete(a) => complete(&a),
        Command::Eval(a) => eval(&a),
        Command::Mesh(a) => mesh(&a),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CliError::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

/// Prints the resolved settings and writes them to `sidecar`.
fn echo(command: &str, settings: Value, sidecar: &Path) -> Result<()> {
    let value = json!({ "command": command, "settings": settings });
    println!("{}", serde_json::to_string_pretty(&value)?);
    write_json(sidecar, &value)
}

fn sidecar_in(dir: &Path, command: &str) -> PathBuf {
    dir.join(format!("{command}.config.json"))
}

fn sidecar_beside(file: &Path) -> PathBuf {
    file.with_extension("config.json")
}

fn validated(config: TrainConfig) -> Result<TrainConfig> {
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok(config)
}

fn file_in(path: &Path, name: &str) -> PathBuf {
    if path.is_dir() {
        path.join(name)
    } else {
        path.to_path_buf()
    }
}

fn config_of(ckpt: &Checkpoint) -> Result<TrainConfig> {
    Ok(TrainConfig::from_json(&ckpt.config)?)
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    create_dir(&a.out)?;
    echo("gen-data", serde_json::to_value(a)?, &sidecar_in(&a.out, "gen-data"))?;
    let manifest = generate_dataset(&a.out, a.train, a.test, a.seed, a.points)?;
    eprintln!("wrote {} shapes to {}", manifest.entries.len(), a.out.display());
    Ok(())
}

fn train_mod(a: &TrainModArgs) -> Result<()> {
    let config = validated(a.train.resolve()?)?;
    create_dir(&a.out)?;
    let settings = json!({ "data": a.data, "out": a.out, "resume": a.resume, "config": config });
    echo("train-mod", settings, &sidecar_in(&a.out, "train-mod"))?;
    let data = Dataset::load(&a.data)?;
    let resume = match a.resume {
        true => Some(Checkpoint::load(a.out.join(MODULATION_FILE))?),
        false => None,
    };
    let out = train_modulation(&config, &data, &a.out, resume.as_ref())?;
    if let Some(l) = out.step_losses.last() {
        eprintln!("modulation: {} steps, final loss {l:.6}", out.step_losses.len());
    }
    Ok(())
}

fn extract(a: &ExtractArgs) -> Result<()> {
    create_dir(&a.out)?;
    echo("extract-latents", serde_json::to_value(a)?, &sidecar_in(&a.out, "extract-latents"))?;
    let ckpt = Checkpoint::load(file_in(&a.ckpt, MODULATION_FILE))?;
    let data = Dataset::load(&a.data)?;
    let (latents, _) = extract_latents(&ckpt, &data, &a.out)?;
    eprintln!("extracted {} latents of dimension {}", latents.len(), latents.dim);
    Ok(())
}

fn train_diff(a: &TrainDiffArgs) -> Result<()> {
    let mut config = a.train.resolve()?;
    let (latents, manifest) = load_latents(&a.latents)?;
    let modulation = match &a.modulation {
        Some(p) => {
            let ckpt = Checkpoint::load(file_in(p, MODULATION_FILE))?;
            config.modulation = config_of(&ckpt)?.modulation;
            Some(ckpt)
        }
        None => {
            config.modulation.latent_dim = latents.dim;
            None
        }
    };
    let config = validated(config)?;
    create_dir(&a.out)?;
    let settings = json!({
        "latents": a.latents,
        "modulation": a.modulation,
        "out": a.out,
        "resume": a.resume,
        "config": config,
    });
    echo("train-diff", settings, &sidecar_in(&a.out, "train-diff"))?;
    let resume = match a.resume {
        true => Some(Checkpoint::load(a.out.join(DIFFUSION_FILE))?),
        false => None,
    };
    let psi = modulation.as_ref().map(|c| &c.tensors);
    let out = train_diffusion(&config, &latents, &manifest, psi, &a.out, resume.as_ref())?;
    if let Some(l) = out.step_losses.last() {
        eprintln!("diffusion: {} steps, final loss {l:.6}", out.step_losses.len());
    }
    Ok(())
}

fn finetune(a: &FinetuneArgs) -> Result<()> {
    let mut config = a.train.resolve()?;
    config.freeze_sdf |= a.freeze_sdf;
    config.freeze_denoiser |= a.freeze_denoiser;
    let mod_ckpt = Checkpoint::load(a.ckpt.join(MODULATION_FILE))?;
    let diff_ckpt = Checkpoint::load(a.ckpt.join(DIFFUSION_FILE))?;
    let diff_config = config_of(&diff_ckpt)?;
    config.modulation = config_of(&mod_ckpt)?.modulation;
    config.denoiser = diff_config.denoiser;
    config.schedule = diff_config.schedule;
    let config = validated(config)?;
    create_dir(&a.out)?;
    let settings = json!({ "ckpt": a.ckpt, "data": a.data, "out": a.out, "config": config });
    echo("finetune", settings, &sidecar_in(&a.out, "finetune"))?;
    let data = Dataset::load(&a.data)?;
    let out = finetune_end_to_end(&config, &data, &mod_ckpt, &diff_ckpt, &a.out)?;
    if let Some(l) = out.step_losses.last() {
        eprintln!("finetune: {} steps, final loss {l:.6}", out.step_losses.len());
    }
    Ok(())
}

fn save_latents(models: &Models, latents: &[&[f64]], path: &Path) -> Result<()> {
    let values = latents.iter().flat_map(|z| z.iter().copied()).collect();
    Ok(LatentSet::new(models.modulation.latent_dim(), values)?.save(path)?)
}

#[derive(Serialize)]
struct SampleEntry {
    index: usize,
    mesh: String,
    empty: bool,
    vertices: usize,
    triangles: usize,
}

fn sample(a: &SampleArgs) -> Result<()> {
    create_dir(&a.out)?;
    echo("sample", serde_json::to_value(a)?, &sidecar_in(&a.out, "sample"))?;
    let models = Models::load(&a.ckpt)?;
    let options = GenerateOptions {
        n: a.n,
        resolution: a.resolution,
        seed: a.seed,
        ..GenerateOptions::default()
    };
    let gens = sample_latents(&models, None, &options)?;
    let mut entries = Vec::with_capacity(gens.len());
    for (index, g) in gens.iter().enumerate() {
        let mesh = models.modulation.reconstruct_mesh(&g.latent, a.resolution)?;
        let name = format!("sample_{index:03}.obj");
        io::write_obj(a.out.join(&name), &mesh)?;
        entries.push(SampleEntry {
            index,
            mesh: name,
            empty: mesh.is_empty(),
            vertices: mesh.vertices.len(),
            triangles: mesh.triangles.len(),
        });
    }
    let latents: Vec<&[f64]> = gens.iter().map(|g| g.latent.as_slice()).collect();
    save_latents(&models, &latents, &a.out.join("latents.dsdf"))?;
    let empty = entries.iter().filter(|e| e.empty).count();
    write_json(&a.out.join("samples.json"), &json!({ "samples": entries, "empty": empty }))?;
    eprintln!("sampled {} shapes, {empty} empty", entries.len());
    Ok(())
}

/// The partial input for `complete`: the cloud itself with `raw`, otherwise
/// 128 random points cropped to the 64 nearest a random viewpoint.
fn partial_input(cloud: &PointCloud, raw: bool, seed: u64) -> Result<PointCloud> {
    if raw {
        return Ok(cloud.clone());
    }
    if cloud.len() < CROP_INPUT {
        return Err(CliError::Usage(format!(
            "partial cloud has {} points; cropping needs at least {CROP_INPUT} (or pass --raw-partial)",
            cloud.len()
        )));
    }
    let mut rng = substream(seed, Stream::Crop, 0);
    Ok(crop_partial(&cloud.subsample(CROP_INPUT, &mut rng), &mut rng)?)
}

#[derive(Serialize)]
struct CompletionEntry {
    index: usize,
    cons: f64,
    /// `None` when filtered out by the CONS threshold.
    mesh: Option<String>,
    empty: bool,
    uhd: Option<f64>,
}

fn complete(a: &CompleteArgs) -> Result<()> {
    create_dir(&a.out)?;
    echo("complete", serde_json::to_value(a)?, &sidecar_in(&a.out, "complete"))?;
    let models = Models::load(&a.ckpt)?;
    let partial = partial_input(&io::read_xyz(&a.partial)?, a.raw_partial, a.seed)?;
    io::write_xyz(a.out.join("partial.xyz"), &partial)?;
    let options = GenerateOptions {
        n: a.n,
        resolution: a.resolution,
        omega: a.omega,
        seed: a.seed,
        cons_threshold: a.cons_threshold,
        signed_cons: a.signed_cons,
    };
    let gens = sample_latents(&models, Some(&partial), &options)?;
    let mut entries = Vec::with_capacity(gens.len());
    let mut clouds = Vec::new();
    for (index, g) in gens.iter().enumerate() {
        let cons = g.cons.expect("conditional samples carry CONS");
        let mut entry = CompletionEntry {
            index,
            cons,
            mesh: None,
            empty: false,
            uhd: None,
        };
        if a.cons_threshold.is_none_or(|t| cons <= t) {
            let mesh = models.modulation.reconstruct_mesh(&g.latent, a.resolution)?;
            let name = format!("completion_{index:03}.obj");
            io::write_obj(a.out.join(&name), &mesh)?;
            entry.mesh = Some(name);
            entry.empty = mesh.is_empty();
            if let Some(cloud) = mesh_cloud(&mesh, COMPLETION_POINTS, a.seed, index as u64)? {
                entry.uhd = Some(hausdorff_unidirectional(&partial, &cloud));
                clouds.push(cloud);
            }
        }
        entries.push(entry);
    }
    let latents: Vec<&[f64]> = gens.iter().map(|g| g.latent.as_slice()).collect();
    save_latents(&models, &latents, &a.out.join("latents.dsdf"))?;
    let uhds: Vec<f64> = entries.iter().filter_map(|e| e.uhd).collect();
    let mean_uhd = (!uhds.is_empty()).then(|| uhds.iter().sum::<f64>() / uhds.len() as f64);
    let tmd = if clouds.len() >= 2 { Some(tmd(&clouds)?) } else { None };
    let report = json!({
        "partial_points": partial.len(),
        "completions": entries,
        "meshed_non_empty": clouds.len(),
        "mean_uhd": mean_uhd,
        "tmd": tmd,
    });
    write_json(&a.out.join("report.json"), &report)?;
    eprintln!("completed {} samples, {} non-empty meshes", entries.len(), clouds.len());
    Ok(())
}

enum Shape {
    Cloud(PointCloud),
    Mesh(dsdf_geometry::Mesh),
}

/// `.xyz` and `.obj` files of a directory in name order, leaving out `skip`.
fn load_shapes(dir: &Path, skip: Option<&Path>) -> Result<Vec<Shape>> {
    let skip = skip.and_then(|p| fs::canonicalize(p).ok());
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| matches!(p.extension().and_then(|e| e.to_str()), Some("xyz" | "obj")))
        .filter(|p| skip.is_none() || fs::canonicalize(p).ok() != skip)
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Usage(format!("{} holds no .xyz or .obj files", dir.display())));
    }
    paths
        .iter()
        .map(|p| match p.extension().and_then(|e| e.to_str()) {
            Some("xyz") => Ok(Shape::Cloud(io::read_xyz(p)?)),
            _ => Ok(Shape::Mesh(io::read_obj(p)?)),
        })
        .collect()
}

/// Evaluation clouds for one run; empty meshes are dropped and counted.
fn clouds_for_run(shapes: &[Shape], points: usize, seed: u64, run: usize, set: u64) -> Result<(Vec<PointCloud>, usize)> {
    let mut out = Vec::with_capacity(shapes.len());
    let mut empty = 0;
    for (j, shape) in shapes.iter().enumerate() {
        let index = ((run as u64) << 40) | (set << 32) | j as u64;
        match shape {
            Shape::Cloud(c) => out.push(c.subsample(points, &mut substream(seed, Stream::Evaluation, index))),
            Shape::Mesh(m) => match mesh_cloud(m, points, seed, index)? {
                Some(c) => out.push(c),
                None => empty += 1,
            },
        }
    }
    Ok((out, empty))
}

fn eval(a: &EvalArgs) -> Result<()> {
    if a.repeats == 0 {
        return Err(CliError::Usage("--repeats must be at least 1".into()));
    }
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    echo("eval", serde_json::to_value(a)?, &sidecar_beside(&a.out))?;
    let start = Instant::now();
    let generated = load_shapes(&a.gen, a.partial.as_deref())?;
    let report = match a.mode {
        EvalMode::Uncond => {
            let dir = a.reference.as_ref().ok_or_else(|| CliError::Usage("uncond mode needs --ref".into()))?;
            let reference = load_shapes(dir, None)?;
            let mut report: Option<EvalReport> = None;
            for run in 0..a.repeats {
                let (g, g_empty) = clouds_for_run(&generated, a.points, a.seed, run, 0)?;
                let (r, r_empty) = clouds_for_run(&reference, a.points, a.seed, run, 1)?;
                let report = report.get_or_insert_with(|| {
                    let counts = [
                        ("generated".to_string(), g.len()),
                        ("reference".to_string(), r.len()),
                        ("generated_empty".to_string(), g_empty),
                        ("reference_empty".to_string(), r_empty),
                        ("points_per_cloud".to_string(), a.points),
                    ];
                    EvalReport::new(a.seed, counts.into())
                });
                let mut run_metrics: BTreeMap<String, f64> =
                    [("MMD".to_string(), mmd(&g, &r)?), ("COV".to_string(), cov(&g, &r)?)].into();
                // 1-NNA compares equal-sized sets only.
                if g.len() == r.len() {
                    run_metrics.insert("1-NNA".to_string(), one_nna(&g, &r)?);
                } else if run == 0 {
                    eprintln!("skipping 1-NNA: {} generated vs {} reference clouds", g.len(), r.len());
                }
                report.push_run(run_metrics);
            }
            report.expect("at least one run")
        }
        EvalMode::Completion => {
            let path = a.partial.as_ref().ok_or_else(|| CliError::Usage("completion mode needs --partial".into()))?;
            let partial = io::read_xyz(path)?;
            let mut report: Option<EvalReport> = None;
            for run in 0..a.repeats {
                let (c, empty) = clouds_for_run(&generated, a.points, a.seed, run, 0)?;
                let report = report.get_or_insert_with(|| {
                    let counts = [
                        ("completions".to_string(), c.len()),
                        ("completions_empty".to_string(), empty),
                        ("partial_points".to_string(), partial.len()),
                        ("points_per_cloud".to_string(), a.points),
                    ];
                    EvalReport::new(a.seed, counts.into())
                });
                report.push_run([("TMD".to_string(), tmd(&c)?), ("UHD".to_string(), uhd(&partial, &c)?)].into());
            }
            report.expect("at least one run")
        }
    };
    let mut report = report;
    if a.wall_clock {
        report.wall_clock_seconds = Some(start.elapsed().as_secs_f64());
    }
    fs::write(&a.out, report.to_json() + "\n").map_err(|e| CliError::io(&a.out, e))?;
    for (name, value) in &report.metrics {
        eprintln!("{name}: {value:.6}");
    }
    Ok(())
}

fn mesh(a: &MeshArgs) -> Result<()> {
    if let Some(dir) = a.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    echo("mesh", serde_json::to_value(a)?, &sidecar_beside(&a.out))?;
    let model = load_modulation(&Checkpoint::load(file_in(&a.ckpt, MODULATION_FILE))?)?;
    let latents = LatentSet::load(&a.latents)?;
    if a.index >= latents.len() {
        return Err(CliError::Usage(format!(
            "index {} out of range for {} latents",
            a.index,
            latents.len()
        )));
    }
    let mesh = model.reconstruct_mesh(latents.row(a.index), a.resolution)?;
    io::write_obj(&a.out, &mesh)?;
    eprintln!("{} vertices, {} triangles", mesh.vertices.len(), mesh.triangles.len());
    Ok(())
}
