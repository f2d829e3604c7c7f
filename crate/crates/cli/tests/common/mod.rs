#![allow(dead_code)]

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub fn dsdf<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dsdf")).args(args).output().expect("binary runs")
}

/// Runs a command that must succeed and returns its stdout.
pub fn ok<S: AsRef<std::ffi::OsStr>>(args: &[S]) -> String {
    let out = dsdf(args);
    assert!(
        out.status.success(),
        "dsdf {:?} failed: {}",
        args.iter().map(|a| a.as_ref().to_string_lossy().into_owned()).collect::<Vec<_>>(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

/// Every file under `dir` with its bytes, keyed by relative path.
pub fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        let mut entries: Vec<_> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for p in entries {
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}

/// Runs `args` twice and checks the files under `dir` come out byte-identical.
pub fn rerun_matches<S: AsRef<std::ffi::OsStr>>(args: &[S], dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let first_stdout = ok(args);
    let first = snapshot(dir);
    let second_stdout = ok(args);
    let second = snapshot(dir);
    assert_eq!(first_stdout, second_stdout, "stdout differs between runs");
    assert_eq!(first.keys().collect::<Vec<_>>(), second.keys().collect::<Vec<_>>());
    for (path, bytes) in &first {
        assert!(bytes == &second[path], "{} differs between runs", path.display());
    }
    first
}

/// A training config small enough for every phase to finish in seconds.
pub fn tiny_config(dir: &Path) -> PathBuf {
    let path = dir.join("tiny.json");
    let config = serde_json::json!({
        "steps": 4,
        "batch_size": 2,
        "learning_rate": 1e-3,
        "queries_per_shape": 16,
        "encoder_points": 32,
        "log_every": 2,
        "checkpoint_every": 2,
        "modulation": {
            "feature_dim": 8, "latent_dim": 4, "point_hidden": 8,
            "vae_hidden": 8, "sdf_hidden": 8, "sdf_layers": 2
        },
        "denoiser": { "model_dim": 8, "blocks": 1, "heads": 1, "time_dim": 8 },
        "schedule": { "steps": 10 }
    });
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

pub fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}
