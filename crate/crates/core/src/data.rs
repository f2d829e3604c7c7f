//! On-disk datasets: procedural shapes with surface clouds, and extracted
//! latents linked back to their condition clouds.
//!
//! A dataset directory holds `manifest.json`, `shapes/<id>.json` and
//! `clouds/<id>.xyz`; manifest paths are relative to the manifest.

use std::fs;
use std::path::{Path, PathBuf};

use dsdf_geometry::{io, random_shape, sample_surface, Category, PointCloud, ShapeSpec};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::rng::{substream, Stream};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const DEFAULT_CLOUD_POINTS: usize = 2048;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub category: Category,
    pub shape: PathBuf,
    pub cloud: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub seed: u64,
    pub cloud_points: usize,
    pub entries: Vec<ManifestEntry>,
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CoreError::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CoreError::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub(crate) fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| CoreError::io(path, e))
}

/// Writes `n_train + n_test` shapes cycling through the categories. Shape `i`
/// depends only on `(seed, i)`.
pub fn generate_dataset(out: &Path, n_train: usize, n_test: usize, seed: u64, cloud_points: usize) -> Result<Manifest> {
    if cloud_points == 0 {
        return Err(CoreError::Config("cloud point count must be positive".into()));
    }
    create_dir(&out.join("shapes"))?;
    create_dir(&out.join("clouds"))?;
    let mut entries = Vec::with_capacity(n_train + n_test);
    for i in 0..n_train + n_test {
        let mut rng = substream(seed, Stream::Dataset, i as u64);
        let category = Category::ALL[i % Category::ALL.len()];
        let spec = random_shape(category, &mut rng);
        let cloud = sample_surface(&spec, cloud_points, &mut rng)?;
        let id = format!("{i:05}");
        let entry = ManifestEntry {
            split: if i < n_train { Split::Train } else { Split::Test },
            category,
            shape: PathBuf::from(format!("shapes/{id}.json")),
            cloud: PathBuf::from(format!("clouds/{id}.xyz")),
            id,
        };
        io::write_shape(out.join(&entry.shape), &spec)?;
        io::write_xyz(out.join(&entry.cloud), &cloud)?;
        entries.push(entry);
    }
    let manifest = Manifest {
        seed,
        cloud_points,
        entries,
    };
    write_json(&out.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone)]
pub struct ShapeRecord {
    pub entry: ManifestEntry,
    pub spec: ShapeSpec,
    pub cloud: PointCloud,
    /// Absolute or caller-relative path of the cloud file.
    pub cloud_path: PathBuf,
}

/// A loaded dataset; every referenced file is read up front.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
    pub records: Vec<ShapeRecord>,
}

impl Dataset {
    /// Accepts either the manifest file or the directory containing it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let manifest_path = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest: Manifest = read_json(&manifest_path)?;
        let mut records = Vec::with_capacity(manifest.entries.len());
        for entry in &manifest.entries {
            let spec = io::read_shape(root.join(&entry.shape))?;
            let cloud_path = root.join(&entry.cloud);
            let cloud = io::read_xyz(&cloud_path)?;
            records.push(ShapeRecord {
                entry: entry.clone(),
                spec,
                cloud,
                cloud_path,
            });
        }
        Ok(Self {
            root,
            manifest,
            records,
        })
    }

    pub fn split(&self, split: Split) -> Vec<&ShapeRecord> {
        self.records.iter().filter(|r| r.entry.split == split).collect()
    }
}

/// Links row `index` of a latent file to its shape and condition cloud.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentEntry {
    pub index: usize,
    pub id: String,
    pub split: Split,
    pub category: Category,
    pub cloud: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatentManifest {
    /// Latent file, relative to the manifest.
    pub latents: PathBuf,
    pub dim: usize,
    pub entries: Vec<LatentEntry>,
}
