//! Evaluation metrics built on the squared chamfer distance: MMD, COV and
//! 1-NNA for generated sets, TMD and UHD for completions, and CONS for
//! agreement between a decoded field and its conditioning points.

use std::collections::BTreeMap;

use dsdf_geometry::{chamfer_with_trees, hausdorff_unidirectional, KdTree, PointCloud};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::modulation::ModulationModel;

/// Tag describing the distance every set metric is built on.
pub const DISTANCE_TAG: &str = "chamfer: mean squared nearest-neighbour distance a→b plus b→a";

fn fail(metric: &'static str, detail: impl Into<String>) -> CoreError {
    CoreError::Metric {
        metric,
        detail: detail.into(),
    }
}

fn check_sets(metric: &'static str, generated: &[PointCloud], reference: &[PointCloud]) -> Result<()> {
    if generated.is_empty() || reference.is_empty() {
        return Err(fail(metric, "generated and reference sets must be non-empty"));
    }
    let n = reference[0].len();
    if let Some(c) = generated.iter().chain(reference).find(|c| c.len() != n) {
        return Err(fail(metric, format!("clouds must share a point count: {} vs {n}", c.len())));
    }
    Ok(())
}

/// `out[i][j] = CD(a[i], b[j])`.
pub fn chamfer_matrix(a: &[PointCloud], b: &[PointCloud]) -> Vec<Vec<f64>> {
    let ta: Vec<KdTree> = a.iter().map(|c| KdTree::new(c.points())).collect();
    let tb: Vec<KdTree> = b.iter().map(|c| KdTree::new(c.points())).collect();
    a.iter()
        .zip(&ta)
        .map(|(ca, ta)| b.iter().zip(&tb).map(|(cb, tb)| chamfer_with_trees(ca, ta, cb, tb)).collect())
        .collect()
}

/// Index of the smallest value; ties go to the lowest index.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Minimum matching distance: mean over reference clouds of the smallest CD
/// to any generated cloud.
pub fn mmd(generated: &[PointCloud], reference: &[PointCloud]) -> Result<f64> {
    check_sets("MMD", generated, reference)?;
    let d = chamfer_matrix(generated, reference);
    let total: f64 = (0..reference.len())
        .map(|j| d.iter().map(|row| row[j]).fold(f64::INFINITY, f64::min))
        .sum();
    Ok(total / reference.len() as f64)
}

/// Coverage: fraction of reference clouds that are the nearest reference of
/// at least one generated cloud.
pub fn cov(generated: &[PointCloud], reference: &[PointCloud]) -> Result<f64> {
    check_sets("COV", generated, reference)?;
    let d = chamfer_matrix(generated, reference);
    let mut hit = vec![false; reference.len()];
    for row in &d {
        hit[argmin(row.iter().copied())] = true;
    }
    Ok(hit.iter().filter(|&&h| h).count() as f64 / reference.len() as f64)
}

/// Leave-one-out 1-nearest-neighbour accuracy over the union of both sets.
/// When the nearest distance is shared by clouds of both labels, the
/// prediction is "reference".
pub fn one_nna(generated: &[PointCloud], reference: &[PointCloud]) -> Result<f64> {
    check_sets("1-NNA", generated, reference)?;
    if generated.len() != reference.len() {
        return Err(fail(
            "1-NNA",
            format!("set sizes differ: {} generated vs {} reference", generated.len(), reference.len()),
        ));
    }
    let all: Vec<PointCloud> = generated.iter().chain(reference).cloned().collect();
    let n_gen = generated.len();
    let d = chamfer_matrix(&all, &all);
    let mut correct = 0usize;
    for (i, row) in d.iter().enumerate() {
        let best = row
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .map(|(_, &v)| v)
            .fold(f64::INFINITY, f64::min);
        let predicts_reference = row
            .iter()
            .enumerate()
            .any(|(j, &v)| j != i && j >= n_gen && v == best);
        if predicts_reference == (i >= n_gen) {
            correct += 1;
        }
    }
    Ok(correct as f64 / all.len() as f64)
}

/// Total mutual difference: mean over completions of the average CD to the
/// other completions.
pub fn tmd(completions: &[PointCloud]) -> Result<f64> {
    let k = completions.len();
    if k < 2 {
        return Err(fail("TMD", format!("needs at least two completions, got {k}")));
    }
    let d = chamfer_matrix(completions, completions);
    let total: f64 = d
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let s: f64 = row.iter().enumerate().filter(|&(j, _)| j != i).map(|(_, &v)| v).sum();
            s / (k - 1) as f64
        })
        .sum();
    Ok(total / k as f64)
}

/// Mean over completions of the unidirectional Hausdorff distance from the
/// partial cloud.
pub fn uhd(partial: &PointCloud, completions: &[PointCloud]) -> Result<f64> {
    if completions.is_empty() {
        return Err(fail("UHD", "no completions"));
    }
    let total: f64 = completions.iter().map(|c| hausdorff_unidirectional(partial, c)).sum();
    Ok(total / completions.len() as f64)
}

/// Mean decoded signed distance `Φ(p | z)` over the partial points; the
/// magnitude is taken per point unless `signed` is set.
pub fn cons(model: &ModulationModel, z: &[f64], partial: &PointCloud, signed: bool) -> Result<f64> {
    let values = model.sdf_values(z, partial.points())?;
    Ok(cons_from_values(&values, signed))
}

pub fn cons_from_values(values: &[f64], signed: bool) -> f64 {
    let total: f64 = if signed {
        values.iter().sum()
    } else {
        values.iter().map(|v| v.abs()).sum()
    };
    total / values.len() as f64
}

/// Metric values with the sample counts they were computed from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Best value of each metric across runs.
    pub metrics: BTreeMap<String, f64>,
    pub sample_counts: BTreeMap<String, usize>,
    pub distance: String,
    pub seed: u64,
    /// Every run's values, in run order.
    pub runs: Vec<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_clock_seconds: Option<f64>,
}

impl EvalReport {
    pub fn new(seed: u64, sample_counts: BTreeMap<String, usize>) -> Self {
        Self {
            metrics: BTreeMap::new(),
            sample_counts,
            distance: DISTANCE_TAG.to_string(),
            seed,
            runs: Vec::new(),
            wall_clock_seconds: None,
        }
    }

    /// Records one run and updates the best-of values: lowest MMD, TMD, UHD
    /// and CONS, highest COV, and 1-NNA closest to 0.5.
    pub fn push_run(&mut self, run: BTreeMap<String, f64>) {
        for (name, &v) in &run {
            let better = match self.metrics.get(name) {
                None => true,
                Some(&old) => match name.as_str() {
                    "COV" => v > old,
                    "1-NNA" => (v - 0.5).abs() < (old - 0.5).abs(),
                    _ => v < old,
                },
            };
            if better {
                self.metrics.insert(name.clone(), v);
            }
        }
        self.runs.push(run);
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("reports always serialize")
    }
}
