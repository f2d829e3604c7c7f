//! Point clouds, surface and query sampling, and viewpoint cropping.

use rand::Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::error::{GeometryError, Result};
use crate::shape::{Point, ShapeSpec};

/// Candidates are drawn within this distance of the surface before projection.
const SURFACE_BAND: f64 = 0.05;
pub const SURFACE_TOLERANCE: f64 = 1e-6;
const PROJECTION_STEPS: usize = 64;
const GRADIENT_STEP: f64 = 1e-7;
const MAX_CANDIDATES_PER_POINT: usize = 100_000;

pub const CROP_INPUT: usize = 128;
pub const CROP_KEEP: usize = 64;

/// Non-empty set of finite 3D points.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<Point>,
}

impl PointCloud {
    pub fn new(points: Vec<Point>) -> Result<Self> {
        if points.is_empty() {
            return Err(GeometryError::EmptyCloud { op: "point cloud" });
        }
        if let Some(index) = points.iter().position(|p| p.iter().any(|v| !v.is_finite())) {
            return Err(GeometryError::NonFinite {
                op: "point cloud",
                index,
            });
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Row-major `[x0, y0, z0, x1, ...]`.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    /// `n` points drawn uniformly without replacement (all points if `n ≥ len`).
    pub fn subsample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> PointCloud {
        if n >= self.len() {
            return self.clone();
        }
        let mut idx = rand::seq::index::sample(rng, self.len(), n).into_vec();
        idx.sort_unstable();
        PointCloud {
            points: idx.into_iter().map(|i| self.points[i]).collect(),
        }
    }
}

/// Query points with their ground-truth signed distances.
#[derive(Debug, Clone, PartialEq)]
pub struct SdfSamples {
    pub points: Vec<Point>,
    pub distances: Vec<f64>,
}

impl SdfSamples {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Newton-style projection `p ← p − f(p)·∇f/|∇f|²` onto the zero set.
fn project(spec: &ShapeSpec, mut p: Point) -> Option<Point> {
    for _ in 0..=PROJECTION_STEPS {
        let d = spec.sdf(p);
        if d.abs() < SURFACE_TOLERANCE {
            return p.iter().all(|v| v.abs() <= 1.0).then_some(p);
        }
        let g = spec.gradient(p, GRADIENT_STEP);
        let g2 = g[0] * g[0] + g[1] * g[1] + g[2] * g[2];
        if g2 < 1e-12 {
            return None;
        }
        for i in 0..3 {
            p[i] -= d * g[i] / g2;
        }
    }
    None
}

/// `n` points on the zero level set: uniform candidates near the surface,
/// projected along the gradient; candidates that fail to converge are redrawn.
pub fn sample_surface<R: Rng + ?Sized>(spec: &ShapeSpec, n: usize, rng: &mut R) -> Result<PointCloud> {
    if n == 0 {
        return Err(GeometryError::EmptyCloud { op: "sample_surface" });
    }
    let region = spec.bounds().padded(SURFACE_BAND);
    if region.is_empty() {
        return Err(GeometryError::Sampling("shape has empty bounds".into()));
    }
    let mut points = Vec::with_capacity(n);
    let mut attempts = 0usize;
    while points.len() < n {
        attempts += 1;
        if attempts > MAX_CANDIDATES_PER_POINT * n {
            return Err(GeometryError::Sampling(format!(
                "only {} of {n} points after {attempts} candidates",
                points.len()
            )));
        }
        let c: Point = std::array::from_fn(|i| rng.random_range(region.lo[i]..=region.hi[i]));
        if spec.sdf(c).abs() > SURFACE_BAND {
            continue;
        }
        if let Some(p) = project(spec, c) {
            points.push(p);
        }
    }
    PointCloud::new(points)
}

fn uniform_in_cube<R: Rng + ?Sized>(rng: &mut R) -> Point {
    std::array::from_fn(|_| rng.random_range(-1.0..=1.0))
}

/// `round(near_fraction·m)` surface points jittered by `N(0, noise_std²)` per
/// coordinate (clamped to the cube), followed by uniform points in `[-1, 1]³`.
pub fn sample_queries<R: Rng + ?Sized>(
    spec: &ShapeSpec,
    m: usize,
    near_fraction: f64,
    noise_std: f64,
    rng: &mut R,
) -> Result<SdfSamples> {
    if !(0.0..=1.0).contains(&near_fraction) {
        return Err(GeometryError::InvalidShape(format!(
            "near fraction {near_fraction} outside [0, 1]"
        )));
    }
    let near = ((near_fraction * m as f64).round() as usize).min(m);
    let mut points = Vec::with_capacity(m);
    if near > 0 {
        let noise = Normal::new(0.0, noise_std)
            .map_err(|e| GeometryError::InvalidShape(format!("noise std {noise_std}: {e}")))?;
        for p in sample_surface(spec, near, rng)?.into_points() {
            points.push(p.map(|v| (v + noise.sample(rng)).clamp(-1.0, 1.0)));
        }
    }
    while points.len() < m {
        points.push(uniform_in_cube(rng));
    }
    let distances = points.iter().map(|&p| spec.sdf(p)).collect();
    Ok(SdfSamples { points, distances })
}

/// Uniformly random unit vector.
pub fn random_viewpoint<R: Rng + ?Sized>(rng: &mut R) -> Point {
    UnitSphere.sample(rng)
}

fn squared_distance(a: Point, b: Point) -> f64 {
    let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

/// Keeps the `keep` points nearest to `viewpoint` in their original order;
/// ties go to the lower index.
pub fn crop_from_viewpoint(cloud: &PointCloud, viewpoint: Point, keep: usize) -> PointCloud {
    let mut order: Vec<(f64, usize)> = cloud
        .points
        .iter()
        .enumerate()
        .map(|(i, &p)| (squared_distance(p, viewpoint), i))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = order.iter().take(keep.max(1)).map(|&(_, i)| i).collect();
    kept.sort_unstable();
    PointCloud {
        points: kept.into_iter().map(|i| cloud.points[i]).collect(),
    }
}

/// Removes the 64 points furthest from a random viewpoint on the unit sphere.
pub fn crop_partial<R: Rng + ?Sized>(cloud: &PointCloud, rng: &mut R) -> Result<PointCloud> {
    if cloud.len() != CROP_INPUT {
        return Err(GeometryError::CropSize {
            expected: CROP_INPUT,
            got: cloud.len(),
        });
    }
    Ok(crop_from_viewpoint(cloud, random_viewpoint(rng), CROP_KEEP))
}
