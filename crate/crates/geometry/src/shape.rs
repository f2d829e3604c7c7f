//! Analytic shapes and their signed distance functions.

use serde::{Deserialize, Serialize};

use crate::error::{GeometryError, Result};

pub type Point = [f64; 3];

pub const MAX_CSG_DEPTH: usize = 4;

/// Recursive shape description. Tori lie in the xy-plane around their center.
///
/// CSG nodes combine children with `min` (union), `max` (intersection) and
/// `max(a, -b)` (subtraction); the result bounds the true distance rather than
/// matching it exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ShapeSpec {
    Sphere {
        center: Point,
        radius: f64,
    },
    Box {
        center: Point,
        half_extents: Point,
    },
    Torus {
        center: Point,
        major_radius: f64,
        minor_radius: f64,
    },
    Union {
        left: Box<ShapeSpec>,
        right: Box<ShapeSpec>,
    },
    Intersection {
        left: Box<ShapeSpec>,
        right: Box<ShapeSpec>,
    },
    Subtraction {
        left: Box<ShapeSpec>,
        right: Box<ShapeSpec>,
    },
}

/// Axis-aligned box `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds {
    pub lo: Point,
    pub hi: Point,
}

impl Bounds {
    fn around(center: Point, half: Point) -> Self {
        Self {
            lo: [center[0] - half[0], center[1] - half[1], center[2] - half[2]],
            hi: [center[0] + half[0], center[1] + half[1], center[2] + half[2]],
        }
    }

    fn union(self, other: Self) -> Self {
        Self {
            lo: std::array::from_fn(|i| self.lo[i].min(other.lo[i])),
            hi: std::array::from_fn(|i| self.hi[i].max(other.hi[i])),
        }
    }

    fn intersection(self, other: Self) -> Self {
        Self {
            lo: std::array::from_fn(|i| self.lo[i].max(other.lo[i])),
            hi: std::array::from_fn(|i| self.hi[i].min(other.hi[i])),
        }
    }

    pub fn is_empty(&self) -> bool {
        (0..3).any(|i| self.lo[i] > self.hi[i])
    }

    /// Grows by `margin` on every side, then clips to `[-1, 1]³`.
    pub fn padded(&self, margin: f64) -> Self {
        Self {
            lo: self.lo.map(|v| (v - margin).max(-1.0)),
            hi: self.hi.map(|v| (v + margin).min(1.0)),
        }
    }
}

pub(crate) fn norm(v: Point) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl ShapeSpec {
    pub fn sphere(center: Point, radius: f64) -> Self {
        ShapeSpec::Sphere { center, radius }
    }

    pub fn cuboid(center: Point, half_extents: Point) -> Self {
        ShapeSpec::Box {
            center,
            half_extents,
        }
    }

    pub fn torus(center: Point, major_radius: f64, minor_radius: f64) -> Self {
        ShapeSpec::Torus {
            center,
            major_radius,
            minor_radius,
        }
    }

    pub fn union(left: ShapeSpec, right: ShapeSpec) -> Self {
        ShapeSpec::Union {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn intersection(left: ShapeSpec, right: ShapeSpec) -> Self {
        ShapeSpec::Intersection {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn subtraction(left: ShapeSpec, right: ShapeSpec) -> Self {
        ShapeSpec::Subtraction {
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    pub fn is_primitive(&self) -> bool {
        matches!(
            self,
            ShapeSpec::Sphere { .. } | ShapeSpec::Box { .. } | ShapeSpec::Torus { .. }
        )
    }

    fn children(&self) -> Option<(&ShapeSpec, &ShapeSpec)> {
        match self {
            ShapeSpec::Union { left, right }
            | ShapeSpec::Intersection { left, right }
            | ShapeSpec::Subtraction { left, right } => Some((left, right)),
            _ => None,
        }
    }

    /// Number of CSG levels above the deepest primitive; a primitive has depth 0.
    pub fn depth(&self) -> usize {
        match self.children() {
            Some((l, r)) => 1 + l.depth().max(r.depth()),
            None => 0,
        }
    }

    /// Signed distance at `p`: negative inside, positive outside.
    pub fn sdf(&self, p: Point) -> f64 {
        match self {
            ShapeSpec::Sphere { center, radius } => norm(sub(p, *center)) - radius,
            ShapeSpec::Box {
                center,
                half_extents,
            } => {
                let d = sub(p, *center);
                let q: Point = std::array::from_fn(|i| d[i].abs() - half_extents[i]);
                let outside = norm(q.map(|v| v.max(0.0)));
                let inside = q[0].max(q[1]).max(q[2]).min(0.0);
                outside + inside
            }
            ShapeSpec::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let d = sub(p, *center);
                let ring = (d[0] * d[0] + d[1] * d[1]).sqrt() - major_radius;
                (ring * ring + d[2] * d[2]).sqrt() - minor_radius
            }
            ShapeSpec::Union { left, right } => left.sdf(p).min(right.sdf(p)),
            ShapeSpec::Intersection { left, right } => left.sdf(p).max(right.sdf(p)),
            ShapeSpec::Subtraction { left, right } => left.sdf(p).max(-right.sdf(p)),
        }
    }

    /// Central-difference gradient of [`ShapeSpec::sdf`].
    pub fn gradient(&self, p: Point, h: f64) -> Point {
        std::array::from_fn(|i| {
            let mut a = p;
            let mut b = p;
            a[i] += h;
            b[i] -= h;
            (self.sdf(a) - self.sdf(b)) / (2.0 * h)
        })
    }

    /// Conservative axis-aligned bounds of the solid.
    pub fn bounds(&self) -> Bounds {
        match self {
            ShapeSpec::Sphere { center, radius } => Bounds::around(*center, [*radius; 3]),
            ShapeSpec::Box {
                center,
                half_extents,
            } => Bounds::around(*center, *half_extents),
            ShapeSpec::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                let r = major_radius + minor_radius;
                Bounds::around(*center, [r, r, *minor_radius])
            }
            ShapeSpec::Union { left, right } => left.bounds().union(right.bounds()),
            ShapeSpec::Intersection { left, right } => left.bounds().intersection(right.bounds()),
            ShapeSpec::Subtraction { left, .. } => left.bounds(),
        }
    }

    /// Checks parameter signs, the depth limit, and that every primitive lies in `[-1, 1]³`.
    pub fn validate(&self) -> Result<()> {
        if self.depth() > MAX_CSG_DEPTH {
            return Err(GeometryError::InvalidShape(format!(
                "CSG depth {} exceeds {MAX_CSG_DEPTH}",
                self.depth()
            )));
        }
        self.validate_node()
    }

    fn validate_node(&self) -> Result<()> {
        if let Some((l, r)) = self.children() {
            l.validate_node()?;
            return r.validate_node();
        }
        let (center, sizes): (Point, Vec<f64>) = match self {
            ShapeSpec::Sphere { center, radius } => (*center, vec![*radius]),
            ShapeSpec::Box {
                center,
                half_extents,
            } => (*center, half_extents.to_vec()),
            ShapeSpec::Torus {
                center,
                major_radius,
                minor_radius,
            } => {
                if minor_radius >= major_radius {
                    return Err(GeometryError::InvalidShape(format!(
                        "torus minor radius {minor_radius} must be below major radius {major_radius}"
                    )));
                }
                (*center, vec![*major_radius, *minor_radius])
            }
            _ => unreachable!("CSG nodes handled above"),
        };
        if center.iter().chain(&sizes).any(|v| !v.is_finite()) {
            return Err(GeometryError::InvalidShape("non-finite parameter".into()));
        }
        if sizes.iter().any(|&s| s <= 0.0) {
            return Err(GeometryError::InvalidShape(format!(
                "sizes must be positive, got {sizes:?}"
            )));
        }
        let b = self.bounds();
        if b.lo.iter().any(|&v| v < -1.0) || b.hi.iter().any(|&v| v > 1.0) {
            return Err(GeometryError::InvalidShape(format!(
                "primitive extends outside the unit cube: {b:?}"
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("shape specs always serialize")
    }

    /// Parses and validates a JSON shape document.
    pub fn from_json(text: &str) -> Result<Self> {
        let spec: ShapeSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }
}
