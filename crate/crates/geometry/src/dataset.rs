//! Procedural shape families used as training and evaluation data.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::shape::{Point, ShapeSpec};

pub const SPHERE_RADIUS: (f64, f64) = (0.2, 0.7);
pub const BOX_HALF_EXTENT: (f64, f64) = (0.15, 0.6);
pub const TORUS_MAJOR: (f64, f64) = (0.25, 0.5);
pub const TORUS_MINOR: (f64, f64) = (0.05, 0.2);

/// Center offsets per axis for single primitives and for the parts of a union.
const SINGLE_OFFSET: f64 = 0.15;
const PART_OFFSET: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Sphere,
    Box,
    Torus,
    /// Union of two random primitives.
    Mixed,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::Sphere, Category::Box, Category::Torus, Category::Mixed];

    pub fn name(self) -> &'static str {
        match self {
            Category::Sphere => "sphere",
            Category::Box => "box",
            Category::Torus => "torus",
            Category::Mixed => "mixed",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Category::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown category `{s}` (expected sphere, box, torus or mixed)"))
    }
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo..=hi)
}

fn center<R: Rng + ?Sized>(rng: &mut R, offset: f64) -> Point {
    std::array::from_fn(|_| rng.random_range(-offset..=offset))
}

fn primitive<R: Rng + ?Sized>(kind: usize, offset: f64, rng: &mut R) -> ShapeSpec {
    let c = center(rng, offset);
    match kind {
        0 => ShapeSpec::sphere(c, uniform(rng, SPHERE_RADIUS)),
        1 => {
            let h = std::array::from_fn(|_| uniform(rng, BOX_HALF_EXTENT));
            ShapeSpec::cuboid(c, h)
        }
        _ => {
            let major = uniform(rng, TORUS_MAJOR);
            let minor = uniform(rng, TORUS_MINOR);
            ShapeSpec::torus(c, major, minor)
        }
    }
}

/// Random member of `category`, always contained in `[-1, 1]³`.
pub fn random_shape<R: Rng + ?Sized>(category: Category, rng: &mut R) -> ShapeSpec {
    match category {
        Category::Sphere => primitive(0, SINGLE_OFFSET, rng),
        Category::Box => primitive(1, SINGLE_OFFSET, rng),
        Category::Torus => primitive(2, SINGLE_OFFSET, rng),
        Category::Mixed => {
            let a = rng.random_range(0..3);
            let b = rng.random_range(0..3);
            ShapeSpec::union(primitive(a, PART_OFFSET, rng), primitive(b, PART_OFFSET, rng))
        }
    }
}
