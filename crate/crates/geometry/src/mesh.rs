//! Triangle meshes and area-uniform surface sampling.

use std::collections::HashMap;

use rand::Rng;

use crate::cloud::PointCloud;
use crate::error::{GeometryError, Result};
use crate::shape::{norm, Point};

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mesh {
    pub vertices: Vec<Point>,
    pub triangles: Vec<[usize; 3]>,
}

fn cross(a: Point, b: Point) -> Point {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

impl Mesh {
    /// Builds a mesh, checking that every index refers to a vertex.
    pub fn new(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Result<Self> {
        for (t, tri) in triangles.iter().enumerate() {
            if let Some(&index) = tri.iter().find(|&&i| i >= vertices.len()) {
                return Err(GeometryError::BadIndex {
                    triangle: t,
                    index,
                    count: vertices.len(),
                });
            }
        }
        Ok(Self {
            vertices,
            triangles,
        })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// True when the mesh has no triangles, e.g. a field without a sign change.
    pub fn is_empty(&self) -> bool {
        self.triangles.is_empty()
    }

    pub fn triangle_area(&self, t: usize) -> f64 {
        let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
        0.5 * norm(cross(sub(b, a), sub(c, a)))
    }

    pub fn area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.triangle_area(t)).sum()
    }

    /// How many triangles use each undirected edge.
    pub fn edge_uses(&self) -> HashMap<(usize, usize), usize> {
        let mut uses = HashMap::new();
        for tri in &self.triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *uses.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        uses
    }

    /// Every edge is shared by exactly two triangles.
    pub fn is_watertight(&self) -> bool {
        !self.is_empty() && self.edge_uses().values().all(|&n| n == 2)
    }

    /// `V − E + F` over the vertices referenced by triangles.
    pub fn euler_characteristic(&self) -> i64 {
        let mut used = vec![false; self.vertices.len()];
        for &i in self.triangles.iter().flatten() {
            used[i] = true;
        }
        let v = used.iter().filter(|&&u| u).count() as i64;
        v - self.edge_uses().len() as i64 + self.triangles.len() as i64
    }

    /// `n` points with triangles chosen in proportion to area and uniform
    /// barycentric coordinates within each triangle.
    pub fn sample_points<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<PointCloud> {
        if self.is_empty() {
            return Err(GeometryError::EmptyMesh);
        }
        if n == 0 {
            return Err(GeometryError::EmptyCloud { op: "mesh_sample_points" });
        }
        let mut cumulative = Vec::with_capacity(self.triangles.len());
        let mut total = 0.0;
        for t in 0..self.triangles.len() {
            total += self.triangle_area(t);
            cumulative.push(total);
        }
        if total <= 0.0 {
            return Err(GeometryError::EmptyMesh);
        }
        let points = (0..n)
            .map(|_| {
                let u = rng.random::<f64>() * total;
                let t = cumulative.partition_point(|&c| c <= u).min(cumulative.len() - 1);
                let [a, b, c] = self.triangles[t].map(|i| self.vertices[i]);
                let s = rng.random::<f64>().sqrt();
                let r = rng.random::<f64>();
                let (wa, wb, wc) = (1.0 - s, s * (1.0 - r), s * r);
                std::array::from_fn(|k| wa * a[k] + wb * b[k] + wc * c[k])
            })
            .collect();
        PointCloud::new(points)
    }
}
