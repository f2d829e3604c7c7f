//! Scalar lattices over `[-1, 1]³` and iso-surface extraction.

use std::collections::HashMap;

use crate::error::{GeometryError, Result};
use crate::mesh::Mesh;
use crate::shape::Point;
use crate::tables::{CORNER_OFFSETS, EDGE_CORNERS, TRIANGLES};

pub const MIN_RESOLUTION: usize = 8;

/// Values on a `resolution³` lattice spanning `[-1, 1]³`, x varying fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    resolution: usize,
    values: Vec<f64>,
}

/// Coordinate of lattice index `i` along one axis.
pub fn lattice_coord(resolution: usize, i: usize) -> f64 {
    -1.0 + 2.0 * i as f64 / (resolution - 1) as f64
}

/// Every lattice point in storage order.
pub fn lattice_points(resolution: usize) -> Vec<Point> {
    let mut out = Vec::with_capacity(resolution.pow(3));
    for k in 0..resolution {
        for j in 0..resolution {
            for i in 0..resolution {
                out.push([
                    lattice_coord(resolution, i),
                    lattice_coord(resolution, j),
                    lattice_coord(resolution, k),
                ]);
            }
        }
    }
    out
}

impl ScalarGrid {
    pub fn new(resolution: usize, values: Vec<f64>) -> Result<Self> {
        let expected = resolution.pow(3);
        if resolution < 2 || values.len() != expected {
            return Err(GeometryError::GridSize {
                resolution,
                expected,
                got: values.len(),
            });
        }
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(GeometryError::NonFinite {
                op: "scalar grid",
                index,
            });
        }
        Ok(Self { resolution, values })
    }

    pub fn from_fn(resolution: usize, f: impl Fn(Point) -> f64) -> Result<Self> {
        Self::new(resolution, lattice_points(resolution).into_iter().map(f).collect())
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    fn index(&self, i: usize, j: usize, k: usize) -> usize {
        (k * self.resolution + j) * self.resolution + i
    }

    pub fn value(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.index(i, j, k)]
    }
}

/// Marching cubes with the full 256-case table and linear interpolation along
/// sign-changing edges. Vertices are shared between neighbouring cells,
/// coincident vertices are welded, and zero-area triangles dropped.
/// A field without a sign change yields an empty mesh.
pub fn marching_cubes(grid: &ScalarGrid, iso: f64) -> Result<Mesh> {
    let res = grid.resolution;
    if res < MIN_RESOLUTION {
        return Err(GeometryError::Resolution {
            min: MIN_RESOLUTION,
            got: res,
        });
    }
    let mut edge_vertex: HashMap<usize, usize> = HashMap::new();
    let mut vertices: Vec<Point> = Vec::new();
    let mut triangles: Vec<[usize; 3]> = Vec::new();

    for k in 0..res - 1 {
        for j in 0..res - 1 {
            for i in 0..res - 1 {
                let corners = CORNER_OFFSETS.map(|o| [i + o[0], j + o[1], k + o[2]]);
                let values = corners.map(|c| grid.value(c[0], c[1], c[2]));
                let case = values
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v < iso)
                    .fold(0usize, |acc, (c, _)| acc | 1 << c);
                if case == 0 || case == 255 {
                    continue;
                }
                let row = &TRIANGLES[case];
                for tri in row.chunks(3).take_while(|t| t[0] >= 0) {
                    let mut ids = [0usize; 3];
                    for (slot, &edge) in ids.iter_mut().zip(tri) {
                        let [a, b] = EDGE_CORNERS[edge as usize];
                        // Orient every lattice edge from its lower endpoint so
                        // neighbouring cells compute bit-identical vertices.
                        let (lo, hi) = if grid.index(corners[a][0], corners[a][1], corners[a][2])
                            < grid.index(corners[b][0], corners[b][1], corners[b][2])
                        {
                            (a, b)
                        } else {
                            (b, a)
                        };
                        let start = grid.index(corners[lo][0], corners[lo][1], corners[lo][2]);
                        let axis = (0..3).find(|&d| corners[lo][d] != corners[hi][d]).unwrap();
                        *slot = *edge_vertex.entry(start * 3 + axis).or_insert_with(|| {
                            let (v0, v1) = (values[lo], values[hi]);
                            let t = ((iso - v0) / (v1 - v0)).clamp(0.0, 1.0);
                            let mut p = corners[lo].map(|c| lattice_coord(res, c));
                            let q = lattice_coord(res, corners[hi][axis]);
                            p[axis] += t * (q - p[axis]);
                            vertices.push(p);
                            vertices.len() - 1
                        });
                    }
                    triangles.push(ids);
                }
            }
        }
    }
    Ok(clean(vertices, triangles))
}

/// Welds identical positions, drops degenerate triangles and unused vertices.
fn clean(vertices: Vec<Point>, triangles: Vec<[usize; 3]>) -> Mesh {
    let mut canonical: HashMap<[u64; 3], usize> = HashMap::new();
    let remap: Vec<usize> = vertices
        .iter()
        .enumerate()
        .map(|(i, p)| *canonical.entry(p.map(|v| (v + 0.0).to_bits())).or_insert(i))
        .collect();
    let mut mesh = Mesh {
        vertices,
        triangles: Vec::with_capacity(triangles.len()),
    };
    for tri in triangles {
        let t = tri.map(|i| remap[i]);
        if t[0] == t[1] || t[1] == t[2] || t[0] == t[2] {
            continue;
        }
        mesh.triangles.push(t);
        if mesh.triangle_area(mesh.triangles.len() - 1) == 0.0 {
            mesh.triangles.pop();
        }
    }
    let mut new_index = vec![usize::MAX; mesh.vertices.len()];
    let mut kept = Vec::new();
    for tri in mesh.triangles.iter_mut() {
        for i in tri.iter_mut() {
            if new_index[*i] == usize::MAX {
                new_index[*i] = kept.len();
                kept.push(mesh.vertices[*i]);
            }
            *i = new_index[*i];
        }
    }
    mesh.vertices = kept;
    mesh
}
