//! Ground-truth geometry: analytic signed distance shapes, surface and query
//! sampling, viewpoint cropping, marching cubes, and point-set distances.

mod cloud;
mod dataset;
mod distance;
mod error;
pub mod io;
mod marching;
mod mesh;
mod shape;
mod tables;

pub use cloud::{
    crop_from_viewpoint, crop_partial, random_viewpoint, sample_queries, sample_surface,
    PointCloud, SdfSamples, CROP_INPUT, CROP_KEEP, SURFACE_TOLERANCE,
};
pub use dataset::{random_shape, Category};
pub use distance::{
    chamfer_distance, chamfer_with_trees, hausdorff_unidirectional, nearest_squared_distances,
    squared_distance, KdTree,
};
pub use error::{GeometryError, Result};
pub use marching::{lattice_coord, lattice_points, marching_cubes, ScalarGrid, MIN_RESOLUTION};
pub use mesh::Mesh;
pub use shape::{Bounds, Point, ShapeSpec, MAX_CSG_DEPTH};
