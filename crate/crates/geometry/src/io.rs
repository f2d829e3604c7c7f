//! Text formats: XYZ point clouds, OBJ meshes and JSON shape specs.
//!
//! Numbers are written with Rust's shortest round-trip formatting, so reading
//! a file back reproduces every coordinate bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cloud::PointCloud;
use crate::error::{GeometryError, Result};
use crate::mesh::Mesh;
use crate::shape::{Point, ShapeSpec};

fn parse_coords<'a>(line: usize, fields: impl Iterator<Item = &'a str>) -> Result<Point> {
    let values: Vec<f64> = fields
        .map(|f| {
            f.parse::<f64>().map_err(|e| GeometryError::Parse {
                line,
                detail: format!("`{f}`: {e}"),
            })
        })
        .collect::<Result<_>>()?;
    let p: Point = values.try_into().map_err(|v: Vec<f64>| GeometryError::Parse {
        line,
        detail: format!("expected 3 coordinates, got {}", v.len()),
    })?;
    if p.iter().any(|v| !v.is_finite()) {
        return Err(GeometryError::Parse {
            line,
            detail: "non-finite coordinate".into(),
        });
    }
    Ok(p)
}

pub fn format_xyz(cloud: &PointCloud) -> String {
    let mut out = String::new();
    for p in cloud.points() {
        writeln!(out, "{} {} {}", p[0], p[1], p[2]).unwrap();
    }
    out
}

/// One `x y z` line per point; blank lines are skipped.
pub fn parse_xyz(text: &str) -> Result<PointCloud> {
    let mut points = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        points.push(parse_coords(i + 1, line.split_whitespace())?);
    }
    PointCloud::new(points)
}

pub fn format_obj(mesh: &Mesh) -> String {
    let mut out = String::new();
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).unwrap();
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1).unwrap();
    }
    out
}

/// Reads `v x y z` and 1-indexed `f a b c` lines; anything else is an error
/// apart from blank lines and `#` comments.
pub fn parse_obj(text: &str) -> Result<Mesh> {
    let mut vertices = Vec::new();
    let mut triangles = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut fields = line.split_whitespace();
        match fields.next() {
            None => continue,
            Some(tag) if tag.starts_with('#') => continue,
            Some("v") => vertices.push(parse_coords(line_no, fields)?),
            Some("f") => {
                let idx: Vec<usize> = fields
                    .map(|f| match f.parse::<usize>() {
                        Ok(n) if n >= 1 => Ok(n - 1),
                        _ => Err(GeometryError::Parse {
                            line: line_no,
                            detail: format!("bad face index `{f}`"),
                        }),
                    })
                    .collect::<Result<_>>()?;
                let tri: [usize; 3] = idx.try_into().map_err(|v: Vec<usize>| GeometryError::Parse {
                    line: line_no,
                    detail: format!("expected a triangle, got {} indices", v.len()),
                })?;
                triangles.push(tri);
            }
            Some(other) => {
                return Err(GeometryError::Parse {
                    line: line_no,
                    detail: format!("unsupported record `{other}`"),
                })
            }
        }
    }
    Mesh::new(vertices, triangles)
}

pub fn write_xyz(path: impl AsRef<Path>, cloud: &PointCloud) -> Result<()> {
    Ok(fs::write(path, format_xyz(cloud))?)
}

pub fn read_xyz(path: impl AsRef<Path>) -> Result<PointCloud> {
    parse_xyz(&fs::read_to_string(path)?)
}

pub fn write_obj(path: impl AsRef<Path>, mesh: &Mesh) -> Result<()> {
    Ok(fs::write(path, format_obj(mesh))?)
}

pub fn read_obj(path: impl AsRef<Path>) -> Result<Mesh> {
    parse_obj(&fs::read_to_string(path)?)
}

pub fn write_shape(path: impl AsRef<Path>, spec: &ShapeSpec) -> Result<()> {
    Ok(fs::write(path, spec.to_json())?)
}

pub fn read_shape(path: impl AsRef<Path>) -> Result<ShapeSpec> {
    ShapeSpec::from_json(&fs::read_to_string(path)?)
}
