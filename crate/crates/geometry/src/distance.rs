//! Nearest-neighbour queries and point-set distances.

use crate::cloud::PointCloud;
use crate::shape::Point;

/// Squared Euclidean distance, summed in x, y, z order.
pub fn squared_distance(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Implicit balanced kd-tree: each range stores its median point at the middle
/// index, split on axis `depth % 3`.
#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<Point>,
}

impl KdTree {
    pub fn new(points: &[Point]) -> Self {
        let mut points = points.to_vec();
        build(&mut points, 0);
        Self { points }
    }

    /// Smallest squared distance from `q` to any stored point
    /// (`f64::INFINITY` for an empty tree).
    pub fn nearest_squared(&self, q: Point) -> f64 {
        let mut best = f64::INFINITY;
        search(&self.points, 0, q, &mut best);
        best
    }
}

fn build(points: &mut [Point], depth: usize) {
    if points.len() <= 1 {
        return;
    }
    let axis = depth % 3;
    let mid = points.len() / 2;
    points.select_nth_unstable_by(mid, |a, b| a[axis].total_cmp(&b[axis]));
    let (left, right) = points.split_at_mut(mid);
    build(left, depth + 1);
    build(&mut right[1..], depth + 1);
}

fn search(points: &[Point], depth: usize, q: Point, best: &mut f64) {
    if points.is_empty() {
        return;
    }
    let mid = points.len() / 2;
    let p = points[mid];
    let d = squared_distance(q, p);
    if d < *best {
        *best = d;
    }
    let axis = depth % 3;
    let diff = q[axis] - p[axis];
    let (near, far) = if diff < 0.0 {
        (&points[..mid], &points[mid + 1..])
    } else {
        (&points[mid + 1..], &points[..mid])
    };
    search(near, depth + 1, q, best);
    // A point across the split is at least |diff| away along this axis.
    if diff * diff < *best {
        search(far, depth + 1, q, best);
    }
}

/// For each point of `from`, the squared distance to its nearest point in `to`.
pub fn nearest_squared_distances(from: &[Point], to: &KdTree) -> Vec<f64> {
    from.iter().map(|&p| to.nearest_squared(p)).collect()
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean nearest squared distance from `a` to `b` plus the same from `b` to `a`.
pub fn chamfer_distance(a: &PointCloud, b: &PointCloud) -> f64 {
    let (ta, tb) = (KdTree::new(a.points()), KdTree::new(b.points()));
    chamfer_with_trees(a, &ta, b, &tb)
}

/// [`chamfer_distance`] reusing prebuilt trees for both clouds.
pub fn chamfer_with_trees(a: &PointCloud, ta: &KdTree, b: &PointCloud, tb: &KdTree) -> f64 {
    mean(&nearest_squared_distances(a.points(), tb)) + mean(&nearest_squared_distances(b.points(), ta))
}

/// Largest distance from a point of `partial` to its nearest point in `complete`.
pub fn hausdorff_unidirectional(partial: &PointCloud, complete: &PointCloud) -> f64 {
    let tree = KdTree::new(complete.points());
    nearest_squared_distances(partial.points(), &tree)
        .into_iter()
        .fold(0.0f64, f64::max)
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn single_points() {
        let a = cloud(&[[0.0, 0.0, 0.0]]);
        let b = cloud(&[[0.3, 0.4, 0.0]]);
        let d2 = squared_distance([0.0; 3], [0.3, 0.4, 0.0]);
        assert_eq!(chamfer_distance(&a, &b), 2.0 * d2);
        assert_eq!(hausdorff_unidirectional(&a, &b), d2.sqrt());
    }

    #[test]
    fn subset_has_zero_hausdorff() {
        let full = cloud(&[[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.5]]);
        let part = cloud(&[[1.0, 0.0, 0.0]]);
        assert_eq!(hausdorff_unidirectional(&part, &full), 0.0);
        assert_eq!(chamfer_distance(&full, &full), 0.0);
    }

    #[test]
    fn duplicate_coordinates_on_split_axis() {
        let pts: Vec<Point> = (0..20).map(|i| [0.5, i as f64 * 0.1, 0.0]).collect();
        let tree = KdTree::new(&pts);
        for q in [[0.5, 1.05, 0.0], [0.4, -0.3, 0.2], [0.6, 0.73, -0.1]] {
            let brute = pts.iter().map(|&p| squared_distance(q, p)).fold(f64::INFINITY, f64::min);
            assert_eq!(tree.nearest_squared(q), brute);
        }
    }
}
