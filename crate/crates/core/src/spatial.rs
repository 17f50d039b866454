//! Neighbor search: a k-d tree for nearest-neighbor queries and a uniform
//! grid for fixed-radius queries.

use std::collections::HashMap;
use std::num::NonZeroUsize;

use kiddo::{ImmutableKdTree, SquaredEuclidean};

use crate::geom::Point3;

/// Nearest-neighbor index over a fixed point set.
pub struct NearestIndex {
    tree: ImmutableKdTree<f64, 3>,
    len: usize,
}

impl NearestIndex {
    pub fn new(points: &[Point3]) -> Self {
        let coords: Vec<[f64; 3]> = points.iter().map(|p| [p.x, p.y, p.z]).collect();
        let tree = ImmutableKdTree::new_from_slice(&coords).expect("k-d tree construction");
        Self {
            tree,
            len: points.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(index, squared distance)` of the closest point.
    pub fn nearest(&self, q: &Point3) -> (usize, f64) {
        let r = self
            .tree
            .query(&[q.x, q.y, q.z])
            .nearest_one::<SquaredEuclidean<f64>>()
            .execute();
        (r.item as usize, r.distance)
    }

    /// The `n` closest points, nearest first.
    pub fn nearest_n(&self, q: &Point3, n: usize) -> Vec<(usize, f64)> {
        let Some(n) = NonZeroUsize::new(n.min(self.len)) else {
            return Vec::new();
        };
        self.tree
            .query(&[q.x, q.y, q.z])
            .nearest_n::<SquaredEuclidean<f64>>(n)
            .execute()
            .into_iter()
            .map(|r| (r.item as usize, r.distance))
            .collect()
    }
}

/// Uniform hash grid with cubic cells; radius queries no larger than the
/// cell size visit only the 27 surrounding cells.
pub struct UniformGrid {
    cell: f64,
    cells: HashMap<(i64, i64, i64), Vec<usize>>,
}

impl UniformGrid {
    pub fn new(points: &[Point3], cell: f64) -> Self {
        assert!(cell > 0.0, "grid cell size must be positive");
        let mut cells: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            cells.entry(Self::key(cell, p)).or_default().push(i);
        }
        Self { cell, cells }
    }

    fn key(cell: f64, p: &Point3) -> (i64, i64, i64) {
        (
            (p.x / cell).floor() as i64,
            (p.y / cell).floor() as i64,
            (p.z / cell).floor() as i64,
        )
    }

    /// Indices of points within `radius` (inclusive) of `q`, ascending.
    pub fn within(&self, points: &[Point3], q: &Point3, radius: f64) -> Vec<usize> {
        let reach = (radius / self.cell).ceil() as i64;
        let (cx, cy, cz) = Self::key(self.cell, q);
        let r2 = radius * radius;
        let mut out = Vec::new();
        for dx in -reach..=reach {
            for dy in -reach..=reach {
                for dz in -reach..=reach {
                    if let Some(bucket) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) {
                        out.extend(
                            bucket
                                .iter()
                                .copied()
                                .filter(|&j| (points[j] - q).norm_squared() <= r2),
                        );
                    }
                }
            }
        }
        out.sort_unstable();
        out
    }
}

/// Brute-force radius query, ascending indices.
pub fn within_brute(points: &[Point3], q: &Point3, radius: f64) -> Vec<usize> {
    let r2 = radius * radius;
    (0..points.len())
        .filter(|&j| (points[j] - q).norm_squared() <= r2)
        .collect()
}
