//! Surfaces, closest-point queries, bounded geodesics and rotation projection.

mod geodesic;
mod kdtree;
mod rotation;

pub use geodesic::{limited_geodesic, GeodesicSearch};
pub use kdtree::SpatialIndex;
pub use rotation::{project_to_rotation, RotationMatrix, RotationProjection, DEGENERATE_SINGULAR_VALUE};

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::Vec3;

/// Neighbour count used to connect point clouds that come without faces.
pub const DEFAULT_KNN: usize = 6;

/// Sample points with neighbour connectivity.
///
/// Edges are stored once per unordered pair as `[lo, hi]`, sorted, with no
/// self-loops. For meshes they come from the faces, for point clouds from
/// [`knn_edges`].
#[derive(Debug, Clone, PartialEq)]
pub struct Surface {
    points: Vec<Vec3>,
    faces: Option<Vec<[usize; 3]>>,
    edges: Vec<[usize; 2]>,
    avg_edge_length: f64,
}

impl Surface {
    /// Triangle mesh; edges are derived from the faces.
    pub fn from_mesh(points: Vec<Vec3>, faces: Vec<[usize; 3]>) -> Result<Self> {
        let edges = faces
            .iter()
            .flat_map(|f| [[f[0], f[1]], [f[1], f[2]], [f[2], f[0]]])
            .collect();
        Self::new(points, Some(faces), edges)
    }

    /// Point cloud connected to its `k` nearest neighbours (clamped to `n - 1`).
    pub fn from_point_cloud(points: Vec<Vec3>, k: usize) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("surface has no points"));
        }
        let k = k.min(points.len() - 1);
        let edges = if k == 0 {
            Vec::new()
        } else {
            knn_edges(&points, k)?
        };
        Self::new(points, None, edges)
    }

    /// Builds a surface from explicit connectivity. Edge order and orientation
    /// do not matter; duplicates and self-loops are dropped.
    pub fn new(
        points: Vec<Vec3>,
        faces: Option<Vec<[usize; 3]>>,
        edges: Vec<[usize; 2]>,
    ) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Empty("surface has no points"));
        }
        let n = points.len();
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite("surface points"));
        }
        if let Some(faces) = &faces {
            if let Some(f) = faces.iter().find(|f| f.iter().any(|&i| i >= n)) {
                return Err(Error::InvalidInput(format!(
                    "face {f:?} references a vertex outside 0..{n}"
                )));
            }
        }
        let mut set = BTreeSet::new();
        for [a, b] in edges {
            if a >= n || b >= n {
                return Err(Error::InvalidInput(format!(
                    "edge ({a}, {b}) references a vertex outside 0..{n}"
                )));
            }
            if a != b {
                set.insert([a.min(b), a.max(b)]);
            }
        }
        let edges: Vec<[usize; 2]> = set.into_iter().collect();
        let avg_edge_length = mean_edge_length(&points, &edges);
        Ok(Surface {
            points,
            faces,
            edges,
            avg_edge_length,
        })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn faces(&self) -> Option<&[[usize; 3]]> {
        self.faces.as_deref()
    }

    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// Mean Euclidean edge length (`0` when there are no edges).
    pub fn avg_edge_length(&self) -> f64 {
        self.avg_edge_length
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Same connectivity, new positions. Panics if the lengths differ.
    pub fn with_points(&self, points: Vec<Vec3>) -> Surface {
        assert_eq!(points.len(), self.points.len(), "point count must not change");
        let avg_edge_length = mean_edge_length(&points, &self.edges);
        Surface {
            points,
            faces: self.faces.clone(),
            edges: self.edges.clone(),
            avg_edge_length,
        }
    }

    pub fn adjacency(&self) -> Adjacency {
        Adjacency::new(&self.points, &self.edges)
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounding_box(&self) -> (Vec3, Vec3) {
        bounding_box(&self.points)
    }
}

fn mean_edge_length(points: &[Vec3], edges: &[[usize; 2]]) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let total: f64 = edges
        .iter()
        .map(|&[a, b]| (points[a] - points[b]).norm())
        .sum();
    total / edges.len() as f64
}

pub(crate) fn bounding_box(points: &[Vec3]) -> (Vec3, Vec3) {
    let mut lo = Vec3::repeat(f64::INFINITY);
    let mut hi = Vec3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    (lo, hi)
}

/// Compressed adjacency lists with edge lengths.
#[derive(Debug, Clone)]
pub struct Adjacency {
    offsets: Vec<usize>,
    neighbors: Vec<(usize, f64)>,
}

impl Adjacency {
    pub fn new(points: &[Vec3], edges: &[[usize; 2]]) -> Self {
        let n = points.len();
        let mut degree = vec![0usize; n + 1];
        for &[a, b] in edges {
            degree[a + 1] += 1;
            degree[b + 1] += 1;
        }
        for i in 0..n {
            degree[i + 1] += degree[i];
        }
        let offsets = degree;
        let mut fill = offsets.clone();
        let mut neighbors = vec![(0usize, 0.0f64); 2 * edges.len()];
        for &[a, b] in edges {
            let len = (points[a] - points[b]).norm();
            neighbors[fill[a]] = (b, len);
            fill[a] += 1;
            neighbors[fill[b]] = (a, len);
            fill[b] += 1;
        }
        for i in 0..n {
            neighbors[offsets[i]..offsets[i + 1]].sort_by_key(|x| x.0);
        }
        Adjacency { offsets, neighbors }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(neighbour, edge length)` pairs of vertex `i`, sorted by neighbour.
    pub fn neighbors(&self, i: usize) -> &[(usize, f64)] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }
}

/// Symmetric k-nearest-neighbour edge set: `(i, j)` is present when `j` is
/// among the `k` nearest of `i` or vice versa.
pub fn knn_edges(points: &[Vec3], k: usize) -> Result<Vec<[usize; 2]>> {
    if k == 0 || k >= points.len() {
        return Err(Error::InvalidInput(format!(
            "knn_edges needs 0 < k < n (k = {k}, n = {})",
            points.len()
        )));
    }
    let index = SpatialIndex::new(points)?;
    let mut set = BTreeSet::new();
    for (i, p) in points.iter().enumerate() {
        for (j, _) in index.k_nearest(p, k, Some(i)) {
            set.insert([i.min(j), i.max(j)]);
        }
    }
    Ok(set.into_iter().collect())
}

/// Uniform scaling plus translation: `x' = (x - center) * scale`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Similarity {
    pub center: [f64; 3],
    pub scale: f64,
}

impl Similarity {
    pub fn identity() -> Self {
        Similarity {
            center: [0.0; 3],
            scale: 1.0,
        }
    }

    pub fn apply(&self, p: &Vec3) -> Vec3 {
        (p - Vec3::from(self.center)) * self.scale
    }

    pub fn invert(&self, p: &Vec3) -> Vec3 {
        p / self.scale + Vec3::from(self.center)
    }

    pub fn apply_surface(&self, s: &Surface) -> Surface {
        s.with_points(s.points().iter().map(|p| self.apply(p)).collect())
    }

    pub fn invert_surface(&self, s: &Surface) -> Surface {
        s.with_points(s.points().iter().map(|p| self.invert(p)).collect())
    }
}

/// Moves the joint bounding-box center to the origin and scales both
/// surfaces so the joint bounding-box diagonal has unit length.
pub fn normalize_pair(source: &Surface, target: &Surface) -> Result<(Surface, Surface, Similarity)> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Empty("normalize_pair needs two nonempty surfaces"));
    }
    let (lo_s, hi_s) = source.bounding_box();
    let (lo_t, hi_t) = target.bounding_box();
    let lo = lo_s.inf(&lo_t);
    let hi = hi_s.sup(&hi_t);
    let diagonal = (hi - lo).norm();
    if !(diagonal > 0.0) || !diagonal.is_finite() {
        return Err(Error::InvalidInput(
            "joint bounding box has zero diagonal".into(),
        ));
    }
    let center = (lo + hi) * 0.5;
    let sim = Similarity {
        center: [center.x, center.y, center.z],
        scale: 1.0 / diagonal,
    };
    Ok((sim.apply_surface(source), sim.apply_surface(target), sim))
}
