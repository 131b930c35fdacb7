//! Embedded deformation graph: node sampling, influence weights and the
//! per-node affine transforms that drive the deformation.

use std::collections::BTreeSet;

use nalgebra::{DMatrix, Matrix3, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{GeodesicSearch, Surface};
use crate::Vec3;

/// Default sampling radius in multiples of the mean source edge length.
pub const DEFAULT_RADIUS_MULTIPLIER: f64 = 5.0;

/// One entry of a point's influence set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Influence {
    pub node: usize,
    pub weight: f64,
    /// Geodesic distance from the point to the node, cached at build time.
    pub distance: f64,
}

#[derive(Debug, Clone)]
pub struct DeformationGraph {
    radius: f64,
    node_indices: Vec<usize>,
    node_positions: Vec<Vec3>,
    edges: Vec<[usize; 2]>,
    reg_weights: Vec<f64>,
    neighbors: Vec<Vec<(usize, usize)>>,
    influence: Vec<Vec<Influence>>,
}

impl DeformationGraph {
    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn node_count(&self) -> usize {
        self.node_indices.len()
    }

    /// Source-point index of every node, in node order.
    pub fn node_indices(&self) -> &[usize] {
        &self.node_indices
    }

    pub fn node_positions(&self) -> &[Vec3] {
        &self.node_positions
    }

    /// Undirected node edges `[a, b]` with `a < b`, sorted.
    pub fn edges(&self) -> &[[usize; 2]] {
        &self.edges
    }

    /// `c_ij` per undirected edge; the weight is symmetric so both directed
    /// pairs share it. Empty when the graph has no edges.
    pub fn reg_weights(&self) -> &[f64] {
        &self.reg_weights
    }

    /// `(neighbour node, edge index)` pairs of a node.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.neighbors[node]
    }

    /// Influence set of each source point, sorted by node.
    pub fn influence(&self) -> &[Vec<Influence>] {
        &self.influence
    }

    pub fn point_count(&self) -> usize {
        self.influence.len()
    }

    pub fn to_export(&self) -> GraphExport {
        GraphExport {
            radius: self.radius,
            nodes: self
                .node_indices
                .iter()
                .zip(&self.node_positions)
                .map(|(&source_index, p)| ExportNode {
                    source_index,
                    position: [p.x, p.y, p.z],
                })
                .collect(),
            edges: self.edges.clone(),
            reg_weights: self.reg_weights.clone(),
            influence: self.influence.clone(),
        }
    }
}

/// JSON view of a graph for debugging and visualization.
///
/// ```json
/// { "radius": 0.05,
///   "nodes": [{"source_index": 12, "position": [x, y, z]}, ...],
///   "edges": [[0, 1], ...],
///   "reg_weights": [1.02, ...],
///   "influence": [[{"node": 0, "weight": 0.7, "distance": 0.01}, ...], ...] }
/// ```
#[derive(Debug, Clone, Serialize)]
pub struct GraphExport {
    pub radius: f64,
    pub nodes: Vec<ExportNode>,
    pub edges: Vec<[usize; 2]>,
    pub reg_weights: Vec<f64>,
    pub influence: Vec<Vec<Influence>>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ExportNode {
    pub source_index: usize,
    pub position: [f64; 3],
}

/// Point indices sorted by their projection on the principal axis of the
/// point covariance. The axis is oriented so its first nonzero component is
/// positive and ties go to the smaller index. Degenerate (all-coincident)
/// input yields the identity permutation.
pub fn pca_order(points: &[Vec3]) -> Vec<usize> {
    let n = points.len();
    let mut order: Vec<usize> = (0..n).collect();
    if n < 2 {
        return order;
    }
    let Some(axis) = principal_axis(points) else {
        return order;
    };
    let proj: Vec<f64> = points.iter().map(|p| p.dot(&axis)).collect();
    order.sort_by(|&a, &b| proj[a].total_cmp(&proj[b]).then(a.cmp(&b)));
    order
}

fn principal_axis(points: &[Vec3]) -> Option<Vec3> {
    let n = points.len() as f64;
    let mean = points.iter().fold(Vec3::zeros(), |acc, p| acc + p) / n;
    let mut cov = Matrix3::zeros();
    for p in points {
        let d = p - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    let scale = points.iter().map(|p| p.norm_squared()).fold(0.0, f64::max);
    let eig = SymmetricEigen::new(cov);
    let k = eig.eigenvalues.imax();
    if !(eig.eigenvalues[k] > 1e-28 * scale.max(f64::MIN_POSITIVE)) {
        return None;
    }
    let mut axis: Vec3 = eig.eigenvectors.column(k).into_owned();
    if let Some(c) = axis.iter().copied().find(|c| *c != 0.0) {
        if c < 0.0 {
            axis = -axis;
        }
    }
    Some(axis)
}

/// Normalized influence weights for one point:
/// `(1 - D²/R²)³` divided by its sum over the influence set.
pub fn influence_weights(distances: &[f64], radius: f64) -> Vec<f64> {
    let raw: Vec<f64> = distances
        .iter()
        .map(|d| {
            let s = 1.0 - d * d / (radius * radius);
            s * s * s
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Edge regularization weights `c_ij = 2|E| ‖p_i - p_j‖⁻¹ / Σ ‖p_i - p_j‖⁻¹`,
/// where the sum runs over all directed neighbour pairs. Returned per
/// undirected edge.
pub fn reg_weight_table(positions: &[Vec3], edges: &[[usize; 2]]) -> Result<Vec<f64>> {
    if edges.is_empty() {
        return Err(Error::InvalidInput(
            "regularization weights need at least one graph edge".into(),
        ));
    }
    let mut inv = Vec::with_capacity(edges.len());
    for &[a, b] in edges {
        let d = (positions[a] - positions[b]).norm();
        if !(d > 0.0) {
            return Err(Error::InvalidInput(format!(
                "graph nodes {a} and {b} coincide"
            )));
        }
        inv.push(1.0 / d);
    }
    // each undirected edge appears twice in the directed sum
    let total: f64 = 2.0 * inv.iter().sum::<f64>();
    let scale = 2.0 * edges.len() as f64 / total;
    Ok(inv.into_iter().map(|w| w * scale).collect())
}

/// Sweeps the source points in PCA order, promoting a point to a node when
/// it has no influencing node yet, and registering the new node with every
/// point within geodesic distance `radius`. Nodes sharing an influenced
/// point are connected.
pub fn build_graph(source: &Surface, radius: f64) -> Result<DeformationGraph> {
    if source.is_empty() {
        return Err(Error::Empty("cannot build a deformation graph on an empty surface"));
    }
    if !(radius > 0.0) || !radius.is_finite() {
        return Err(Error::InvalidInput(format!(
            "graph radius must be positive, got {radius}"
        )));
    }
    let n = source.len();
    let points = source.points();
    let mut search = GeodesicSearch::new(source);
    // (node, distance) pairs per point, in node-creation order
    let mut reached: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
    let mut node_indices = Vec::new();

    for v in pca_order(points) {
        if !node_indices.is_empty() && !reached[v].is_empty() {
            continue;
        }
        let node = node_indices.len();
        node_indices.push(v);
        for (q, d) in search.run(v, radius) {
            reached[q].push((node, d));
        }
        debug_assert!(reached[v].last().map(|e| e.0) == Some(node));
    }

    let mut edge_set = BTreeSet::new();
    for set in &reached {
        for (i, &(a, _)) in set.iter().enumerate() {
            for &(b, _) in &set[i + 1..] {
                edge_set.insert([a.min(b), a.max(b)]);
            }
        }
    }
    let edges: Vec<[usize; 2]> = edge_set.into_iter().collect();
    let node_positions: Vec<Vec3> = node_indices.iter().map(|&i| points[i]).collect();
    let reg_weights = if edges.is_empty() {
        Vec::new()
    } else {
        reg_weight_table(&node_positions, &edges)?
    };

    let mut neighbors = vec![Vec::new(); node_indices.len()];
    for (e, &[a, b]) in edges.iter().enumerate() {
        neighbors[a].push((b, e));
        neighbors[b].push((a, e));
    }
    for list in &mut neighbors {
        list.sort_unstable();
    }

    let influence = reached
        .into_iter()
        .map(|set| {
            let dists: Vec<f64> = set.iter().map(|e| e.1).collect();
            let weights = influence_weights(&dists, radius);
            set.iter()
                .zip(weights)
                .map(|(&(node, distance), weight)| Influence {
                    node,
                    weight,
                    distance,
                })
                .collect()
        })
        .collect();

    Ok(DeformationGraph {
        radius,
        node_indices,
        node_positions,
        edges,
        reg_weights,
        neighbors,
        influence,
    })
}

/// Stacked per-node affine transforms, stored as a `4n × 3` matrix whose
/// block `j` is `[A_jᵀ; t_jᵀ]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeTransforms(DMatrix<f64>);

impl NodeTransforms {
    pub fn identity(nodes: usize) -> Self {
        let mut m = DMatrix::zeros(4 * nodes, 3);
        for j in 0..nodes {
            for c in 0..3 {
                m[(4 * j + c, c)] = 1.0;
            }
        }
        NodeTransforms(m)
    }

    pub fn from_matrix(m: DMatrix<f64>) -> Result<Self> {
        if m.ncols() != 3 || !m.nrows().is_multiple_of(4) {
            return Err(Error::InvalidInput(format!(
                "node transforms must be 4n x 3, got {} x {}",
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(NodeTransforms(m))
    }

    /// Inverse of [`NodeTransforms::as_slice`].
    pub fn from_flat(nodes: usize, values: &[f64]) -> Self {
        NodeTransforms(DMatrix::from_column_slice(4 * nodes, 3, values))
    }

    pub fn node_count(&self) -> usize {
        self.0.nrows() / 4
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    /// Column-major entries, used as the flat vector for Anderson mixing.
    pub fn as_slice(&self) -> &[f64] {
        self.0.as_slice()
    }

    pub fn affine(&self, j: usize) -> Matrix3<f64> {
        self.0.fixed_view::<3, 3>(4 * j, 0).transpose()
    }

    pub fn translation(&self, j: usize) -> Vec3 {
        self.0.fixed_view::<1, 3>(4 * j + 3, 0).transpose()
    }

    pub fn set_node(&mut self, j: usize, affine: &Matrix3<f64>, translation: &Vec3) {
        self.0
            .fixed_view_mut::<3, 3>(4 * j, 0)
            .copy_from(&affine.transpose());
        self.0
            .fixed_view_mut::<1, 3>(4 * j + 3, 0)
            .copy_from(&translation.transpose());
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }
}

/// `Σ_j α_ij (A_j (v_i - p_j) + p_j + t_j)` for one source point.
pub fn deformed_position(
    point: &Vec3,
    influence: &[Influence],
    graph: &DeformationGraph,
    transforms: &NodeTransforms,
) -> Vec3 {
    let m = transforms.matrix();
    let mut out = Vec3::zeros();
    for inf in influence {
        let j = inf.node;
        let p = graph.node_positions[j];
        let d = point - p;
        let r = 4 * j;
        let moved = Vec3::new(
            m[(r, 0)] * d.x + m[(r + 1, 0)] * d.y + m[(r + 2, 0)] * d.z + m[(r + 3, 0)],
            m[(r, 1)] * d.x + m[(r + 1, 1)] * d.y + m[(r + 2, 1)] * d.z + m[(r + 3, 1)],
            m[(r, 2)] * d.x + m[(r + 1, 2)] * d.y + m[(r + 2, 2)] * d.z + m[(r + 3, 2)],
        );
        out += inf.weight * (moved + p);
    }
    out
}

/// Deformed positions of all source points.
pub fn deform_points(
    source: &[Vec3],
    graph: &DeformationGraph,
    transforms: &NodeTransforms,
) -> Vec<Vec3> {
    source
        .par_iter()
        .zip(graph.influence.par_iter())
        .map(|(v, inf)| deformed_position(v, inf, graph, transforms))
        .collect()
}
