//! Normal equations of the quadratic surrogate, `K X = B`.
//!
//! `K` is `4n × 4n` with one `4 × 4` block per pair of nodes that share an
//! influenced point (i.e. graph neighbours) plus the diagonal. That block
//! pattern depends only on the graph, so the symbolic Cholesky factorization
//! is computed once and only the numeric factorization is redone per
//! iteration.

use nalgebra::{DMatrix, Matrix4, Matrix4x3, Vector4};
use nalgebra_sparse::factorization::{CscCholesky, CscSymbolicCholesky};
use nalgebra_sparse::pattern::SparsityPattern;
use nalgebra_sparse::CscMatrix;

use super::{reg_residuals, Correspondences, EnergyWeights, Landmark};
use crate::error::{Error, Result};
use crate::geometry::RotationProjection;
use crate::graph::{DeformationGraph, NodeTransforms};
use crate::Vec3;

/// Assembled surrogate system for one MM step.
#[derive(Debug, Clone)]
pub struct LinearSystem {
    pub k: CscMatrix<f64>,
    pub b: DMatrix<f64>,
}

impl LinearSystem {
    pub fn dense_k(&self) -> DMatrix<f64> {
        DMatrix::from(&self.k)
    }
}

pub struct SystemAssembler {
    nodes: usize,
    /// Sorted block rows (node ids, including the node itself) of each block column.
    block_rows: Vec<Vec<usize>>,
    /// Index of the first block of each block column in `blocks`.
    block_base: Vec<usize>,
    pattern: SparsityPattern,
    symbolic: CscSymbolicCholesky,
    factor: Option<CscCholesky<f64>>,
}

impl SystemAssembler {
    pub fn new(graph: &DeformationGraph) -> Self {
        let nodes = graph.node_count();
        let block_rows: Vec<Vec<usize>> = (0..nodes)
            .map(|k| {
                let mut rows: Vec<usize> = graph.neighbors(k).iter().map(|&(j, _)| j).collect();
                rows.push(k);
                rows.sort_unstable();
                rows
            })
            .collect();
        let mut block_base = Vec::with_capacity(nodes + 1);
        let mut acc = 0;
        for rows in &block_rows {
            block_base.push(acc);
            acc += rows.len();
        }
        block_base.push(acc);

        let mut offsets = Vec::with_capacity(4 * nodes + 1);
        let mut indices = Vec::with_capacity(16 * acc);
        offsets.push(0);
        for rows in &block_rows {
            for _ in 0..4 {
                for &j in rows {
                    indices.extend((0..4).map(|a| 4 * j + a));
                }
                offsets.push(indices.len());
            }
        }
        let pattern = SparsityPattern::try_from_offsets_and_indices(4 * nodes, 4 * nodes, offsets, indices)
            .expect("block pattern is sorted and in bounds");
        let symbolic = CscSymbolicCholesky::factor(pattern.clone());
        SystemAssembler {
            nodes,
            block_rows,
            block_base,
            pattern,
            symbolic,
            factor: None,
        }
    }

    pub fn pattern(&self) -> &SparsityPattern {
        &self.pattern
    }

    fn slot(&self, row: usize, col: usize) -> usize {
        let r = self.block_rows[col]
            .binary_search(&row)
            .expect("block outside the graph pattern");
        self.block_base[col] + r
    }

    /// Builds `K = FᵀW_a²F + α HᵀW_r²H + β JᵀJ` and the matching right-hand side
    /// `B = FᵀW_a²Q + α HᵀW_r²Y + β JᵀJZ` at the current iterate. Landmark
    /// residuals, if any, enter like alignment rows with a fixed weight.
    #[allow(clippy::too_many_arguments)]
    pub fn assemble(
        &self,
        source: &[Vec3],
        graph: &DeformationGraph,
        transforms: &NodeTransforms,
        deformed: &[Vec3],
        correspondences: &Correspondences,
        rotations: &[RotationProjection],
        weights: &EnergyWeights,
        landmarks: &[Landmark],
    ) -> LinearSystem {
        // Only blocks with row <= col are accumulated; the rest is mirrored.
        let mut blocks = vec![Matrix4::<f64>::zeros(); self.block_base[self.nodes]];
        let mut rhs = vec![Matrix4x3::<f64>::zeros(); self.nodes];
        let positions = graph.node_positions();
        let two_nu_a2 = 2.0 * weights.nu_a * weights.nu_a;
        let two_nu_r2 = 2.0 * weights.nu_r * weights.nu_r;

        let mut add_point_row = |blocks: &mut [Matrix4<f64>], i: usize, w: f64, u: &Vec3| {
            let inf = &graph.influence()[i];
            let rows: Vec<Vector4<f64>> = inf
                .iter()
                .map(|e| {
                    let d = source[i] - positions[e.node];
                    e.weight * Vector4::new(d.x, d.y, d.z, 1.0)
                })
                .collect();
            let anchor = inf
                .iter()
                .fold(Vec3::zeros(), |acc, e| acc + e.weight * positions[e.node]);
            let q = (u - anchor).transpose();
            for (a, ea) in inf.iter().enumerate() {
                let wf = w * rows[a];
                rhs[ea.node] += wf * q;
                for (b, eb) in inf.iter().enumerate() {
                    if ea.node <= eb.node {
                        let s = self.slot(ea.node, eb.node);
                        blocks[s] += wf * rows[b].transpose();
                    }
                }
            }
        };

        for i in 0..source.len() {
            let d2 = (deformed[i] - correspondences.target_point[i]).norm_squared();
            let w = (-d2 / two_nu_a2).exp() / two_nu_a2;
            add_point_row(&mut blocks, i, w, &correspondences.target_point[i]);
        }
        for l in landmarks {
            add_point_row(&mut blocks, l.source, weights.landmark, &l.target);
        }

        if weights.alpha > 0.0 {
            let residuals = reg_residuals(graph, transforms);
            for (e, (&[a, b], &c)) in graph.edges().iter().zip(graph.reg_weights()).enumerate() {
                for (k, (i, j)) in [(a, b), (b, a)].into_iter().enumerate() {
                    let d = residuals[2 * e + k];
                    let w = weights.alpha * (-d.norm_squared() / two_nu_r2).exp() / two_nu_r2;
                    let diff = positions[i] - positions[j];
                    let g = c * Vector4::new(diff.x, diff.y, diff.z, 1.0);
                    let h = Vector4::new(0.0, 0.0, 0.0, -c);
                    let y = (c * diff).transpose();
                    let sjj = self.slot(j, j);
                    blocks[sjj] += w * g * g.transpose();
                    let sii = self.slot(i, i);
                    blocks[sii] += w * h * h.transpose();
                    if j < i {
                        let s = self.slot(j, i);
                        blocks[s] += w * g * h.transpose();
                    } else {
                        let s = self.slot(i, j);
                        blocks[s] += w * h * g.transpose();
                    }
                    rhs[j] += w * g * y;
                    rhs[i] += w * h * y;
                }
            }
        }

        for (j, r) in rotations.iter().enumerate() {
            let s = self.slot(j, j);
            for c in 0..3 {
                blocks[s][(c, c)] += weights.beta;
            }
            let zt = r.rotation.matrix().transpose();
            let mut top = rhs[j].fixed_view_mut::<3, 3>(0, 0);
            top += zt * weights.beta;
        }

        // diagonal blocks: copy the upper triangle over the lower one
        for k in 0..self.nodes {
            let s = self.slot(k, k);
            for a in 0..4 {
                for b in 0..a {
                    blocks[s][(a, b)] = blocks[s][(b, a)];
                }
            }
        }

        let mut values = Vec::with_capacity(self.pattern.nnz());
        for (k, rows) in self.block_rows.iter().enumerate() {
            for col in 0..4 {
                for &j in rows {
                    for row in 0..4 {
                        let v = if j <= k {
                            blocks[self.slot(j, k)][(row, col)]
                        } else {
                            blocks[self.slot(k, j)][(col, row)]
                        };
                        values.push(v);
                    }
                }
            }
        }
        let k = CscMatrix::try_from_pattern_and_values(self.pattern.clone(), values)
            .expect("values match the pattern");
        let mut b = DMatrix::zeros(4 * self.nodes, 3);
        for (j, r) in rhs.iter().enumerate() {
            b.fixed_view_mut::<4, 3>(4 * j, 0).copy_from(r);
        }
        LinearSystem { k, b }
    }

    /// Solves `K X = B` with the cached symbolic factorization.
    pub fn solve(&mut self, system: &LinearSystem) -> Result<NodeTransforms> {
        let values = system.k.values();
        let outcome = match &mut self.factor {
            Some(f) => f.refactor(values).map(|_| ()),
            None => CscCholesky::factor_numerical(self.symbolic.clone(), values).map(|f| {
                self.factor = Some(f);
            }),
        };
        if outcome.is_err() {
            self.factor = None;
            return Err(self.diagnose(system));
        }
        let x = self.factor.as_ref().unwrap().solve(&system.b);
        if !x.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("solution of the surrogate system"));
        }
        NodeTransforms::from_matrix(x)
    }

    fn diagnose(&self, system: &LinearSystem) -> Error {
        let dense = system.dense_k();
        for j in 0..self.nodes {
            let block: Matrix4<f64> = dense.fixed_view::<4, 4>(4 * j, 4 * j).into_owned();
            if block.cholesky().is_none() {
                return Error::NotPositiveDefinite {
                    node: Some(j),
                    detail: format!("diagonal block of node {j} is not positive definite"),
                };
            }
        }
        Error::NotPositiveDefinite {
            node: None,
            detail: "all node blocks are positive definite but the coupled system is not".into(),
        }
    }
}
