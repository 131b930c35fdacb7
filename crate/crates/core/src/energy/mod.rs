//! Welsch-robust registration energy and its quadratic majorizer.

mod system;

pub use system::{LinearSystem, SystemAssembler};

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::geometry::{project_to_rotation, RotationProjection, SpatialIndex};
use crate::graph::{DeformationGraph, NodeTransforms};
use crate::Vec3;

/// Welsch's function `1 - exp(-x² / 2ν²)`.
#[inline]
pub fn welsch(x: f64, nu: f64) -> f64 {
    1.0 - (-x * x / (2.0 * nu * nu)).exp()
}

/// Quadratic majorizer of [`welsch`] touching it at `x = y`.
#[inline]
pub fn welsch_surrogate(x: f64, y: f64, nu: f64) -> f64 {
    let py = welsch(y, nu);
    py + (1.0 - py) / (2.0 * nu * nu) * (x * x - y * y)
}

/// Closest target sample for every deformed source point.
#[derive(Debug, Clone, PartialEq)]
pub struct Correspondences {
    pub target_index: Vec<usize>,
    pub target_point: Vec<Vec3>,
    pub distance: Vec<f64>,
}

impl Correspondences {
    pub fn len(&self) -> usize {
        self.target_index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.target_index.is_empty()
    }
}

pub fn find_correspondences(deformed: &[Vec3], target: &SpatialIndex) -> Correspondences {
    let found: Vec<(usize, f64)> = deformed.par_iter().map(|p| target.nearest(p)).collect();
    let target_point = found.iter().map(|&(i, _)| target.points()[i]).collect();
    let (target_index, distance) = found.into_iter().unzip();
    Correspondences {
        target_index,
        target_point,
        distance,
    }
}

pub fn rotation_projections(transforms: &NodeTransforms) -> Vec<RotationProjection> {
    (0..transforms.node_count())
        .map(|j| project_to_rotation(&transforms.affine(j)))
        .collect()
}

/// A fixed source-to-target pair added as a squared-distance residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Landmark {
    pub source: usize,
    pub target: Vec3,
}

/// Term weights and Welsch parameters for one energy evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyWeights {
    pub alpha: f64,
    pub beta: f64,
    pub nu_a: f64,
    pub nu_r: f64,
    /// Weight of the landmark residuals; ignored when no landmarks are active.
    pub landmark: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyBreakdown {
    pub e_align: f64,
    pub e_reg: f64,
    pub e_rot: f64,
    /// Landmark residual sum (already weighted); zero without landmarks.
    pub e_landmark: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub nu_a: f64,
    pub nu_r: f64,
}

/// `D_ij = c_ij (A_j (p_i - p_j) + p_j + t_j - (p_i + t_i))` for every directed
/// neighbour pair. Entry `2e` is measured at the lower node of edge `e`,
/// entry `2e + 1` at the upper one.
pub fn reg_residuals(graph: &DeformationGraph, transforms: &NodeTransforms) -> Vec<Vec3> {
    let pos = graph.node_positions();
    let mut out = Vec::with_capacity(2 * graph.edges().len());
    for (&[a, b], &c) in graph.edges().iter().zip(graph.reg_weights()) {
        for (i, j) in [(a, b), (b, a)] {
            let induced = transforms.affine(j) * (pos[i] - pos[j]) + pos[j] + transforms.translation(j);
            let own = pos[i] + transforms.translation(i);
            out.push(c * (induced - own));
        }
    }
    out
}

/// Evaluates `E = E_align + α E_reg + β E_rot` (plus landmark residuals).
///
/// Correspondences and rotation projections are taken as inputs so that the
/// values computed here can be reused by the next MM step.
pub fn evaluate_energy(
    graph: &DeformationGraph,
    transforms: &NodeTransforms,
    deformed: &[Vec3],
    correspondences: &Correspondences,
    rotations: &[RotationProjection],
    weights: &EnergyWeights,
    landmarks: &[Landmark],
) -> Result<EnergyBreakdown> {
    check_len("deformed points", graph.point_count(), deformed.len())?;
    check_len("correspondences", graph.point_count(), correspondences.len())?;
    check_len("rotation projections", graph.node_count(), rotations.len())?;
    check_len("node transforms", graph.node_count(), transforms.node_count())?;

    let e_align: f64 = correspondences
        .distance
        .iter()
        .map(|&d| welsch(d, weights.nu_a))
        .sum();
    let e_reg: f64 = reg_residuals(graph, transforms)
        .iter()
        .map(|d| welsch(d.norm(), weights.nu_r))
        .sum();
    let e_rot: f64 = rotations
        .iter()
        .enumerate()
        .map(|(j, r)| (transforms.affine(j) - r.rotation.matrix()).norm_squared())
        .sum();
    let e_landmark = weights.landmark
        * landmarks
            .iter()
            .map(|l| (deformed[l.source] - l.target).norm_squared())
            .sum::<f64>();
    let total = e_align + weights.alpha * e_reg + weights.beta * e_rot + e_landmark;
    if !total.is_finite() {
        return Err(Error::NonFinite("energy"));
    }
    Ok(EnergyBreakdown {
        e_align,
        e_reg,
        e_rot,
        e_landmark,
        total,
        alpha: weights.alpha,
        beta: weights.beta,
        nu_a: weights.nu_a,
        nu_r: weights.nu_r,
    })
}

fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch {
            what,
            expected,
            actual,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Surface;
    use crate::graph::{build_graph, deform_points};
    use nalgebra::Matrix3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn welsch_values() {
        assert_eq!(welsch(0.0, 0.3), 0.0);
        assert!((welsch(1.0, 1.0) - 0.393469).abs() < 5e-7);
        let w = welsch(10.0 * 0.02, 0.02);
        // 1 - e^-50 rounds to exactly 1 in f64
        assert!(w <= 1.0 && 1.0 - w < 1e-9);
    }

    #[test]
    fn surrogate_values() {
        assert_eq!(welsch_surrogate(0.7, 0.7, 0.4), welsch(0.7, 0.4));
        assert!((welsch_surrogate(0.0, 1.0, 1.0) - 0.090204).abs() < 5e-7);
    }

    #[test]
    fn surrogate_dominates_on_dense_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let nu = rng.random_range(0.01..2.0);
            let x = rng.random_range(0.0..5.0);
            let y = rng.random_range(0.0..5.0);
            assert!(welsch_surrogate(x, y, nu) >= welsch(x, nu) - 1e-15);
            assert!((welsch_surrogate(y, y, nu) - welsch(y, nu)).abs() < 1e-15);
        }
    }

    fn strip() -> Surface {
        let mut pts = Vec::new();
        for j in 0..3 {
            for i in 0..8 {
                pts.push(Vec3::new(i as f64 * 0.1, j as f64 * 0.1, 0.0));
            }
        }
        let mut faces = Vec::new();
        for j in 0..2 {
            for i in 0..7 {
                let a = j * 8 + i;
                faces.push([a, a + 1, a + 9]);
                faces.push([a, a + 9, a + 8]);
            }
        }
        Surface::from_mesh(pts, faces).unwrap()
    }

    fn weights() -> EnergyWeights {
        EnergyWeights {
            alpha: 2.0,
            beta: 0.5,
            nu_a: 0.05,
            nu_r: 0.1,
            landmark: 1.0,
        }
    }

    #[test]
    fn identity_on_self_is_zero() {
        let s = strip();
        let g = build_graph(&s, 0.25).unwrap();
        let x = NodeTransforms::identity(g.node_count());
        let def = deform_points(s.points(), &g, &x);
        let idx = SpatialIndex::new(s.points()).unwrap();
        let corr = find_correspondences(&def, &idx);
        let rot = rotation_projections(&x);
        let e = evaluate_energy(&g, &x, &def, &corr, &rot, &weights(), &[]).unwrap();
        assert_eq!((e.e_align, e.e_reg, e.e_rot, e.total), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn rotation_has_no_rot_energy() {
        let s = Surface::new(vec![Vec3::zeros()], None, vec![]).unwrap();
        let g = build_graph(&s, 1.0).unwrap();
        let mut x = NodeTransforms::identity(1);
        let rz = Matrix3::new(0.0, -1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0);
        x.set_node(0, &rz, &Vec3::zeros());
        let rot = rotation_projections(&x);
        let def = deform_points(s.points(), &g, &x);
        let idx = SpatialIndex::new(s.points()).unwrap();
        let corr = find_correspondences(&def, &idx);
        let e = evaluate_energy(&g, &x, &def, &corr, &rot, &weights(), &[]).unwrap();
        assert!(e.e_rot < 1e-28);
    }

    #[test]
    fn mismatched_lengths() {
        let s = strip();
        let g = build_graph(&s, 0.25).unwrap();
        let x = NodeTransforms::identity(g.node_count());
        let def = deform_points(s.points(), &g, &x);
        let idx = SpatialIndex::new(s.points()).unwrap();
        let corr = find_correspondences(&def[..3], &idx);
        let rot = rotation_projections(&x);
        assert!(matches!(
            evaluate_energy(&g, &x, &def, &corr, &rot, &weights(), &[]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    /// Term-by-term scalar evaluation with plain loops and explicit indices.
    fn scalar_energy(
        source: &[Vec3],
        target: &[Vec3],
        g: &DeformationGraph,
        x: &NodeTransforms,
        w: &EnergyWeights,
    ) -> (f64, f64, f64) {
        let m = x.matrix();
        let mut e_align = 0.0;
        for (i, v) in source.iter().enumerate() {
            let mut vh = [0.0; 3];
            for inf in &g.influence()[i] {
                let p = g.node_positions()[inf.node];
                for c in 0..3 {
                    let mut acc = p[c] + m[(4 * inf.node + 3, c)];
                    for r in 0..3 {
                        acc += m[(4 * inf.node + r, c)] * (v[r] - p[r]);
                    }
                    vh[c] += inf.weight * acc;
                }
            }
            let mut best = f64::INFINITY;
            for u in target {
                let d = ((vh[0] - u[0]).powi(2) + (vh[1] - u[1]).powi(2) + (vh[2] - u[2]).powi(2)).sqrt();
                best = best.min(d);
            }
            e_align += 1.0 - (-best * best / (2.0 * w.nu_a * w.nu_a)).exp();
        }
        let mut e_reg = 0.0;
        for (e, &[a, b]) in g.edges().iter().enumerate() {
            let c = g.reg_weights()[e];
            for (i, j) in [(a, b), (b, a)] {
                let pi = g.node_positions()[i];
                let pj = g.node_positions()[j];
                let mut n2 = 0.0;
                for col in 0..3 {
                    let mut acc = pj[col] + m[(4 * j + 3, col)] - pi[col] - m[(4 * i + 3, col)];
                    for r in 0..3 {
                        acc += m[(4 * j + r, col)] * (pi[r] - pj[r]);
                    }
                    n2 += (c * acc).powi(2);
                }
                e_reg += 1.0 - (-n2 / (2.0 * w.nu_r * w.nu_r)).exp();
            }
        }
        let mut e_rot = 0.0;
        for j in 0..g.node_count() {
            let a = x.affine(j);
            let r = crate::geometry::project_to_rotation(&a);
            e_rot += (a - r.rotation.matrix()).norm_squared();
        }
        (e_align, e_reg, e_rot)
    }

    #[test]
    fn matches_scalar_oracle() {
        let s = strip();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let target: Vec<Vec3> = s
            .points()
            .iter()
            .map(|p| p + Vec3::new(0.0, 0.0, rng.random_range(-0.05..0.05)))
            .collect();
        let g = build_graph(&s, 0.45).unwrap();
        assert!(g.node_count() >= 2 && !g.edges().is_empty());
        let mut x = NodeTransforms::identity(g.node_count());
        for j in 0..g.node_count() {
            let a = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-0.2..0.2));
            let t = Vec3::from_fn(|_, _| rng.random_range(-0.05..0.05));
            x.set_node(j, &a, &t);
        }
        let w = weights();
        let def = deform_points(s.points(), &g, &x);
        let idx = SpatialIndex::new(&target).unwrap();
        let corr = find_correspondences(&def, &idx);
        let rot = rotation_projections(&x);
        let e = evaluate_energy(&g, &x, &def, &corr, &rot, &w, &[]).unwrap();
        let (a, r, o) = scalar_energy(s.points(), &target, &g, &x, &w);
        assert!((e.e_align - a).abs() < 1e-12);
        assert!((e.e_reg - r).abs() < 1e-12);
        assert!((e.e_rot - o).abs() < 1e-12);
        assert!((e.total - (a + w.alpha * r + w.beta * o)).abs() < 1e-11);
        assert!(e.e_align <= s.len() as f64);
        assert!(e.e_reg <= 2.0 * g.edges().len() as f64);
    }
}
