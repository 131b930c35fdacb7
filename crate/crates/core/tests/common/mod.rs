#![allow(dead_code)]

use nalgebra::Matrix3;
use nrreg_core::energy::{welsch, Correspondences, EnergyWeights};
use nrreg_core::geometry::{project_to_rotation, RotationProjection, Surface};
use nrreg_core::graph::{DeformationGraph, NodeTransforms};
use nrreg_core::Vec3;
use rand::Rng;

/// Flat `nx × ny` grid on `[0, lx] × [0, ly]`, two triangles per cell.
pub fn grid(nx: usize, ny: usize, lx: f64, ly: f64) -> Surface {
    let mut pts = Vec::with_capacity(nx * ny);
    for j in 0..ny {
        for i in 0..nx {
            pts.push(Vec3::new(
                lx * i as f64 / (nx - 1) as f64,
                ly * j as f64 / (ny - 1) as f64,
                0.0,
            ));
        }
    }
    let mut faces = Vec::new();
    for j in 0..ny - 1 {
        for i in 0..nx - 1 {
            let a = j * nx + i;
            faces.push([a, a + 1, a + nx + 1]);
            faces.push([a, a + nx + 1, a + nx]);
        }
    }
    Surface::from_mesh(pts, faces).unwrap()
}

pub fn random_transforms(rng: &mut impl Rng, nodes: usize, spread: f64) -> NodeTransforms {
    let mut x = NodeTransforms::identity(nodes);
    for j in 0..nodes {
        let a = Matrix3::identity() + Matrix3::from_fn(|_, _| rng.random_range(-spread..spread));
        let t = Vec3::from_fn(|_, _| rng.random_range(-spread..spread) * 0.2);
        x.set_node(j, &a, &t);
    }
    x
}

/// `v̂_i` computed with explicit loops over the stacked `4n × 3` matrix.
pub fn scalar_deformed(source: &[Vec3], g: &DeformationGraph, x: &NodeTransforms, i: usize) -> Vec3 {
    let m = x.matrix();
    let mut out = Vec3::zeros();
    for inf in &g.influence()[i] {
        let p = g.node_positions()[inf.node];
        for c in 0..3 {
            let mut acc = p[c] + m[(4 * inf.node + 3, c)];
            for r in 0..3 {
                acc += m[(4 * inf.node + r, c)] * (source[i][r] - p[r]);
            }
            out[c] += inf.weight * acc;
        }
    }
    out
}

pub fn scalar_reg_residual(g: &DeformationGraph, x: &NodeTransforms, i: usize, j: usize, c: f64) -> Vec3 {
    let m = x.matrix();
    let pi = g.node_positions()[i];
    let pj = g.node_positions()[j];
    let mut out = Vec3::zeros();
    for col in 0..3 {
        let mut acc = pj[col] + m[(4 * j + 3, col)] - pi[col] - m[(4 * i + 3, col)];
        for r in 0..3 {
            acc += m[(4 * j + r, col)] * (pi[r] - pj[r]);
        }
        out[col] = c * acc;
    }
    out
}

/// Full surrogate `Ê(X | X_k)` with every dropped constant restored, written
/// term by term from the per-term majorizers.
pub fn scalar_surrogate(
    source: &[Vec3],
    g: &DeformationGraph,
    x: &NodeTransforms,
    xk: &NodeTransforms,
    corr_k: &Correspondences,
    rot_k: &[RotationProjection],
    w: &EnergyWeights,
) -> f64 {
    let mut total = 0.0;
    for i in 0..source.len() {
        let y = (scalar_deformed(source, g, xk, i) - corr_k.target_point[i]).norm();
        let x_now = (scalar_deformed(source, g, x, i) - corr_k.target_point[i]).norm();
        let psi_y = welsch(y, w.nu_a);
        total += psi_y + (1.0 - psi_y) / (2.0 * w.nu_a * w.nu_a) * (x_now * x_now - y * y);
    }
    for (e, &[a, b]) in g.edges().iter().enumerate() {
        let c = g.reg_weights()[e];
        for (i, j) in [(a, b), (b, a)] {
            let y = scalar_reg_residual(g, xk, i, j, c).norm();
            let x_now = scalar_reg_residual(g, x, i, j, c).norm();
            let psi_y = welsch(y, w.nu_r);
            total += w.alpha * (psi_y + (1.0 - psi_y) / (2.0 * w.nu_r * w.nu_r) * (x_now * x_now - y * y));
        }
    }
    for (j, r) in rot_k.iter().enumerate() {
        total += w.beta * (x.affine(j) - r.rotation.matrix()).norm_squared();
    }
    total
}

/// Energy with correspondences and rotations frozen at the given values.
pub fn scalar_fixed_energy(
    source: &[Vec3],
    g: &DeformationGraph,
    x: &NodeTransforms,
    corr_k: &Correspondences,
    w: &EnergyWeights,
) -> f64 {
    let mut total = 0.0;
    for i in 0..source.len() {
        let d = (scalar_deformed(source, g, x, i) - corr_k.target_point[i]).norm();
        total += welsch(d, w.nu_a);
    }
    for (e, &[a, b]) in g.edges().iter().enumerate() {
        let c = g.reg_weights()[e];
        for (i, j) in [(a, b), (b, a)] {
            total += w.alpha * welsch(scalar_reg_residual(g, x, i, j, c).norm(), w.nu_r);
        }
    }
    for j in 0..g.node_count() {
        let a = x.affine(j);
        total += w.beta * (a - project_to_rotation(&a).rotation.matrix()).norm_squared();
    }
    total
}
