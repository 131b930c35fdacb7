//! Anderson acceleration of a fixed-point map `x ↦ G(x)`.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

/// Diagonal shift used when the difference matrix is rank deficient.
pub const TIKHONOV: f64 = 1e-10;

/// Extrapolates from the stored `(G, F = G - x)` pairs, newest last.
///
/// With `k + 1` pairs the `k` consecutive differences of `F` are fitted to the
/// newest residual by least squares and the same combination of `G`
/// differences is subtracted from the newest `G`. A single pair returns the
/// newest `G` unchanged.
pub fn anderson_combine(g: &[DVector<f64>], f: &[DVector<f64>]) -> DVector<f64> {
    assert!(!g.is_empty() && g.len() == f.len(), "history must be non-empty and paired");
    let last = g.len() - 1;
    if last == 0 {
        return g[0].clone();
    }
    let dim = f[last].len();
    // column j - 1 holds F^(k-j+1) - F^(k-j)
    let mut df = DMatrix::zeros(dim, last);
    let mut dg = DMatrix::zeros(dim, last);
    for j in 1..=last {
        let newer = last + 1 - j;
        df.set_column(j - 1, &(&f[newer] - &f[newer - 1]));
        dg.set_column(j - 1, &(&g[newer] - &g[newer - 1]));
    }
    let theta = least_squares(&df, &f[last]);
    &g[last] - dg * theta
}

fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let cols = a.ncols();
    if a.nrows() >= cols {
        let qr = a.clone().qr();
        let r = qr.r();
        let scale = r.diagonal().amax();
        let well_posed = scale > 0.0 && r.diagonal().iter().all(|d| d.abs() > 1e-12 * scale);
        if well_posed {
            let qtb = qr.q().transpose() * b;
            if let Some(theta) = r.solve_upper_triangular(&qtb) {
                if theta.iter().all(|v| v.is_finite()) {
                    return theta;
                }
            }
        }
    }
    let mut normal = a.transpose() * a;
    for i in 0..cols {
        normal[(i, i)] += TIKHONOV;
    }
    let rhs = a.transpose() * b;
    normal
        .clone()
        .cholesky()
        .map(|c| c.solve(&rhs))
        .or_else(|| normal.lu().solve(&rhs))
        .filter(|t| t.iter().all(|v| v.is_finite()))
        .unwrap_or_else(|| DVector::zeros(cols))
}

/// Sliding window of the last `m + 1` `(G, F)` pairs, enough for `m` differences.
#[derive(Debug, Clone)]
pub struct AndersonHistory {
    window: usize,
    g: VecDeque<DVector<f64>>,
    f: VecDeque<DVector<f64>>,
}

impl AndersonHistory {
    pub fn new(window: usize) -> Self {
        AndersonHistory {
            window,
            g: VecDeque::with_capacity(window + 1),
            f: VecDeque::with_capacity(window + 1),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn clear(&mut self) {
        self.g.clear();
        self.f.clear();
    }

    /// Number of differences the next combination will use.
    pub fn depth(&self) -> usize {
        self.g.len().saturating_sub(1)
    }

    /// Records `G(x)` for the iterate `x` and returns the next iterate.
    pub fn step(&mut self, x: &DVector<f64>, gx: DVector<f64>) -> DVector<f64> {
        let fx = &gx - x;
        if self.g.len() == self.window + 1 {
            self.g.pop_front();
            self.f.pop_front();
        }
        self.g.push_back(gx);
        self.f.push_back(fx);
        if self.window == 0 {
            return self.g[0].clone();
        }
        anderson_combine(self.g.make_contiguous(), self.f.make_contiguous())
    }
}
