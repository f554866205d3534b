//! Discrete spatial operators on a [`Grid`] with homogeneous Dirichlet data.

use crate::geometry::MetricField;
use crate::grid::Grid;

/// Second-order divergence-form operator `sum_{ij} (b^{ij} z_i)_j`.
///
/// Diagonal entries of the metric are sampled on cell edges, the off-diagonal
/// entry on nodes. The assembled operator is symmetric on interior data.
#[derive(Clone, Debug)]
pub struct DivergenceOperator {
    grid: Grid,
    /// `b11` at `(i + 1/2, j)`, indexed by the left node.
    bxx: Vec<f64>,
    /// `b22` at `(i, j + 1/2)`, indexed by the lower node.
    byy: Vec<f64>,
    /// `b12` at nodes.
    bxy: Vec<f64>,
    has_cross: bool,
}

impl DivergenceOperator {
    pub fn new(grid: &Grid, metric: &MetricField) -> Self {
        let n = grid.n_nodes();
        let mut bxx = vec![0.0; n];
        let mut byy = vec![0.0; n];
        let mut bxy = vec![0.0; n];
        for node in 0..n {
            let x = grid.coords(node);
            bxx[node] = metric.at([x[0] + 0.5 * grid.h[0], x[1]])[0];
            if grid.dim == 2 {
                byy[node] = metric.at([x[0], x[1] + 0.5 * grid.h[1]])[2];
                bxy[node] = metric.at(x)[1];
            }
        }
        let has_cross = bxy.iter().any(|&v| v != 0.0);
        Self { grid: grid.clone(), bxx, byy, bxy, has_cross }
    }

    /// `out = L z` on interior nodes, zero on the boundary.
    pub fn apply(&self, z: &[f64], out: &mut [f64]) {
        let g = &self.grid;
        let nx = g.nx[0];
        let (hx, hy) = (g.h[0], g.h[1]);
        for n in 0..g.n_nodes() {
            if g.is_boundary(n) {
                out[n] = 0.0;
                continue;
            }
            let mut acc = (self.bxx[n] * (z[n + 1] - z[n]) - self.bxx[n - 1] * (z[n] - z[n - 1])) / (hx * hx);
            if g.dim == 2 {
                acc += (self.byy[n] * (z[n + nx] - z[n]) - self.byy[n - nx] * (z[n] - z[n - nx])) / (hy * hy);
                if self.has_cross {
                    let c = 1.0 / (4.0 * hx * hy);
                    let (e, w, nn, s) = (n + 1, n - 1, n + nx, n - nx);
                    acc += c * (self.bxy[e] * (z[e + nx] - z[e - nx]) - self.bxy[w] * (z[w + nx] - z[w - nx]));
                    acc += c * (self.bxy[nn] * (z[nn + 1] - z[nn - 1]) - self.bxy[s] * (z[s + 1] - z[s - 1]));
                }
            }
            out[n] = acc;
        }
    }
}

/// Centered first derivative along `axis` on interior nodes (zero on the boundary).
pub fn centered_diff(grid: &Grid, z: &[f64], axis: usize, out: &mut [f64]) {
    let stride = if axis == 0 { 1 } else { grid.nx[0] };
    let inv = 1.0 / (2.0 * grid.h[axis]);
    for n in 0..grid.n_nodes() {
        out[n] = if grid.is_boundary(n) { 0.0 } else { (z[n + stride] - z[n - stride]) * inv };
    }
}

/// Adjoint of `y -> coef ⊙ centered_diff(y)` restricted to interior nodes:
/// accumulates `D^T (coef ⊙ w)` into `out`.
pub fn centered_diff_transpose_add(grid: &Grid, coef: &[f64], w: &[f64], axis: usize, out: &mut [f64]) {
    let stride = if axis == 0 { 1 } else { grid.nx[0] };
    let inv = 1.0 / (2.0 * grid.h[axis]);
    for n in 0..grid.n_nodes() {
        if grid.is_boundary(n) {
            continue;
        }
        let r = coef[n] * w[n] * inv;
        if r != 0.0 {
            if !grid.is_boundary(n + stride) {
                out[n + stride] += r;
            }
            if !grid.is_boundary(n - stride) {
                out[n - stride] -= r;
            }
        }
    }
}
