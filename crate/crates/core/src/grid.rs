//! Rectangular space-time grids, quadrature weights and discrete norms.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rectangular mesh of `[lo, hi]` in one or two dimensions plus a uniform
/// partition of `[0, T]`. Nodes are stored row-major with `x` fastest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub dim: usize,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub nx: [usize; 2],
    pub h: [f64; 2],
    pub t_final: f64,
    pub nt: usize,
    pub dt: f64,
}

/// A boundary node with its outward unit normal.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundaryNode {
    pub node: usize,
    pub normal: [f64; 2],
    /// Quadrature weight along the boundary (1 in one dimension).
    pub weight: f64,
}

impl Grid {
    pub fn new(lo: &[f64], hi: &[f64], nx: &[usize], t_final: f64, nt: usize) -> Result<Self> {
        let dim = lo.len();
        if !(dim == 1 || dim == 2) || hi.len() != dim || nx.len() != dim {
            return Err(Error::InvalidGrid(format!("dimension must be 1 or 2 with matching extents, got {dim}")));
        }
        if !(t_final > 0.0) || !t_final.is_finite() {
            return Err(Error::InvalidGrid(format!("final time must be positive, got {t_final}")));
        }
        if nt < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 time steps, got {nt}")));
        }
        let mut g = Grid { dim, lo: [0.0; 2], hi: [0.0; 2], nx: [1; 2], h: [1.0; 2], t_final, nt, dt: t_final / nt as f64 };
        for k in 0..dim {
            if nx[k] < 3 {
                return Err(Error::InvalidGrid(format!("need at least 3 nodes per axis, got {}", nx[k])));
            }
            if !(hi[k] > lo[k]) {
                return Err(Error::InvalidGrid(format!("empty extent on axis {k}: [{}, {}]", lo[k], hi[k])));
            }
            g.lo[k] = lo[k];
            g.hi[k] = hi[k];
            g.nx[k] = nx[k];
            g.h[k] = (hi[k] - lo[k]) / (nx[k] - 1) as f64;
        }
        Ok(g)
    }

    /// Unit interval with `nx` nodes.
    pub fn interval(nx: usize, t_final: f64, nt: usize) -> Result<Self> {
        Self::new(&[0.0], &[1.0], &[nx], t_final, nt)
    }

    /// Same domain with spacing and time step halved.
    pub fn refined(&self) -> Self {
        let nx: Vec<usize> = (0..self.dim).map(|k| 2 * self.nx[k] - 1).collect();
        Self::new(&self.lo[..self.dim], &self.hi[..self.dim], &nx, self.t_final, 2 * self.nt).expect("refinement of a valid grid")
    }

    pub fn n_nodes(&self) -> usize {
        self.nx[0] * self.nx[1]
    }

    /// Node index from per-axis indices.
    pub fn index(&self, i: usize, j: usize) -> usize {
        i + self.nx[0] * j
    }

    pub fn ij(&self, node: usize) -> (usize, usize) {
        (node % self.nx[0], node / self.nx[0])
    }

    pub fn coords(&self, node: usize) -> [f64; 2] {
        let (i, j) = self.ij(node);
        let x = self.lo[0] + i as f64 * self.h[0];
        let y = if self.dim == 2 { self.lo[1] + j as f64 * self.h[1] } else { 0.0 };
        [x, y]
    }

    pub fn time(&self, level: usize) -> f64 {
        level as f64 * self.dt
    }

    pub fn is_boundary(&self, node: usize) -> bool {
        let (i, j) = self.ij(node);
        i == 0 || i + 1 == self.nx[0] || (self.dim == 2 && (j == 0 || j + 1 == self.nx[1]))
    }

    pub fn interior_nodes(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.n_nodes()).filter(move |&n| !self.is_boundary(n))
    }

    /// Product trapezoid weights over the closed domain.
    pub fn node_weights(&self) -> Vec<f64> {
        let axis = |k: usize, i: usize| -> f64 {
            if i == 0 || i + 1 == self.nx[k] {
                0.5 * self.h[k]
            } else {
                self.h[k]
            }
        };
        (0..self.n_nodes())
            .map(|n| {
                let (i, j) = self.ij(n);
                let w = axis(0, i);
                if self.dim == 2 {
                    w * axis(1, j)
                } else {
                    w
                }
            })
            .collect()
    }

    /// Trapezoid weights over the time levels `0..=nt`.
    pub fn time_weights(&self) -> Vec<f64> {
        (0..=self.nt).map(|k| if k == 0 || k == self.nt { 0.5 * self.dt } else { self.dt }).collect()
    }

    /// Boundary nodes with outward normals. Corners of the square are skipped
    /// because their normal is undefined.
    pub fn boundary_nodes(&self) -> Vec<BoundaryNode> {
        let mut out = Vec::new();
        if self.dim == 1 {
            out.push(BoundaryNode { node: 0, normal: [-1.0, 0.0], weight: 1.0 });
            out.push(BoundaryNode { node: self.nx[0] - 1, normal: [1.0, 0.0], weight: 1.0 });
            return out;
        }
        let (nx, ny) = (self.nx[0], self.nx[1]);
        for j in 1..ny - 1 {
            out.push(BoundaryNode { node: self.index(0, j), normal: [-1.0, 0.0], weight: self.h[1] });
            out.push(BoundaryNode { node: self.index(nx - 1, j), normal: [1.0, 0.0], weight: self.h[1] });
        }
        for i in 1..nx - 1 {
            out.push(BoundaryNode { node: self.index(i, 0), normal: [0.0, -1.0], weight: self.h[0] });
            out.push(BoundaryNode { node: self.index(i, ny - 1), normal: [0.0, 1.0], weight: self.h[0] });
        }
        out.sort_by_key(|b| b.node);
        out
    }

    /// Samples `f(x)` at every node; boundary values are kept as evaluated.
    pub fn sample(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        (0..self.n_nodes()).map(|n| f(self.coords(n))).collect()
    }

    /// Samples `f` and zeroes the boundary (Dirichlet data).
    pub fn sample_dirichlet(&self, f: impl Fn([f64; 2]) -> f64) -> Vec<f64> {
        (0..self.n_nodes()).map(|n| if self.is_boundary(n) { 0.0 } else { f(self.coords(n)) }).collect()
    }

    /// CFL number `dt * sqrt(lambda_max * sum_k 1/h_k^2)` of the explicit scheme.
    pub fn cfl(&self, lambda_max: f64) -> f64 {
        let s: f64 = (0..self.dim).map(|k| 1.0 / (self.h[k] * self.h[k])).sum();
        self.dt * (lambda_max * s).sqrt()
    }

    /// Centered nodal gradient; second-order one-sided stencils on the boundary.
    pub fn gradient_at(&self, z: &[f64], node: usize) -> [f64; 2] {
        let (i, j) = self.ij(node);
        let mut g = [0.0; 2];
        for k in 0..self.dim {
            let (pos, n, stride) = if k == 0 { (i, self.nx[0], 1) } else { (j, self.nx[1], self.nx[0]) };
            let h = self.h[k];
            g[k] = if pos == 0 {
                (-3.0 * z[node] + 4.0 * z[node + stride] - z[node + 2 * stride]) / (2.0 * h)
            } else if pos + 1 == n {
                (3.0 * z[node] - 4.0 * z[node - stride] + z[node - 2 * stride]) / (2.0 * h)
            } else {
                (z[node + stride] - z[node - stride]) / (2.0 * h)
            };
        }
        g
    }

    /// Discrete `|grad z|^2_{L^2}` from forward differences on cell edges.
    ///
    /// This is the quadratic form of the standard 3-point (5-point in 2-D)
    /// Dirichlet stiffness matrix, so it is positive definite on interior data.
    pub fn grad_sq(&self, z: &[f64]) -> f64 {
        let (nx, ny) = (self.nx[0], self.nx[1]);
        let mut acc = crate::stats::Kahan::default();
        if self.dim == 1 {
            for i in 0..nx - 1 {
                let d = (z[i + 1] - z[i]) / self.h[0];
                acc.add(d * d * self.h[0]);
            }
            return acc.sum();
        }
        // each x-edge carries the y-trapezoid weight of its row, and vice versa
        for j in 0..ny {
            let wy = if j == 0 || j + 1 == ny { 0.5 * self.h[1] } else { self.h[1] };
            for i in 0..nx - 1 {
                let n = self.index(i, j);
                let d = (z[n + 1] - z[n]) / self.h[0];
                acc.add(d * d * self.h[0] * wy);
            }
        }
        for j in 0..ny - 1 {
            for i in 0..nx {
                let wx = if i == 0 || i + 1 == nx { 0.5 * self.h[0] } else { self.h[0] };
                let n = self.index(i, j);
                let d = (z[n + nx] - z[n]) / self.h[1];
                acc.add(d * d * self.h[1] * wx);
            }
        }
        acc.sum()
    }

    /// Trapezoid `int f g`.
    pub fn l2_dot(&self, f: &[f64], g: &[f64]) -> f64 {
        let w = self.node_weights();
        crate::stats::kahan_sum(f.iter().zip(g).zip(&w).map(|((a, b), w)| a * b * w))
    }

    /// Applies the stiffness operator `S` with `z^T S z = grad_sq(z)` for data
    /// vanishing on the boundary. Output is zero on the boundary.
    pub fn stiffness_apply(&self, z: &[f64], out: &mut [f64]) {
        let (nx, ny) = (self.nx[0], self.nx[1]);
        for n in 0..self.n_nodes() {
            if self.is_boundary(n) {
                out[n] = 0.0;
                continue;
            }
            if self.dim == 1 {
                out[n] = (2.0 * z[n] - z[n - 1] - z[n + 1]) / self.h[0];
            } else {
                let (hx, hy) = (self.h[0], self.h[1]);
                out[n] = (2.0 * z[n] - z[n - 1] - z[n + 1]) * hy / hx + (2.0 * z[n] - z[n - nx] - z[n + nx]) * hx / hy;
            }
        }
        let _ = ny;
    }

    /// Solves `S x = r` on interior nodes (tridiagonal in 1-D, conjugate
    /// gradients in 2-D).
    pub fn stiffness_solve(&self, r: &[f64]) -> Vec<f64> {
        let n = self.n_nodes();
        let mut x = vec![0.0; n];
        if self.dim == 1 {
            let m = self.nx[0] - 2;
            let h = self.h[0];
            // Thomas algorithm on the interior block: diag 2/h, off-diagonal -1/h
            let mut c = vec![0.0; m];
            let mut d = vec![0.0; m];
            for k in 0..m {
                let rhs = r[k + 1];
                if k == 0 {
                    c[k] = -0.5;
                    d[k] = rhs / (2.0 / h);
                } else {
                    let denom = 2.0 / h + c[k - 1] / h;
                    c[k] = (-1.0 / h) / denom;
                    d[k] = (rhs + d[k - 1] / h) / denom;
                }
            }
            for k in (0..m).rev() {
                let next = if k + 1 < m { x[k + 2] } else { 0.0 };
                x[k + 1] = d[k] - c[k] * next;
            }
            return x;
        }
        let mut rr: Vec<f64> = (0..n).map(|i| if self.is_boundary(i) { 0.0 } else { r[i] }).collect();
        let mut p = rr.clone();
        let mut ap = vec![0.0; n];
        let dot = |a: &[f64], b: &[f64]| crate::stats::kahan_sum(a.iter().zip(b).map(|(x, y)| x * y));
        let mut rs = dot(&rr, &rr);
        let r0 = rs.sqrt();
        if r0 == 0.0 {
            return x;
        }
        for _ in 0..10 * n {
            self.stiffness_apply(&p, &mut ap);
            let alpha = rs / dot(&p, &ap);
            for i in 0..n {
                x[i] += alpha * p[i];
                rr[i] -= alpha * ap[i];
            }
            let rs_new = dot(&rr, &rr);
            if rs_new.sqrt() <= 1e-14 * r0 {
                break;
            }
            let beta = rs_new / rs;
            for i in 0..n {
                p[i] = rr[i] + beta * p[i];
            }
            rs = rs_new;
        }
        x
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn spacing_is_exact() {
        let g = Grid::new(&[0.0, -1.0], &[1.0, 2.0], &[11, 31], 1.0, 10).unwrap();
        assert_eq!(g.h[0], 0.1);
        assert_eq!(g.h[1], 0.1);
        assert_eq!(g.n_nodes(), 341);
    }

    #[test]
    fn rejects_bad_grids() {
        assert!(Grid::interval(2, 1.0, 10).is_err());
        assert!(Grid::interval(5, 0.0, 10).is_err());
        assert!(Grid::interval(5, 1.0, 1).is_err());
        assert!(Grid::new(&[0.0; 3], &[1.0; 3], &[5; 3], 1.0, 10).is_err());
    }

    #[test]
    fn weights_integrate_constants() {
        let g = Grid::new(&[0.0, 0.0], &[2.0, 1.0], &[9, 5], 3.0, 12).unwrap();
        let s: f64 = g.node_weights().iter().sum();
        assert!((s - 2.0).abs() < 1e-14);
        let st: f64 = g.time_weights().iter().sum();
        assert!((st - 3.0).abs() < 1e-14);
        let b: f64 = g.boundary_nodes().iter().map(|b| b.weight).sum();
        // perimeter minus the four corner half-cells
        assert!((b - (6.0 - 2.0 * 0.25 - 2.0 * 0.25)).abs() < 1e-14);
    }

    #[test]
    fn grad_sq_of_sine() {
        let g = Grid::interval(401, 1.0, 10).unwrap();
        let z = g.sample_dirichlet(|x| (PI * x[0]).sin());
        assert!((g.grad_sq(&z) - PI * PI / 2.0).abs() < 1e-4);
    }

    #[test]
    fn stiffness_solve_inverts_apply() {
        for g in [Grid::interval(17, 1.0, 4).unwrap(), Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[9, 7], 1.0, 4).unwrap()] {
            let z = g.sample_dirichlet(|x| (3.0 * x[0]).sin() + x[1] * x[1]);
            let mut r = vec![0.0; g.n_nodes()];
            g.stiffness_apply(&z, &mut r);
            let back = g.stiffness_solve(&r);
            for n in 0..g.n_nodes() {
                assert!((back[n] - z[n]).abs() < 1e-10, "node {n}");
            }
            // quadratic form identity
            let q: f64 = z.iter().zip(&r).map(|(a, b)| a * b).sum();
            assert!((q - g.grad_sq(&z)).abs() < 1e-10 * q.abs().max(1.0));
        }
    }
}
