//! Metric, weight function and observation geometry.
//!
//! The weight `d` must make the matrix
//! `M^{ij} = sum_{i',j'} [2 b^{ij'} (b^{i'j} d_{i'})_{j'} - b^{ij}_{j'} b^{i'j'} d_{i'}]`
//! dominate `mu0 * b` and must have no critical point. Both are certified
//! nodewise on the grid; refining the grid tightens the certificate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{BoundaryNode, Grid};
use crate::io::{Field, Report};
use crate::scalar::Scalar;

/// Symmetric 2x2 matrix stored as its upper triangle `[b11, b12, b22]`.
pub type Sym2 = [f64; 3];

fn sym_full<S: Scalar>(s: [S; 3]) -> [[S; 2]; 2] {
    [[s[0], s[1]], [s[1], s[2]]]
}

/// Smallest and largest eigenvalue of a symmetric 2x2 matrix.
pub fn sym_eigen(m: Sym2) -> (f64, f64) {
    let tr = m[0] + m[2];
    let diff = 0.5 * (m[0] - m[2]);
    let r = (diff * diff + m[1] * m[1]).sqrt();
    (0.5 * tr - r, 0.5 * tr + r)
}

/// Smallest `mu` with `m - mu * b` positive semidefinite, for symmetric `m`
/// and symmetric positive definite `b`, in `dim` dimensions.
pub fn generalized_min_eigen(m: Sym2, b: Sym2, dim: usize) -> f64 {
    if dim == 1 {
        return m[0] / b[0];
    }
    // det(m - mu b) = a mu^2 - p mu + c
    let a = b[0] * b[2] - b[1] * b[1];
    let p = m[0] * b[2] + m[2] * b[0] - 2.0 * m[1] * b[1];
    let c = m[0] * m[2] - m[1] * m[1];
    let disc = (p * p - 4.0 * a * c).max(0.0);
    let s = disc.sqrt();
    let (r1, r2) = if p >= 0.0 {
        let big = (p + s) / (2.0 * a);
        (big, if big != 0.0 { c / (a * big) } else { 0.0 })
    } else {
        let small = (p - s) / (2.0 * a);
        (small, if small != 0.0 { c / (a * small) } else { 0.0 })
    };
    r1.min(r2)
}

/// Affine metric `b(x) = base + sum_k x_k * slope[k]`, symmetric by storage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricField {
    pub dim: usize,
    pub base: Sym2,
    #[serde(default)]
    pub slope: [Sym2; 2],
    /// Ellipticity floor.
    pub s0: f64,
}

impl MetricField {
    pub fn identity(dim: usize) -> Self {
        Self { dim, base: [1.0, 0.0, 1.0], slope: [[0.0; 3]; 2], s0: 1.0 }
    }

    pub fn constant(dim: usize, b: Sym2, s0: f64) -> Self {
        Self { dim, base: b, slope: [[0.0; 3]; 2], s0 }
    }

    pub fn is_constant(&self) -> bool {
        self.slope.iter().all(|s| s.iter().all(|&v| v == 0.0))
    }

    pub fn at(&self, x: [f64; 2]) -> Sym2 {
        let mut b = self.base;
        for k in 0..self.dim {
            for e in 0..3 {
                b[e] += x[k] * self.slope[k][e];
            }
        }
        if self.dim == 1 {
            b[1] = 0.0;
            b[2] = 0.0;
        }
        b
    }

    /// Full matrix on any scalar (differentiable in `x`).
    pub fn eval<S: Scalar>(&self, x: [S; 2]) -> [[S; 2]; 2] {
        let mut b = [S::cst(self.base[0]), S::cst(self.base[1]), S::cst(self.base[2])];
        for k in 0..self.dim {
            for e in 0..3 {
                if self.slope[k][e] != 0.0 {
                    b[e] += x[k].scale(self.slope[k][e]);
                }
            }
        }
        if self.dim == 1 {
            b[1] = S::zero();
            b[2] = S::zero();
        }
        sym_full(b)
    }

    /// `d b^{ij} / d x_k` (constant for an affine metric).
    pub fn deriv(&self, k: usize) -> [[f64; 2]; 2] {
        let mut s = if k < self.dim { self.slope[k] } else { [0.0; 3] };
        if self.dim == 1 {
            s[1] = 0.0;
            s[2] = 0.0;
        }
        sym_full(s)
    }

    pub fn min_eigen_at(&self, x: [f64; 2]) -> f64 {
        let b = self.at(x);
        if self.dim == 1 {
            b[0]
        } else {
            sym_eigen(b).0
        }
    }

    pub fn max_eigen_at(&self, x: [f64; 2]) -> f64 {
        let b = self.at(x);
        if self.dim == 1 {
            b[0]
        } else {
            sym_eigen(b).1
        }
    }

    /// Checks `b >= s0` at every node.
    pub fn check_ellipticity(&self, grid: &Grid) -> Result<()> {
        if !(self.s0 > 0.0) {
            return Err(Error::InvalidParameters(format!("ellipticity floor s0 must be positive, got {}", self.s0)));
        }
        for n in 0..grid.n_nodes() {
            let e = self.min_eigen_at(grid.coords(n));
            if !(e >= self.s0) {
                return Err(Error::DegenerateMetric { node: n, eigenvalue: e, s0: self.s0 });
            }
        }
        Ok(())
    }

    /// Largest eigenvalue over the nodes and cell midpoints used by the stencil.
    pub fn max_eigen_on(&self, grid: &Grid) -> f64 {
        // affine in x, so the extreme values over the box sit at its corners
        let mut m = f64::MIN;
        for cx in [grid.lo[0], grid.hi[0]] {
            for cy in [grid.lo[1], grid.hi[1]] {
                m = m.max(self.max_eigen_at([cx, cy]));
            }
        }
        m
    }
}

/// Description of the weight function `d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightKind {
    /// `d(x) = a |x - center|^2 + offset`.
    Quadratic { a: f64, center: [f64; 2], offset: f64 },
    /// Nodal values on a grid; derivatives by second-order differences.
    Tabulated { grid: Grid, values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightSpec {
    pub dim: usize,
    pub kind: WeightKind,
    /// `mu0` certified by [`check_condition_d`] (scaled exactly by dilation).
    #[serde(default)]
    pub certified_mu0: Option<f64>,
    #[serde(default)]
    pub min_grad: Option<f64>,
}

impl WeightSpec {
    pub fn quadratic(dim: usize, a: f64, center: [f64; 2], offset: f64) -> Self {
        Self { dim, kind: WeightKind::Quadratic { a, center, offset }, certified_mu0: None, min_grad: None }
    }

    pub fn tabulated(grid: &Grid, values: Vec<f64>) -> Self {
        Self { dim: grid.dim, kind: WeightKind::Tabulated { grid: grid.clone(), values }, certified_mu0: None, min_grad: None }
    }

    pub fn is_analytic(&self) -> bool {
        matches!(self.kind, WeightKind::Quadratic { .. })
    }

    /// Analytic evaluation on any scalar. Panics for tabulated weights.
    pub fn eval<S: Scalar>(&self, x: [S; 2]) -> S {
        match &self.kind {
            WeightKind::Quadratic { a, center, offset } => {
                let mut r2 = S::zero();
                for k in 0..self.dim {
                    let dx = x[k] - S::cst(center[k]);
                    r2 += dx * dx;
                }
                r2.scale(*a) + S::cst(*offset)
            }
            WeightKind::Tabulated { .. } => panic!("tabulated weights have no analytic evaluator"),
        }
    }

    /// Value, gradient and Hessian at grid node `node`.
    pub fn nodal(&self, grid: &Grid, node: usize) -> (f64, [f64; 2], [[f64; 2]; 2]) {
        match &self.kind {
            WeightKind::Quadratic { a, center, offset } => {
                let x = grid.coords(node);
                let mut v = *offset;
                let mut g = [0.0; 2];
                let mut h = [[0.0; 2]; 2];
                for k in 0..self.dim {
                    let dx = x[k] - center[k];
                    v += a * dx * dx;
                    g[k] = 2.0 * a * dx;
                    h[k][k] = 2.0 * a;
                }
                (v, g, h)
            }
            WeightKind::Tabulated { grid: tg, values } => {
                debug_assert_eq!(tg.n_nodes(), grid.n_nodes());
                let g = tg.gradient_at(values, node);
                let mut h = [[0.0; 2]; 2];
                for k in 0..self.dim {
                    let comp: Vec<f64> = (0..tg.n_nodes()).map(|n| tg.gradient_at(values, n)[k]).collect();
                    let gk = tg.gradient_at(&comp, node);
                    for m in 0..self.dim {
                        h[k][m] = gk[m];
                    }
                }
                if self.dim == 2 {
                    let s = 0.5 * (h[0][1] + h[1][0]);
                    h[0][1] = s;
                    h[1][0] = s;
                }
                (values[node], g, h)
            }
        }
    }

    pub fn nodal_values(&self, grid: &Grid) -> Vec<f64> {
        match &self.kind {
            WeightKind::Tabulated { values, .. } => values.clone(),
            _ => (0..grid.n_nodes()).map(|n| self.nodal(grid, n).0).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionReport {
    pub mu0: f64,
    pub min_grad: f64,
    pub ok: bool,
}

impl Report for ConditionReport {
    fn fields(&self) -> Vec<(&'static str, Field)> {
        vec![("mu0", self.mu0.into()), ("min_grad", self.min_grad.into()), ("ok", self.ok.into())]
    }
}

/// The matrix of the weight condition at one node (symmetrized).
fn weight_matrix(metric: &MetricField, x: [f64; 2], grad: [f64; 2], hess: [[f64; 2]; 2]) -> Sym2 {
    let n = metric.dim;
    let b = sym_full(metric.at(x));
    let db: Vec<[[f64; 2]; 2]> = (0..2).map(|k| metric.deriv(k)).collect();
    let mut m = [[0.0; 2]; 2];
    for i in 0..n {
        for j in 0..n {
            let mut acc = 0.0;
            for ip in 0..n {
                for jp in 0..n {
                    // (b^{i'j} d_{i'})_{j'}
                    let inner = db[jp][ip][j] * grad[ip] + b[ip][j] * hess[ip][jp];
                    acc += 2.0 * b[i][jp] * inner - db[jp][i][j] * b[ip][jp] * grad[ip];
                }
            }
            m[i][j] = acc;
        }
    }
    [m[0][0], 0.5 * (m[0][1] + m[1][0]), m[1][1]]
}

/// Certifies the weight condition nodewise.
pub fn check_condition_d(metric: &MetricField, weight: &WeightSpec, grid: &Grid) -> Result<ConditionReport> {
    metric.check_ellipticity(grid)?;
    let mut mu0 = f64::INFINITY;
    let mut min_grad = f64::INFINITY;
    for node in 0..grid.n_nodes() {
        let x = grid.coords(node);
        let (d, g, h) = weight.nodal(grid, node);
        if !(d > 0.0) {
            return Err(Error::NonPositiveWeight { node, value: d });
        }
        let gn = (g[0] * g[0] + g[1] * g[1]).sqrt();
        min_grad = min_grad.min(gn);
        let m = weight_matrix(metric, x, g, h);
        mu0 = mu0.min(generalized_min_eigen(m, metric.at(x), grid.dim));
    }
    Ok(ConditionReport { mu0, min_grad, ok: mu0 > 0.0 && min_grad > 0.0 })
}

/// Certifies the weight and records `mu0` and `min |grad d|` on it.
pub fn certify(metric: &MetricField, weight: &WeightSpec, grid: &Grid) -> Result<(WeightSpec, ConditionReport)> {
    let rep = check_condition_d(metric, weight, grid)?;
    let mut w = weight.clone();
    w.certified_mu0 = Some(rep.mu0);
    w.min_grad = Some(rep.min_grad);
    Ok((w, rep))
}

/// Weight for `a * d + b`, with the certified `mu0` scaled by `a`.
///
/// Positivity of the dilated weight is checked on `grid`.
pub fn dilate_weight(weight: &WeightSpec, a: f64, b: f64, grid: &Grid) -> Result<WeightSpec> {
    if !(a > 0.0) {
        return Err(Error::InvalidParameters(format!("dilation factor must be positive, got {a}")));
    }
    let kind = match &weight.kind {
        WeightKind::Quadratic { a: qa, center, offset } => WeightKind::Quadratic { a: a * qa, center: *center, offset: a * offset + b },
        WeightKind::Tabulated { grid: tg, values } => {
            WeightKind::Tabulated { grid: tg.clone(), values: values.iter().map(|v| a * v + b).collect() }
        }
    };
    let out = WeightSpec {
        dim: weight.dim,
        kind,
        certified_mu0: weight.certified_mu0.map(|m| a * m),
        min_grad: weight.min_grad.map(|g| a * g),
    };
    for node in 0..grid.n_nodes() {
        let v = out.nodal(grid, node).0;
        if !(v > 0.0) {
            return Err(Error::NonPositiveWeight { node, value: v });
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Condition2Report {
    pub r0: f64,
    pub r1: f64,
    pub t0: f64,
    /// `(1/4) b grad d . grad d >= R1^2` everywhere.
    pub flux_dominates: bool,
    /// `T > 2 R1`.
    pub time_long_enough: bool,
    /// `(2R1/T)^2 < c1 < 2R1/T`.
    pub c1_window: bool,
    /// `mu0 - 4 c1 - c0 > 0`.
    pub mu0_margin: bool,
}

impl Condition2Report {
    pub fn all_pass(&self) -> bool {
        self.flux_dominates && self.time_long_enough && self.c1_window && self.mu0_margin
    }

    /// Human-readable list of failing flags (1-based, as numbered in the docs).
    pub fn failures(&self) -> Vec<String> {
        let mut v = Vec::new();
        if !self.flux_dominates {
            v.push("flag (1): (1/4) b(grad d, grad d) < R1^2 somewhere".to_string());
        }
        if !self.time_long_enough {
            v.push(format!("flag (2): T <= T0 = 2 R1 = {}", self.t0));
        }
        if !self.c1_window {
            v.push("flag (3): c1 outside ((2R1/T)^2, 2R1/T)".to_string());
        }
        if !self.mu0_margin {
            v.push("flag (4): mu0 - 4 c1 - c0 <= 0".to_string());
        }
        v
    }
}

impl Report for Condition2Report {
    fn fields(&self) -> Vec<(&'static str, Field)> {
        vec![
            ("R0", self.r0.into()),
            ("R1", self.r1.into()),
            ("T0", self.t0.into()),
            ("flag1_flux", self.flux_dominates.into()),
            ("flag2_time", self.time_long_enough.into()),
            ("flag3_c1", self.c1_window.into()),
            ("flag4_mu0", self.mu0_margin.into()),
        ]
    }
}

/// Evaluates the four time/weight compatibility flags.
///
/// `mu0` is taken from the weight's certificate when present, otherwise it is
/// recomputed.
pub fn check_condition2(weight: &WeightSpec, metric: &MetricField, grid: &Grid, c0: f64, c1: f64) -> Result<Condition2Report> {
    let mu0 = match weight.certified_mu0 {
        Some(m) => m,
        None => check_condition_d(metric, weight, grid)?.mu0,
    };
    let mut dmax = f64::MIN;
    let mut dmin = f64::MAX;
    let mut flux_min = f64::MAX;
    for node in 0..grid.n_nodes() {
        let (d, g, _) = weight.nodal(grid, node);
        dmax = dmax.max(d);
        dmin = dmin.min(d);
        let b = sym_full(metric.at(grid.coords(node)));
        let mut q = 0.0;
        for i in 0..grid.dim {
            for j in 0..grid.dim {
                q += b[i][j] * g[i] * g[j];
            }
        }
        flux_min = flux_min.min(0.25 * q);
    }
    let r1 = dmax.max(0.0).sqrt();
    let r0 = dmin.max(0.0).sqrt();
    let t = grid.t_final;
    let ratio = 2.0 * r1 / t;
    Ok(Condition2Report {
        r0,
        r1,
        t0: 2.0 * r1,
        flux_dominates: flux_min >= dmax,
        time_long_enough: t > 2.0 * r1,
        c1_window: ratio * ratio < c1 && c1 < ratio,
        mu0_margin: mu0 - 4.0 * c1 - c0 > 0.0,
    })
}

/// Boundary nodes tagged by the observation sign test, plus the interior collar.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundaryPartition {
    pub boundary: Vec<BoundaryNode>,
    pub tagged: Vec<bool>,
    pub delta: f64,
    /// Nodes within Euclidean distance `delta` of some observation node.
    pub collar: Vec<usize>,
}

impl BoundaryPartition {
    pub fn gamma0(&self) -> impl Iterator<Item = &BoundaryNode> + '_ {
        self.boundary.iter().zip(&self.tagged).filter(|(_, &t)| t).map(|(b, _)| b)
    }

    pub fn gamma0_nodes(&self) -> Vec<BoundaryNode> {
        self.gamma0().copied().collect()
    }
}

/// `Gamma_0 = { x on the boundary : sum b^{ij} d_i nu^j > 0 }` and its collar.
pub fn compute_gamma0(weight: &WeightSpec, metric: &MetricField, grid: &Grid, delta: f64) -> Result<BoundaryPartition> {
    if !(delta >= 0.0) {
        return Err(Error::InvalidParameters(format!("collar width must be nonnegative, got {delta}")));
    }
    let boundary = grid.boundary_nodes();
    let tagged: Vec<bool> = boundary
        .iter()
        .map(|bn| {
            let (_, g, _) = weight.nodal(grid, bn.node);
            let b = sym_full(metric.at(grid.coords(bn.node)));
            let mut flux = 0.0;
            for i in 0..grid.dim {
                for j in 0..grid.dim {
                    flux += b[i][j] * g[i] * bn.normal[j];
                }
            }
            flux > 0.0
        })
        .collect();
    if !tagged.iter().any(|&t| t) {
        return Err(Error::EmptyGamma0);
    }
    let obs: Vec<[f64; 2]> = boundary.iter().zip(&tagged).filter(|(_, &t)| t).map(|(b, _)| grid.coords(b.node)).collect();
    let collar = (0..grid.n_nodes())
        .filter(|&n| {
            let x = grid.coords(n);
            obs.iter().any(|p| {
                let dx = x[0] - p[0];
                let dy = x[1] - p[1];
                // small slack so nodes exactly at distance delta are kept
                (dx * dx + dy * dy).sqrt() <= delta * (1.0 + 1e-12)
            })
        })
        .collect();
    Ok(BoundaryPartition { boundary, tagged, delta, collar })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bench() -> (Grid, MetricField, WeightSpec) {
        let g = Grid::interval(51, 10.0, 1000).unwrap();
        (g, MetricField::identity(1), WeightSpec::quadratic(1, 4.0, [-1.0, 0.0], 0.0))
    }

    #[test]
    fn condition_d_one_dimensional() {
        let (g, m, _) = bench();
        let w = WeightSpec::quadratic(1, 1.0, [-1.0, 0.0], 0.0);
        let r = check_condition_d(&m, &w, &g).unwrap();
        assert!((r.mu0 - 4.0).abs() < 1e-12);
        assert!((r.min_grad - 2.0).abs() < 1e-12);
        assert!(r.ok);
    }

    #[test]
    fn condition_d_two_dimensional() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[11, 11], 10.0, 100).unwrap();
        let w = WeightSpec::quadratic(2, 1.0, [-1.0, -1.0], 0.0);
        let r = check_condition_d(&MetricField::identity(2), &w, &g).unwrap();
        assert!((r.mu0 - 4.0).abs() < 4e-8);
        assert!(r.ok);
    }

    #[test]
    fn constant_weight_is_rejected() {
        let (g, m, _) = bench();
        let w = WeightSpec::quadratic(1, 0.0, [0.0, 0.0], 3.0);
        let r = check_condition_d(&m, &w, &g).unwrap();
        assert_eq!(r.min_grad, 0.0);
        assert!(!r.ok);
    }

    #[test]
    fn nonpositive_weight_and_degenerate_metric() {
        let (g, m, _) = bench();
        let w = WeightSpec::quadratic(1, 1.0, [-1.0, 0.0], -2.0);
        assert!(matches!(check_condition_d(&m, &w, &g), Err(Error::NonPositiveWeight { .. })));
        let bad = MetricField { dim: 1, base: [1.0, 0.0, 0.0], slope: [[-2.0, 0.0, 0.0], [0.0; 3]], s0: 0.1 };
        let w = WeightSpec::quadratic(1, 1.0, [-1.0, 0.0], 0.0);
        assert!(matches!(check_condition_d(&bad, &w, &g), Err(Error::DegenerateMetric { .. })));
    }

    #[test]
    fn dilation() {
        let (g, m, _) = bench();
        let (w, _) = certify(&m, &WeightSpec::quadratic(1, 1.0, [-1.0, 0.0], 0.0), &g).unwrap();
        let d = dilate_weight(&w, 4.0, 0.0, &g).unwrap();
        assert_eq!(d.certified_mu0, Some(16.0));
        let rerun = check_condition_d(&m, &d, &g).unwrap();
        assert!((rerun.mu0 - 16.0).abs() < 1e-12);
        assert_eq!(dilate_weight(&w, 1.0, 0.0, &g).unwrap(), w);
        assert!(matches!(dilate_weight(&w, 1.0, -2.0, &g), Err(Error::NonPositiveWeight { .. })));
    }

    #[test]
    fn condition2_flags() {
        let (g, m, w) = bench();
        let r = check_condition2(&w, &m, &g, 1.0, 0.7).unwrap();
        assert!((r.r0 - 2.0).abs() < 1e-12 && (r.r1 - 4.0).abs() < 1e-12 && (r.t0 - 8.0).abs() < 1e-12);
        assert!(r.all_pass(), "{r:?}");
        let short = Grid::interval(51, 6.0, 1000).unwrap();
        let r = check_condition2(&w, &m, &short, 1.0, 0.7).unwrap();
        assert!(!r.time_long_enough && r.flux_dominates && r.mu0_margin);
        let r = check_condition2(&w, &m, &g, 1.0, 0.5).unwrap();
        assert!(!r.c1_window && r.time_long_enough);
    }

    #[test]
    fn gamma0_one_dimensional() {
        let (g, m, w) = bench();
        let p = compute_gamma0(&w, &m, &g, 0.2).unwrap();
        let nodes: Vec<usize> = p.gamma0().map(|b| b.node).collect();
        assert_eq!(nodes, vec![50]);
        // x in [0.8, 1]
        assert_eq!(p.collar, (40..=50).collect::<Vec<_>>());
    }

    #[test]
    fn gamma0_two_dimensional_top_and_right() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[9, 9], 10.0, 100).unwrap();
        let w = WeightSpec::quadratic(2, 1.0, [-1.0, -1.0], 0.0);
        let p = compute_gamma0(&w, &MetricField::identity(2), &g, 0.1).unwrap();
        for (b, &t) in p.boundary.iter().zip(&p.tagged) {
            let x = g.coords(b.node);
            let want = (x[0] + 1.0) * b.normal[0] + (x[1] + 1.0) * b.normal[1] > 0.0;
            assert_eq!(t, want);
            assert_eq!(t, b.normal[0] > 0.0 || b.normal[1] > 0.0);
        }
    }

    #[test]
    fn inward_weight_gives_empty_gamma0() {
        // gradient points into the domain on both ends: d = -(x-0.5)^2 + 5
        let g = Grid::interval(11, 10.0, 100).unwrap();
        let w = WeightSpec::quadratic(1, -1.0, [0.5, 0.0], 5.0);
        assert!(matches!(compute_gamma0(&w, &MetricField::identity(1), &g, 0.1), Err(Error::EmptyGamma0)));
    }

    #[test]
    fn tabulated_matches_analytic() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[21, 21], 10.0, 100).unwrap();
        let q = WeightSpec::quadratic(2, 1.0, [-1.0, -1.0], 0.0);
        let t = WeightSpec::tabulated(&g, q.nodal_values(&g));
        let m = MetricField::identity(2);
        let rq = check_condition_d(&m, &q, &g).unwrap();
        let rt = check_condition_d(&m, &t, &g).unwrap();
        assert!((rq.mu0 - rt.mu0).abs() < 1e-8, "{} vs {}", rq.mu0, rt.mu0);
        let pq = compute_gamma0(&q, &m, &g, 0.1).unwrap();
        let pt = compute_gamma0(&t, &m, &g, 0.1).unwrap();
        assert_eq!(pq.tagged, pt.tagged);
    }
}
