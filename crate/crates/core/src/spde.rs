//! Explicit solver for the stochastic wave equation
//!
//! `dz_t - sum (b^{ij} z_i)_j dt = F(z, z_t, grad z) dt + K(z) dB(t)`, `z = 0` on
//! the boundary, where in linear mode `F = b1 z_t + b2 . grad z + b3 z + f` and
//! `K = b4 z + g`.
//!
//! Time stepping is leapfrog in kick-drift form with the velocity
//! `rho^k = (z^k - z^{k-1}) / dt` (`rho^0 = z_1`):
//!
//! ```text
//! rho^{k+1} = rho^k + c_k (dt * [L z^k + F^k] + K^k dB_k)
//! z^{k+1}   = z^k + dt * rho^{k+1}
//! ```
//!
//! with `c_0 = 1/2` and `c_k = 1` otherwise. The noise multiplies `K` at the
//! left endpoint (Itô). Lower-order terms are explicit.

use std::borrow::Cow;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::brownian::BrownianPath;
use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geometry::MetricField;
use crate::grid::Grid;
use crate::io::{Field, Report};
use crate::operator::{centered_diff, DivergenceOperator};
use crate::scalar::Dual;
use crate::stats::{kahan_sum, mean_se};

pub const FIELD_VARS: &[&str] = &["t", "x", "y"];
pub const DRIFT_VARS: &[&str] = &["t", "x", "y", "eta", "rho", "zx", "zy"];
pub const DIFFUSION_VARS: &[&str] = &["t", "x", "y", "eta"];

/// Coefficient fields of the linear equation, each a function of `(t, x, y)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearCoefficients {
    pub b1: Expr,
    pub b2: [Expr; 2],
    pub b3: Expr,
    pub b4: Expr,
    pub f: Expr,
    pub g: Expr,
}

impl LinearCoefficients {
    pub fn zero() -> Self {
        let z = || Expr::constant(0.0, FIELD_VARS);
        Self { b1: z(), b2: [z(), z()], b3: z(), b4: z(), f: z(), g: z() }
    }

    pub fn parse(b1: &str, b2: [&str; 2], b3: &str, b4: &str, f: &str, g: &str) -> Result<Self> {
        let p = |s: &str| Expr::parse(s, FIELD_VARS);
        Ok(Self { b1: p(b1)?, b2: [p(b2[0])?, p(b2[1])?], b3: p(b3)?, b4: p(b4)?, f: p(f)?, g: p(g)? })
    }

    fn all(&self) -> [&Expr; 7] {
        [&self.b1, &self.b2[0], &self.b2[1], &self.b3, &self.b4, &self.f, &self.g]
    }
}

/// Lipschitz nonlinearities `F(t, x, eta, rho, zeta)` and `K(t, x, eta)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Nonlinearity {
    pub drift: Expr,
    pub diffusion: Expr,
    pub lipschitz: f64,
}

impl Nonlinearity {
    pub fn parse(drift: &str, diffusion: &str, lipschitz: f64) -> Result<Self> {
        Ok(Self { drift: Expr::parse(drift, DRIFT_VARS)?, diffusion: Expr::parse(diffusion, DIFFUSION_VARS)?, lipschitz })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Dynamics {
    Linear(LinearCoefficients),
    Nonlinear(Nonlinearity),
}

/// Nodal samples of the linear coefficient fields at one time.
#[derive(Clone, Debug)]
struct LinearNodal {
    b1: Vec<f64>,
    b2: [Vec<f64>; 2],
    b3: Vec<f64>,
    b4: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

impl LinearNodal {
    fn sample(grid: &Grid, c: &LinearCoefficients, t: f64) -> Self {
        let s = |e: &Expr| -> Vec<f64> {
            if let Some(v) = e.as_constant() {
                return vec![v; grid.n_nodes()];
            }
            (0..grid.n_nodes())
                .map(|n| {
                    let x = grid.coords(n);
                    e.eval(&[t, x[0], x[1]])
                })
                .collect()
        };
        Self { b1: s(&c.b1), b2: [s(&c.b2[0]), s(&c.b2[1])], b3: s(&c.b3), b4: s(&c.b4), f: s(&c.f), g: s(&c.g) }
    }
}

/// Partial derivatives of the drift and diffusion at one level, per node.
#[derive(Clone, Debug)]
pub struct Tangent {
    pub d_eta: Vec<f64>,
    pub d_rho: Vec<f64>,
    pub d_zeta: [Vec<f64>; 2],
    pub k_eta: Vec<f64>,
}

/// Problem definition: grid, metric, dynamics and the derived coefficient norms.
#[derive(Clone, Debug)]
pub struct ProblemSpec {
    pub grid: Grid,
    pub metric: MetricField,
    pub dynamics: Dynamics,
    /// Spatial Lebesgue exponent of the `b3` norm, in `[dim, inf]`.
    pub p_exponent: f64,
    r1: f64,
    r2: f64,
    cfl: f64,
    op: DivergenceOperator,
    frozen: Option<LinearNodal>,
    needs_gradient: bool,
    hash: String,
}

impl ProblemSpec {
    pub fn new(grid: Grid, metric: MetricField, dynamics: Dynamics, p_exponent: f64) -> Result<Self> {
        if metric.dim != grid.dim {
            return Err(Error::InvalidParameters(format!("metric dimension {} != grid dimension {}", metric.dim, grid.dim)));
        }
        metric.check_ellipticity(&grid)?;
        if !(p_exponent >= grid.dim as f64) {
            return Err(Error::InvalidParameters(format!("exponent p must lie in [n, inf], got {p_exponent}")));
        }
        if let Dynamics::Nonlinear(nl) = &dynamics {
            if !(nl.lipschitz >= 0.0) {
                return Err(Error::InvalidParameters("Lipschitz constant must be nonnegative".into()));
            }
        }
        let cfl = grid.cfl(metric.max_eigen_on(&grid));
        let op = DivergenceOperator::new(&grid, &metric);
        let (frozen, needs_gradient) = match &dynamics {
            Dynamics::Linear(c) => {
                let frozen = if c.all().iter().any(|e| e.uses(0)) { None } else { Some(LinearNodal::sample(&grid, c, 0.0)) };
                (frozen, !(c.b2[0].is_zero() && c.b2[1].is_zero()))
            }
            Dynamics::Nonlinear(nl) => (None, nl.drift.uses(5) || nl.drift.uses(6)),
        };
        let mut spec = Self { grid, metric, dynamics, p_exponent, r1: 0.0, r2: 0.0, cfl, op, frozen, needs_gradient, hash: String::new() };
        let (r1, r2) = spec.coefficient_norms();
        spec.r1 = r1;
        spec.r2 = r2;
        spec.hash = spec.compute_hash();
        Ok(spec)
    }

    pub fn linear(grid: Grid, metric: MetricField, coeffs: LinearCoefficients) -> Result<Self> {
        Self::new(grid, metric, Dynamics::Linear(coeffs), f64::INFINITY)
    }

    /// Same problem on another grid.
    pub fn on_grid(&self, grid: Grid) -> Result<Self> {
        Self::new(grid, self.metric.clone(), self.dynamics.clone(), self.p_exponent)
    }

    /// Same problem with different dynamics.
    pub fn with_dynamics(&self, dynamics: Dynamics) -> Result<Self> {
        Self::new(self.grid.clone(), self.metric.clone(), dynamics, self.p_exponent)
    }

    pub fn r1(&self) -> f64 {
        self.r1
    }

    pub fn r2(&self) -> f64 {
        self.r2
    }

    pub fn cfl(&self) -> f64 {
        self.cfl
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn is_linear(&self) -> bool {
        matches!(self.dynamics, Dynamics::Linear(_))
    }

    pub fn has_noise(&self) -> bool {
        match &self.dynamics {
            Dynamics::Linear(c) => !(c.b4.is_zero() && c.g.is_zero()),
            Dynamics::Nonlinear(nl) => !nl.diffusion.is_zero(),
        }
    }

    pub fn has_forcing(&self) -> bool {
        match &self.dynamics {
            Dynamics::Linear(c) => !(c.f.is_zero() && c.g.is_zero()),
            Dynamics::Nonlinear(_) => false,
        }
    }

    fn compute_hash(&self) -> String {
        let mut desc = format!("{:?}|{:?}|p={}|", self.grid, self.metric, self.p_exponent);
        match &self.dynamics {
            Dynamics::Linear(c) => {
                for e in c.all() {
                    desc.push_str(e.source());
                    desc.push(';');
                }
            }
            Dynamics::Nonlinear(nl) => {
                desc.push_str(&format!("{};{};{}", nl.drift.source(), nl.diffusion.source(), nl.lipschitz));
            }
        }
        let digest = Sha256::digest(desc.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    fn linear_nodal(&self, level: usize) -> Option<Cow<'_, LinearNodal>> {
        match &self.dynamics {
            Dynamics::Linear(c) => Some(match &self.frozen {
                Some(f) => Cow::Borrowed(f),
                None => Cow::Owned(LinearNodal::sample(&self.grid, c, self.grid.time(level))),
            }),
            Dynamics::Nonlinear(_) => None,
        }
    }

    /// `r1 = |b2|_inf + |(b1, b4)|_inf` and `r2 = sup_t |b3(t)|_{L^p}`, from
    /// the sampled fields. Both vanish in nonlinear mode.
    fn coefficient_norms(&self) -> (f64, f64) {
        let Dynamics::Linear(c) = &self.dynamics else {
            return (0.0, 0.0);
        };
        let levels: Vec<usize> = if self.frozen.is_some() { vec![0] } else { (0..=self.grid.nt).collect() };
        let w = self.grid.node_weights();
        let (mut b2max, mut b14max, mut r2) = (0.0f64, 0.0f64, 0.0f64);
        for k in levels {
            let nod = LinearNodal::sample(&self.grid, c, self.grid.time(k));
            for n in 0..self.grid.n_nodes() {
                b2max = b2max.max((nod.b2[0][n].powi(2) + nod.b2[1][n].powi(2)).sqrt());
                b14max = b14max.max((nod.b1[n].powi(2) + nod.b4[n].powi(2)).sqrt());
            }
            let lp = if self.p_exponent.is_infinite() {
                nod.b3.iter().fold(0.0f64, |m, v| m.max(v.abs()))
            } else {
                kahan_sum(nod.b3.iter().zip(&w).map(|(v, w)| v.abs().powf(self.p_exponent) * w)).powf(1.0 / self.p_exponent)
            };
            r2 = r2.max(lp);
        }
        (b2max + b14max, r2)
    }

    /// `L z + F` and `K` at level `k` (interior nodes; zero on the boundary).
    fn rates(&self, level: usize, z: &[f64], vel: &[f64], ws: &mut Workspace, drift: &mut [f64], diff: &mut [f64]) {
        let g = &self.grid;
        self.op.apply(z, drift);
        if self.needs_gradient {
            centered_diff(g, z, 0, &mut ws.gx);
            if g.dim == 2 {
                centered_diff(g, z, 1, &mut ws.gy);
            }
        }
        match &self.dynamics {
            Dynamics::Linear(_) => {
                let c = self.linear_nodal(level).expect("linear");
                for n in 0..g.n_nodes() {
                    if g.is_boundary(n) {
                        diff[n] = 0.0;
                        continue;
                    }
                    let mut a = c.b1[n] * vel[n] + c.b3[n] * z[n] + c.f[n];
                    if self.needs_gradient {
                        a += c.b2[0][n] * ws.gx[n] + c.b2[1][n] * ws.gy[n];
                    }
                    drift[n] += a;
                    diff[n] = c.b4[n] * z[n] + c.g[n];
                }
            }
            Dynamics::Nonlinear(nl) => {
                let t = g.time(level);
                for n in 0..g.n_nodes() {
                    if g.is_boundary(n) {
                        diff[n] = 0.0;
                        continue;
                    }
                    let x = g.coords(n);
                    let (zx, zy) = if self.needs_gradient { (ws.gx[n], ws.gy[n]) } else { (0.0, 0.0) };
                    drift[n] += nl.drift.eval(&[t, x[0], x[1], z[n], vel[n], zx, zy]);
                    diff[n] = nl.diffusion.eval(&[t, x[0], x[1], z[n]]);
                }
            }
        }
    }

    /// Partial derivatives of `F` and `K` at level `k` about `(z, vel)`.
    pub fn tangent(&self, level: usize, z: &[f64], vel: &[f64]) -> Tangent {
        let g = &self.grid;
        let nn = g.n_nodes();
        match &self.dynamics {
            Dynamics::Linear(_) => {
                let c = self.linear_nodal(level).expect("linear");
                Tangent { d_eta: c.b3.clone(), d_rho: c.b1.clone(), d_zeta: c.b2.clone(), k_eta: c.b4.clone() }
            }
            Dynamics::Nonlinear(nl) => {
                let mut gx = vec![0.0; nn];
                let mut gy = vec![0.0; nn];
                if self.needs_gradient {
                    centered_diff(g, z, 0, &mut gx);
                    if g.dim == 2 {
                        centered_diff(g, z, 1, &mut gy);
                    }
                }
                let t = g.time(level);
                let mut tan = Tangent { d_eta: vec![0.0; nn], d_rho: vec![0.0; nn], d_zeta: [vec![0.0; nn], vec![0.0; nn]], k_eta: vec![0.0; nn] };
                for n in 0..nn {
                    if g.is_boundary(n) {
                        continue;
                    }
                    let x = g.coords(n);
                    let c = |v: f64| Dual::constant(v);
                    let r = nl.drift.eval(&[c(t), c(x[0]), c(x[1]), Dual::var(z[n], 0), Dual::var(vel[n], 1), Dual::var(gx[n], 2), c(gy[n])]);
                    tan.d_eta[n] = r.d[0];
                    tan.d_rho[n] = r.d[1];
                    tan.d_zeta[0][n] = r.d[2];
                    if g.dim == 2 && nl.drift.uses(6) {
                        let r = nl.drift.eval(&[c(t), c(x[0]), c(x[1]), c(z[n]), c(vel[n]), c(gx[n]), Dual::var(gy[n], 0)]);
                        tan.d_zeta[1][n] = r.d[0];
                    }
                    let k = nl.diffusion.eval(&[c(t), c(x[0]), c(x[1]), Dual::var(z[n], 0)]);
                    tan.k_eta[n] = k.d[0];
                }
                tan
            }
        }
    }

    /// `int (f^2 + g^2) dx` at level `k` (zero in nonlinear mode).
    pub fn forcing_sq_at(&self, level: usize) -> f64 {
        match self.linear_nodal(level) {
            Some(c) => {
                let w = self.grid.node_weights();
                kahan_sum((0..self.grid.n_nodes()).map(|n| (c.f[n] * c.f[n] + c.g[n] * c.g[n]) * w[n]))
            }
            None => 0.0,
        }
    }

    /// `int_{t_a}^{t_b} int f^2` and the same for `g`, by trapezoid in time.
    pub fn forcing_norms_sq(&self, ka: usize, kb: usize) -> (f64, f64) {
        let Some(_) = self.linear_nodal(0) else {
            return (0.0, 0.0);
        };
        let w = self.grid.node_weights();
        let dt = self.grid.dt;
        let (mut ff, mut gg) = (crate::stats::Kahan::default(), crate::stats::Kahan::default());
        for k in ka..=kb {
            let c = self.linear_nodal(k).expect("linear");
            let wt = if k == ka || k == kb { 0.5 * dt } else { dt };
            let wt = if ka == kb { 0.0 } else { wt };
            for n in 0..self.grid.n_nodes() {
                ff.add(c.f[n] * c.f[n] * w[n] * wt);
                gg.add(c.g[n] * c.g[n] * w[n] * wt);
            }
        }
        (ff.sum(), gg.sum())
    }
}

#[derive(Clone, Debug)]
struct Workspace {
    gx: Vec<f64>,
    gy: Vec<f64>,
}

impl Workspace {
    fn new(n: usize) -> Self {
        Self { gx: vec![0.0; n], gy: vec![0.0; n] }
    }
}

/// `(z, z_t)` on the grid at one time level.
#[derive(Clone, Debug, PartialEq)]
pub struct StateSnapshot {
    pub level: usize,
    pub z: Vec<f64>,
    pub zt: Vec<f64>,
}

impl StateSnapshot {
    pub fn zero(grid: &Grid) -> Self {
        Self { level: 0, z: vec![0.0; grid.n_nodes()], zt: vec![0.0; grid.n_nodes()] }
    }

    /// Initial data from `(z0, z1)` functions, Dirichlet values enforced.
    pub fn from_fns(grid: &Grid, z0: impl Fn([f64; 2]) -> f64, z1: impl Fn([f64; 2]) -> f64) -> Self {
        Self { level: 0, z: grid.sample_dirichlet(z0), zt: grid.sample_dirichlet(z1) }
    }

    /// `a * self + b * other`.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        Self {
            level: self.level,
            z: self.z.iter().zip(&other.z).map(|(x, y)| a * x + b * y).collect(),
            zt: self.zt.iter().zip(&other.zt).map(|(x, y)| a * x + b * y).collect(),
        }
    }

    pub fn scaled(&self, a: f64) -> Self {
        Self { level: self.level, z: self.z.iter().map(|v| a * v).collect(), zt: self.zt.iter().map(|v| a * v).collect() }
    }

    /// Squared `H^1_0 x L^2` norm `|grad z|^2 + |z_t|^2`.
    pub fn h_norm_sq(&self, grid: &Grid) -> f64 {
        grid.grad_sq(&self.z) + grid.l2_dot(&self.zt, &self.zt)
    }

    /// `H^1_0 x L^2` inner product.
    pub fn h_dot(&self, other: &Self, grid: &Grid) -> f64 {
        let mut s = vec![0.0; grid.n_nodes()];
        grid.stiffness_apply(&other.z, &mut s);
        kahan_sum(self.z.iter().zip(&s).map(|(a, b)| a * b)) + grid.l2_dot(&self.zt, &other.zt)
    }

    fn enforce_dirichlet(&mut self, grid: &Grid) {
        for n in 0..grid.n_nodes() {
            if grid.is_boundary(n) {
                self.z[n] = 0.0;
                self.zt[n] = 0.0;
            }
        }
    }
}

/// Internal leapfrog state: displacement and backward velocity at level `k`.
#[derive(Clone, Debug, PartialEq)]
pub struct StepState {
    pub level: usize,
    pub z: Vec<f64>,
    pub vel: Vec<f64>,
}

impl StepState {
    pub fn initial(init: &StateSnapshot, grid: &Grid) -> Self {
        let mut s = init.clone();
        s.enforce_dirichlet(grid);
        Self { level: 0, z: s.z, vel: s.zt }
    }
}

/// Advances one time level.
pub fn step(state: &StepState, spec: &ProblemSpec, path: &BrownianPath) -> Result<StepState> {
    let n = spec.grid.n_nodes();
    let mut ws = Workspace::new(n);
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut next = state.clone();
    advance(&mut next, spec, path, &mut ws, &mut drift, &mut diff)?;
    Ok(next)
}

fn advance(
    st: &mut StepState,
    spec: &ProblemSpec,
    path: &BrownianPath,
    ws: &mut Workspace,
    drift: &mut [f64],
    diff: &mut [f64],
) -> Result<()> {
    if spec.cfl > 1.0 {
        return Err(Error::CflViolation { cfl: spec.cfl });
    }
    let g = &spec.grid;
    let k = st.level;
    if k >= g.nt {
        return Err(Error::InvalidParameters(format!("cannot step past the final level {}", g.nt)));
    }
    if path.increments.len() != g.nt {
        return Err(Error::InvalidParameters(format!("Brownian path has {} increments, grid has {} steps", path.increments.len(), g.nt)));
    }
    spec.rates(k, &st.z, &st.vel, ws, drift, diff);
    let dw = path.increments[k];
    let dt = g.dt;
    let c = if k == 0 { 0.5 } else { 1.0 };
    for n in 0..g.n_nodes() {
        if g.is_boundary(n) {
            st.z[n] = 0.0;
            st.vel[n] = 0.0;
            continue;
        }
        st.vel[n] += c * (dt * drift[n] + diff[n] * dw);
        st.z[n] += dt * st.vel[n];
        if !st.z[n].is_finite() || !st.vel[n].is_finite() {
            return Err(Error::NonFiniteState { level: k + 1, node: n });
        }
    }
    st.level = k + 1;
    Ok(())
}

/// Ordered snapshots at every level of one path.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub grid: Grid,
    pub snapshots: Vec<StateSnapshot>,
    pub path: BrownianPath,
    pub spec_hash: String,
    /// Backward velocities `rho^k`, kept for linearization.
    pub vel: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn initial(&self) -> &StateSnapshot {
        &self.snapshots[0]
    }

    pub fn final_state(&self) -> &StateSnapshot {
        self.snapshots.last().expect("nonempty trajectory")
    }

    /// Snapshot nearest to time `t`.
    pub fn at_time(&self, t: f64) -> &StateSnapshot {
        let k = ((t / self.grid.dt).round().max(0.0) as usize).min(self.grid.nt);
        &self.snapshots[k]
    }

    /// Max over levels of the `H^1_0 x L^2` norm.
    pub fn max_norm(&self) -> f64 {
        self.snapshots.iter().map(|s| s.h_norm_sq(&self.grid).sqrt()).fold(0.0, f64::max)
    }
}

/// Integrates from `initial` over all levels.
pub fn solve(initial: &StateSnapshot, spec: &ProblemSpec, path: &BrownianPath) -> Result<Trajectory> {
    let g = &spec.grid;
    let n = g.n_nodes();
    let mut ws = Workspace::new(n);
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    let mut st = StepState::initial(initial, g);
    let mut zs = Vec::with_capacity(g.nt + 1);
    let mut vels = Vec::with_capacity(g.nt + 1);
    zs.push(st.z.clone());
    vels.push(st.vel.clone());
    for _ in 0..g.nt {
        advance(&mut st, spec, path, &mut ws, &mut drift, &mut diff)?;
        zs.push(st.z.clone());
        vels.push(st.vel.clone());
    }
    let nt = g.nt;
    let snapshots = (0..=nt)
        .map(|k| {
            let zt: Vec<f64> = if k == 0 {
                vels[0].clone()
            } else if k < nt {
                vels[k].iter().zip(&vels[k + 1]).map(|(a, b)| 0.5 * (a + b)).collect()
            } else {
                vels[k].iter().zip(&vels[k - 1]).map(|(a, b)| 1.5 * a - 0.5 * b).collect()
            };
            StateSnapshot { level: k, z: zs[k].clone(), zt }
        })
        .collect();
    Ok(Trajectory { grid: g.clone(), snapshots, path: path.clone(), spec_hash: spec.hash.clone(), vel: vels })
}

/// `int (z_t^2 + |grad z|^2 + r2^{2/(2 - n/p)} z^2) dx` for one path.
pub fn energy(grid: &Grid, state: &StateSnapshot, r2: f64, p: f64) -> f64 {
    let n = grid.dim as f64;
    let expo = 2.0 / (2.0 - n / p);
    let lower = if r2 == 0.0 { 0.0 } else { r2.powf(expo) * grid.l2_dot(&state.z, &state.z) };
    grid.l2_dot(&state.zt, &state.zt) + grid.grad_sq(&state.z) + lower
}

/// Kinetic plus gradient energy, without the lower-order term.
pub fn energy_h(grid: &Grid, state: &StateSnapshot) -> f64 {
    energy(grid, state, 0.0, f64::INFINITY)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnergyReport {
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub ratio: f64,
    pub ok: bool,
    pub c: f64,
    /// Smallest constant for which the inequality holds on this ensemble.
    pub c_min: f64,
    pub energy_s: f64,
    pub forcing: f64,
}

impl Report for EnergyReport {
    fn fields(&self) -> Vec<(&'static str, Field)> {
        vec![
            ("lhs", self.lhs.into()),
            ("lhs_se", self.lhs_se.into()),
            ("rhs", self.rhs.into()),
            ("ratio", self.ratio.into()),
            ("ok", self.ok.into()),
            ("C", self.c.into()),
            ("C_min", self.c_min.into()),
            ("energy_s", self.energy_s.into()),
            ("forcing", self.forcing.into()),
        ]
    }
}

/// Smallest `c > 0` with `lhs <= rhs(c)` for increasing `rhs`, by bisection in log scale.
pub fn minimal_constant(lhs: f64, rhs: impl Fn(f64) -> f64) -> f64 {
    if lhs <= 0.0 {
        return 0.0;
    }
    let (mut lo, mut hi) = (1e-14f64, 1.0f64);
    while rhs(hi) < lhs {
        hi *= 2.0;
        if hi > 1e12 {
            return f64::INFINITY;
        }
    }
    for _ in 0..200 {
        let mid = (lo * hi).sqrt();
        if rhs(mid) >= lhs {
            hi = mid;
        } else {
            lo = mid;
        }
        if hi / lo < 1.0 + 1e-12 {
            break;
        }
    }
    hi
}

/// Compares the energy at time `t` with the Gronwall bound built from time `s`.
pub fn verify_energy_estimate(ensemble: &[Trajectory], spec: &ProblemSpec, s: f64, t: f64, c: f64) -> Result<EnergyReport> {
    let g = &spec.grid;
    check_times(g, s, t)?;
    let at = |tr: &Trajectory, time: f64| energy_h(g, tr.at_time(time));
    let s_samples: Vec<f64> = ensemble.iter().map(|tr| at(tr, s)).collect();
    let t_samples: Vec<f64> = ensemble.iter().map(|tr| at(tr, t)).collect();
    energy_estimate_from_samples(&s_samples, &t_samples, spec, s, t, c)
}

fn check_times(g: &Grid, s: f64, t: f64) -> Result<()> {
    let span = 0.0..=g.t_final * (1.0 + 1e-12);
    if !span.contains(&s) || !span.contains(&t) {
        return Err(Error::InvalidParameters(format!("times must lie in [0, T], got s={s}, t={t}")));
    }
    Ok(())
}

/// Per-path energies at `s` and `t` of one path.
pub fn energy_samples(traj: &Trajectory, s: f64, t: f64) -> (f64, f64) {
    (energy_h(&traj.grid, traj.at_time(s)), energy_h(&traj.grid, traj.at_time(t)))
}

/// The energy estimate from per-path energies, for ensembles too large to keep.
pub fn energy_estimate_from_samples(s_samples: &[f64], t_samples: &[f64], spec: &ProblemSpec, s: f64, t: f64, c: f64) -> Result<EnergyReport> {
    let g = &spec.grid;
    if t_samples.is_empty() || s_samples.len() != t_samples.len() {
        return Err(Error::DegenerateEnsemble("empty ensemble".into()));
    }
    check_times(g, s, t)?;
    let lhs = mean_se(t_samples);
    let es = mean_se(s_samples).mean;
    let ks = ((s / g.dt).round() as usize).min(g.nt);
    let kt = ((t / g.dt).round() as usize).min(g.nt);
    let (ff, gg) = spec.forcing_norms_sq(ks.min(kt), ks.max(kt));
    let forcing = ff + gg;
    let n = g.dim as f64;
    let growth = spec.r1 * spec.r1 + spec.r2.powf(1.0 / (2.0 - n / spec.p_exponent)) + 1.0;
    let rhs_of = |cc: f64| cc * (cc * growth * g.t_final).exp() * es + cc * forcing;
    let rhs = rhs_of(c);
    let ratio = if rhs > 0.0 { lhs.mean / rhs } else if lhs.mean == 0.0 { 0.0 } else { f64::INFINITY };
    Ok(EnergyReport {
        lhs: lhs.mean,
        lhs_se: lhs.se,
        rhs,
        ratio,
        ok: ratio <= 1.0,
        c,
        c_min: minimal_constant(lhs.mean, rhs_of),
        energy_s: es,
        forcing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::brownian::sample_brownian;
    use std::f64::consts::PI;

    fn free_wave(nx: usize, t: f64, nt: usize) -> ProblemSpec {
        ProblemSpec::linear(Grid::interval(nx, t, nt).unwrap(), MetricField::identity(1), LinearCoefficients::zero()).unwrap()
    }

    fn standing(grid: &Grid) -> StateSnapshot {
        StateSnapshot::from_fns(grid, |x| (PI * x[0]).sin(), |_| 0.0)
    }

    #[test]
    fn zero_is_a_fixed_point() {
        let spec = free_wave(21, 1.0, 40);
        let p = sample_brownian(3, 0, 40, spec.grid.dt).unwrap();
        let tr = solve(&StateSnapshot::zero(&spec.grid), &spec, &p).unwrap();
        assert_eq!(tr.snapshots.len(), 41);
        assert!(tr.snapshots.iter().all(|s| s.z.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn single_step_matches_solve() {
        let spec = free_wave(21, 1.0, 40);
        let p = BrownianPath::zero(40, spec.grid.dt);
        let init = standing(&spec.grid);
        let tr = solve(&init, &spec, &p).unwrap();
        let mut st = StepState::initial(&init, &spec.grid);
        for _ in 0..3 {
            st = step(&st, &spec, &p).unwrap();
        }
        assert_eq!(st.z, tr.snapshots[3].z);
    }

    #[test]
    fn cfl_violation_is_refused() {
        let spec = free_wave(101, 1.0, 50);
        assert!(spec.cfl() > 1.0);
        let p = BrownianPath::zero(50, spec.grid.dt);
        assert!(matches!(solve(&standing(&spec.grid), &spec, &p), Err(Error::CflViolation { .. })));
    }

    #[test]
    fn blow_up_is_reported() {
        let g = Grid::interval(21, 50.0, 1000).unwrap();
        let c = LinearCoefficients::parse("0", ["0", "0"], "1e6", "0", "0", "0").unwrap();
        let spec = ProblemSpec::linear(g, MetricField::identity(1), c).unwrap();
        let p = BrownianPath::zero(1000, spec.grid.dt);
        assert!(matches!(solve(&standing(&spec.grid), &spec, &p), Err(Error::NonFiniteState { .. })));
    }

    #[test]
    fn boundary_stays_zero_with_noise() {
        let g = Grid::new(&[0.0, 0.0], &[1.0, 1.0], &[11, 11], 1.0, 40).unwrap();
        let c = LinearCoefficients::parse("0.3", ["x", "0.1"], "y", "1", "x*y", "sin(pi*x)").unwrap();
        let spec = ProblemSpec::linear(g.clone(), MetricField::identity(2), c).unwrap();
        let p = sample_brownian(1, 0, 40, g.dt).unwrap();
        let tr = solve(&StateSnapshot::from_fns(&g, |x| x[0] * x[1], |_| 1.0), &spec, &p).unwrap();
        for s in &tr.snapshots {
            for n in 0..g.n_nodes() {
                if g.is_boundary(n) {
                    assert_eq!(s.z[n], 0.0);
                }
            }
        }
    }

    #[test]
    fn norms_are_recomputed_from_fields() {
        let g = Grid::interval(11, 1.0, 10).unwrap();
        let c = LinearCoefficients::parse("1", ["-2", "0"], "x", "0.5", "0", "0").unwrap();
        let spec = ProblemSpec::linear(g, MetricField::identity(1), c).unwrap();
        assert!((spec.r1() - (2.0 + (1.25f64).sqrt())).abs() < 1e-14);
        assert!((spec.r2() - 1.0).abs() < 1e-14);
    }

    #[test]
    fn energy_of_sine() {
        let g = Grid::interval(201, 1.0, 10).unwrap();
        assert_eq!(energy(&g, &StateSnapshot::zero(&g), 0.0, f64::INFINITY), 0.0);
        let e = energy(&g, &standing(&g), 0.0, f64::INFINITY);
        assert!((e - PI * PI / 2.0).abs() < 1e-3 * PI * PI / 2.0);
    }

    #[test]
    fn energy_estimate_equal_times() {
        let spec = free_wave(21, 1.0, 40);
        let tr = solve(&standing(&spec.grid), &spec, &BrownianPath::zero(40, spec.grid.dt)).unwrap();
        let r = verify_energy_estimate(&[tr], &spec, 0.5, 0.5, 2.0).unwrap();
        // rhs = C e^{C T} E_s, lhs = E_s
        assert!((r.ratio - 1.0 / (2.0 * (2.0f64).exp())).abs() < 1e-12);
        assert!(r.ok);
    }

    #[test]
    fn nonlinear_zero_data_stays_zero() {
        let g = Grid::interval(21, 1.0, 40).unwrap();
        let spec = ProblemSpec::new(g.clone(), MetricField::identity(1), Dynamics::Nonlinear(Nonlinearity::parse("sin(eta)", "0", 1.0).unwrap()), f64::INFINITY).unwrap();
        let tr = solve(&StateSnapshot::zero(&g), &spec, &sample_brownian(1, 0, 40, g.dt).unwrap()).unwrap();
        assert!(tr.snapshots.iter().all(|s| s.z.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_tangent_matches_coefficients() {
        let g = Grid::interval(11, 1.0, 10).unwrap();
        let c = LinearCoefficients::parse("2", ["3", "0"], "x", "0.5", "1", "0").unwrap();
        let lin = ProblemSpec::linear(g.clone(), MetricField::identity(1), c).unwrap();
        let nl = lin.with_dynamics(Dynamics::Nonlinear(Nonlinearity::parse("2*rho + 3*zx + x*eta + 1", "0.5*eta", 1.0).unwrap())).unwrap();
        let z = g.sample_dirichlet(|x| x[0]);
        let a = lin.tangent(0, &z, &z);
        let b = nl.tangent(0, &z, &z);
        for n in g.interior_nodes() {
            assert!((a.d_eta[n] - b.d_eta[n]).abs() < 1e-14);
            assert!((a.d_rho[n] - b.d_rho[n]).abs() < 1e-14);
            assert!((a.d_zeta[0][n] - b.d_zeta[0][n]).abs() < 1e-14);
            assert!((a.k_eta[n] - b.k_eta[n]).abs() < 1e-14);
        }
    }

    fn standing_error(nx: usize, nt: usize) -> f64 {
        let spec = free_wave(nx, 1.0, nt);
        let tr = solve(&standing(&spec.grid), &spec, &BrownianPath::zero(nt, spec.grid.dt)).unwrap();
        // Max over all levels: at t = 1 alone cos(pi t) is stationary and the
        // phase error only shows up quadratically.
        let g = &spec.grid;
        let mut err = 0.0f64;
        for (k, s) in tr.snapshots.iter().enumerate() {
            let c = (PI * g.time(k)).cos();
            for n in 0..g.n_nodes() {
                err = err.max((s.z[n] - (PI * g.coords(n)[0]).sin() * c).abs());
            }
        }
        err
    }

    #[test]
    fn standing_wave_converges_at_second_order() {
        let e = [standing_error(21, 40), standing_error(41, 80), standing_error(81, 160)];
        for w in e.windows(2) {
            let r = w[0] / w[1];
            assert!((3.6..=4.4).contains(&r), "ratio {r} {e:?}");
        }
    }

    #[test]
    fn free_wave_energy_drift_is_small() {
        let spec = free_wave(201, 10.0, 4001);
        let tr = solve(&standing(&spec.grid), &spec, &BrownianPath::zero(4001, spec.grid.dt)).unwrap();
        let e0 = energy_h(&spec.grid, tr.initial());
        let drift = tr.snapshots.iter().map(|s| (energy_h(&spec.grid, s) - e0).abs() / e0).fold(0.0, f64::max);
        assert!(drift <= 0.01, "drift {drift}");
    }

    #[test]
    fn linear_solve_is_affine_in_data() {
        let g = Grid::interval(31, 2.0, 80).unwrap();
        let c = LinearCoefficients::parse("0.3", ["x", "0"], "1 + x", "0.5", "sin(pi*x)", "x*(1-x)").unwrap();
        let spec = ProblemSpec::linear(g.clone(), MetricField::identity(1), c).unwrap();
        let p = sample_brownian(7, 0, 80, g.dt).unwrap();
        let u = StateSnapshot::from_fns(&g, |x| (PI * x[0]).sin(), |x| x[0]);
        let v = StateSnapshot::from_fns(&g, |x| x[0] * x[0] * (1.0 - x[0]), |_| -1.0);
        let su = solve(&u, &spec, &p).unwrap();
        let sv = solve(&v, &spec, &p).unwrap();
        let s0 = solve(&StateSnapshot::zero(&g), &spec, &p).unwrap();
        let suv = solve(&u.combine(1.0, &v, 1.0), &spec, &p).unwrap();
        for k in 0..=g.nt {
            let a = &suv.snapshots[k].z;
            let scale = a.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            for n in 0..g.n_nodes() {
                let b = su.snapshots[k].z[n] + sv.snapshots[k].z[n] - s0.snapshots[k].z[n];
                assert!((a[n] - b).abs() <= 1e-10 * scale);
            }
        }
    }

    #[test]
    fn noisy_mean_matches_mean_field() {
        let g = Grid::interval(21, 10.0, 400).unwrap();
        let noisy = ProblemSpec::linear(g.clone(), MetricField::identity(1), LinearCoefficients::parse("0", ["0", "0"], "0", "1", "0", "0").unwrap()).unwrap();
        let mean_field = free_wave(21, 10.0, 400);
        let init = standing(&g);
        let det = solve(&init, &mean_field, &BrownianPath::zero(400, g.dt)).unwrap();
        let runs: Vec<Trajectory> = (0..1000).map(|i| solve(&init, &noisy, &sample_brownian(11, i, 400, g.dt).unwrap()).unwrap()).collect();
        for t in [2.5, 5.0, 10.0] {
            let members: Vec<Vec<f64>> = runs.iter().map(|r| r.at_time(t).z.clone()).collect();
            let (mean, se) = crate::stats::nodewise_mean_se(&members);
            let d = &det.at_time(t).z;
            for n in g.interior_nodes() {
                assert!((mean[n] - d[n]).abs() <= 3.0 * se[n], "t={t} node {n}: {} vs {} (se {})", mean[n], d[n], se[n]);
            }
        }
    }

    #[test]
    fn nonlinear_flow_is_lipschitz_in_data() {
        let g = Grid::interval(41, 2.0, 100).unwrap();
        let spec = ProblemSpec::new(g.clone(), MetricField::identity(1), Dynamics::Nonlinear(Nonlinearity::parse("sin(eta)", "0.1*eta", 1.0).unwrap()), f64::INFINITY).unwrap();
        let p = sample_brownian(5, 0, 100, g.dt).unwrap();
        let base = StateSnapshot::from_fns(&g, |x| (PI * x[0]).sin(), |_| 0.0);
        let dir = StateSnapshot::from_fns(&g, |x| (2.0 * PI * x[0]).sin(), |x| x[0] * (1.0 - x[0]));
        let dn = dir.h_norm_sq(&g).sqrt();
        let tb = solve(&base, &spec, &p).unwrap();
        let ratios: Vec<f64> = [1e-2, 1e-3, 1e-4]
            .iter()
            .map(|&eps| {
                let te = solve(&base.combine(1.0, &dir, eps / dn), &spec, &p).unwrap();
                let diff = (0..=g.nt).map(|k| te.snapshots[k].combine(1.0, &tb.snapshots[k], -1.0).h_norm_sq(&g).sqrt()).fold(0.0, f64::max);
                diff / eps
            })
            .collect();
        assert!(ratios.iter().all(|r| r.is_finite() && *r < 10.0), "{ratios:?}");
        assert!((ratios[0] - ratios[2]).abs() < 0.1 * ratios[2]);
    }
}
