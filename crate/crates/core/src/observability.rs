//! Observation operators and empirical observability constants.
//!
//! The boundary operator returns the normal derivative on the observed part
//! of the boundary; the internal operator returns the gradient on the collar
//! around it. Both are linear in the trajectory.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::brownian::{path_seed, sample_brownian, BrownianPath};
use crate::error::{Error, Result};
use crate::geometry::BoundaryPartition;
use crate::grid::{BoundaryNode, Grid};
use crate::io::{Field, Report};
use crate::spde::{minimal_constant, solve, ProblemSpec, StateSnapshot, Trajectory};
use crate::stats::{kahan_sum, mean_se, par_map_ordered, Kahan};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceKind {
    Boundary,
    Internal,
}

impl std::str::FromStr for TraceKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary" => Ok(TraceKind::Boundary),
            "internal" => Ok(TraceKind::Internal),
            other => Err(Error::InvalidParameters(format!("unknown observation mode `{other}`"))),
        }
    }
}

/// Observed values at every time level.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationTrace {
    pub kind: TraceKind,
    pub nodes: Vec<usize>,
    /// Spatial quadrature weight per node.
    pub weights: Vec<f64>,
    /// Values per node per level: 1 for boundary traces, `dim` for internal.
    pub components: usize,
    /// `values[k][node_slot * components + c]`.
    pub values: Vec<Vec<f64>>,
    pub dt: f64,
    pub path_index: u64,
    pub path_seed: u64,
}

impl ObservationTrace {
    pub fn levels(&self) -> usize {
        self.values.len()
    }

    /// Space-time inner product, trapezoid in both.
    pub fn dot(&self, other: &Self) -> f64 {
        let nl = self.values.len();
        let mut acc = Kahan::default();
        for k in 0..nl {
            let tw = if k == 0 || k + 1 == nl { 0.5 * self.dt } else { self.dt };
            for (s, &w) in self.weights.iter().enumerate() {
                for c in 0..self.components {
                    let i = s * self.components + c;
                    acc.add(tw * w * self.values[k][i] * other.values[k][i]);
                }
            }
        }
        acc.sum()
    }

    pub fn norm_sq(&self) -> f64 {
        self.dot(self)
    }

    /// `a * self + b * other` on the same node set.
    pub fn combine(&self, a: f64, other: &Self, b: f64) -> Self {
        let mut out = self.clone();
        for (ok, ov) in out.values.iter_mut().zip(&other.values) {
            for (x, y) in ok.iter_mut().zip(ov) {
                *x = a * *x + b * y;
            }
        }
        out
    }

    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        out.values.iter_mut().for_each(|v| v.iter_mut().for_each(|x| *x = 0.0));
        out
    }

    /// Per-level squared spatial norm (for plotting).
    pub fn level_norms_sq(&self) -> Vec<f64> {
        self.values
            .iter()
            .map(|v| kahan_sum(self.weights.iter().enumerate().flat_map(|(s, &w)| (0..self.components).map(move |c| (s, c, w))).map(|(s, c, w)| w * v[s * self.components + c].powi(2))))
            .collect()
    }
}

/// Normal derivative at a boundary node by the one-sided 3-point stencil.
pub fn normal_derivative(grid: &Grid, z: &[f64], bn: &BoundaryNode) -> f64 {
    let g = grid.gradient_at(z, bn.node);
    g[0] * bn.normal[0] + g[1] * bn.normal[1]
}

fn boundary_trace(traj: &Trajectory, nodes: &[BoundaryNode]) -> ObservationTrace {
    let g = &traj.grid;
    let values = traj.snapshots.iter().map(|s| nodes.iter().map(|bn| normal_derivative(g, &s.z, bn)).collect()).collect();
    ObservationTrace {
        kind: TraceKind::Boundary,
        nodes: nodes.iter().map(|b| b.node).collect(),
        weights: nodes.iter().map(|b| b.weight).collect(),
        components: 1,
        values,
        dt: g.dt,
        path_index: traj.path.path_index,
        path_seed: traj.path.seed,
    }
}

/// `dz/dnu` on the observed boundary at every level.
pub fn observe_boundary(traj: &Trajectory, partition: &BoundaryPartition) -> Result<ObservationTrace> {
    let nodes = partition.gamma0_nodes();
    if nodes.is_empty() {
        return Err(Error::EmptyGamma0);
    }
    Ok(boundary_trace(traj, &nodes))
}

/// `dz/dnu` on the whole boundary.
pub fn observe_full_boundary(traj: &Trajectory) -> ObservationTrace {
    boundary_trace(traj, &traj.grid.boundary_nodes())
}

/// `grad z` on the collar at every level, weighted by the domain quadrature.
pub fn observe_internal(traj: &Trajectory, partition: &BoundaryPartition) -> Result<ObservationTrace> {
    if partition.gamma0().next().is_none() {
        return Err(Error::EmptyGamma0);
    }
    let g = &traj.grid;
    let w = g.node_weights();
    let dim = g.dim;
    let values = traj
        .snapshots
        .iter()
        .map(|s| {
            partition
                .collar
                .iter()
                .flat_map(|&n| {
                    let gr = g.gradient_at(&s.z, n);
                    gr.into_iter().take(dim)
                })
                .collect()
        })
        .collect();
    Ok(ObservationTrace {
        kind: TraceKind::Internal,
        nodes: partition.collar.clone(),
        weights: partition.collar.iter().map(|&n| w[n]).collect(),
        components: dim,
        values,
        dt: g.dt,
        path_index: traj.path.path_index,
        path_seed: traj.path.seed,
    })
}

pub fn observe(traj: &Trajectory, partition: &BoundaryPartition, mode: TraceKind) -> Result<ObservationTrace> {
    match mode {
        TraceKind::Boundary => observe_boundary(traj, partition),
        TraceKind::Internal => observe_internal(traj, partition),
    }
}

/// Random truncated sine series with unit-normal coefficients, vanishing on
/// the boundary. Mode numbers run over `1..=n_modes` on each axis.
pub fn random_fourier_data(grid: &Grid, n_modes: usize, seed: u64, index: u64) -> StateSnapshot {
    let mut rng = ChaCha8Rng::seed_from_u64(path_seed(seed ^ 0x0da7_a5ee_d000_0000, index));
    let ny = if grid.dim == 2 { n_modes } else { 1 };
    let mut coef = Vec::with_capacity(n_modes * ny);
    for m1 in 1..=n_modes {
        for m2 in 1..=ny {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            coef.push((m1 as f64, m2 as f64, a, b));
        }
    }
    let (lo, hi) = (grid.lo, grid.hi);
    let basis = move |x: [f64; 2], m1: f64, m2: f64, dim: usize| {
        let s = (m1 * std::f64::consts::PI * (x[0] - lo[0]) / (hi[0] - lo[0])).sin();
        if dim == 2 {
            s * (m2 * std::f64::consts::PI * (x[1] - lo[1]) / (hi[1] - lo[1])).sin()
        } else {
            s
        }
    };
    let dim = grid.dim;
    StateSnapshot::from_fns(
        grid,
        |x| coef.iter().map(|&(m1, m2, a, _)| a * basis(x, m1, m2, dim)).sum(),
        |x| coef.iter().map(|&(m1, m2, _, b)| b * basis(x, m1, m2, dim)).sum(),
    )
}

/// Hidden regularity: boundary flux against data and forcing.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HiddenRegularityReport {
    pub trace: f64,
    pub trace_se: f64,
    pub data: f64,
    pub forcing: f64,
    pub rhs: f64,
    pub c: f64,
    pub c_min: f64,
    pub ok: bool,
}

impl Report for HiddenRegularityReport {
    fn fields(&self) -> Vec<(&'static str, Field)> {
        vec![
            ("trace", self.trace.into()),
            ("trace_se", self.trace_se.into()),
            ("data", self.data.into()),
            ("forcing", self.forcing.into()),
            ("rhs", self.rhs.into()),
            ("C", self.c.into()),
            ("C_min", self.c_min.into()),
            ("ok", self.ok.into()),
        ]
    }
}

/// `E |dz/dnu|^2 <= C e^{C (r1^2 + r2^2 + 1)} (E |(z0, z1)|^2 + |f|^2 + |g|^2)`
/// over the whole boundary.
pub fn check_hidden_regularity(ensemble: &[Trajectory], spec: &ProblemSpec, c: f64) -> Result<HiddenRegularityReport> {
    let g = &spec.grid;
    let traces: Vec<f64> = ensemble.iter().map(|tr| observe_full_boundary(tr).norm_sq()).collect();
    let data: Vec<f64> = ensemble.iter().map(|tr| tr.initial().h_norm_sq(g)).collect();
    hidden_regularity_from_samples(&traces, &data, spec, c)
}

/// Hidden regularity from per-path boundary traces and data norms.
pub fn hidden_regularity_from_samples(traces: &[f64], data: &[f64], spec: &ProblemSpec, c: f64) -> Result<HiddenRegularityReport> {
    if traces.is_empty() || traces.len() != data.len() {
        return Err(Error::DegenerateEnsemble("empty ensemble".into()));
    }
    let g = &spec.grid;
    let t = mean_se(traces);
    let d = mean_se(data).mean;
    let (ff, gg) = spec.forcing_norms_sq(0, g.nt);
    let forcing = ff + gg;
    let growth = spec.r1().powi(2) + spec.r2().powi(2) + 1.0;
    let rhs_of = |cc: f64| cc * (cc * growth).exp() * (d + forcing);
    let rhs = rhs_of(c);
    Ok(HiddenRegularityReport {
        trace: t.mean,
        trace_se: t.se,
        data: d,
        forcing,
        rhs,
        c,
        c_min: minimal_constant(t.mean, rhs_of),
        ok: t.mean <= rhs,
    })
}

/// Per-member contributions to the observability ratio.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MemberStats {
    pub data_index: usize,
    pub path_index: u64,
    pub data_norm_sq: f64,
    pub observation_sq: f64,
}

impl Report for MemberStats {
    fn fields(&self) -> Vec<(&'static str, Field)> {
        vec![
            ("data_index", self.data_index.into()),
            ("path_index", Field::Int(self.path_index as i64)),
            ("data_norm_sq", self.data_norm_sq.into()),
            ("observation_sq", self.observation_sq.into()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObservabilityReport {
    pub mode: TraceKind,
    pub members: usize,
    /// `E |(z0, z1)|^2_{H^1_0 x L^2}`.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `E |observation|^2`.
    pub rhs_observation: f64,
    pub rhs_observation_se: f64,
    pub rhs_f: f64,
    pub rhs_g: f64,
    /// `lhs / (sqrt(obs) + |f| + |g|)^2`.
    pub empirical_constant: f64,
    pub c_max: f64,
    pub pass: bool,
}

impl Report for ObservabilityReport {
    fn fields(&self) -> Vec<(&'static str, Field)> {
        vec![
            ("mode", format!("{:?}", self.mode).to_lowercase().into()),
            ("members", self.members.into()),
            ("lhs", self.lhs.into()),
            ("lhs_se", self.lhs_se.into()),
            ("rhs_observation", self.rhs_observation.into()),
            ("rhs_observation_se", self.rhs_observation_se.into()),
            ("rhs_f", self.rhs_f.into()),
            ("rhs_g", self.rhs_g.into()),
            ("empirical_constant", self.empirical_constant.into()),
            ("C_max", self.c_max.into()),
            ("pass", self.pass.into()),
        ]
    }
}

/// Reduces member statistics into the observability report.
pub fn observability_report(mode: TraceKind, stats: &[MemberStats], f_sq: f64, g_sq: f64, c_max: f64) -> Result<ObservabilityReport> {
    if stats.is_empty() {
        return Err(Error::DegenerateEnsemble("empty ensemble".into()));
    }
    let lhs = mean_se(&stats.iter().map(|s| s.data_norm_sq).collect::<Vec<_>>());
    let obs = mean_se(&stats.iter().map(|s| s.observation_sq).collect::<Vec<_>>());
    let denom = (obs.mean.sqrt() + f_sq.sqrt() + g_sq.sqrt()).powi(2);
    let empirical_constant = if lhs.mean == 0.0 {
        0.0
    } else if denom == 0.0 {
        return Err(Error::DegenerateEnsemble(format!(
            "initial data have mean squared norm {:.6e} but every observation and forcing vanishes; observability fails on this ensemble",
            lhs.mean
        )));
    } else {
        lhs.mean / denom
    };
    Ok(ObservabilityReport {
        mode,
        members: stats.len(),
        lhs: lhs.mean,
        lhs_se: lhs.se,
        rhs_observation: obs.mean,
        rhs_observation_se: obs.se,
        rhs_f: f_sq,
        rhs_g: g_sq,
        empirical_constant,
        c_max,
        pass: empirical_constant <= c_max,
    })
}

fn forcing_terms(spec: &ProblemSpec) -> (f64, f64) {
    spec.forcing_norms_sq(0, spec.grid.nt)
}

/// Observability check on stored trajectories.
pub fn verify_observability(
    ensemble: &[(StateSnapshot, Trajectory)],
    spec: &ProblemSpec,
    partition: &BoundaryPartition,
    mode: TraceKind,
    c_max: f64,
) -> Result<ObservabilityReport> {
    let g = &spec.grid;
    let stats = ensemble
        .iter()
        .enumerate()
        .map(|(i, (init, tr))| {
            Ok(MemberStats { data_index: i, path_index: tr.path.path_index, data_norm_sq: init.h_norm_sq(g), observation_sq: observe(tr, partition, mode)?.norm_sq() })
        })
        .collect::<Result<Vec<_>>>()?;
    let (f, gg) = forcing_terms(spec);
    observability_report(mode, &stats, f, gg, c_max)
}

/// The paths of an ensemble; a single zero path when the dynamics carry no noise.
pub fn ensemble_paths(spec: &ProblemSpec, seed: u64, n_paths: usize) -> Result<Vec<BrownianPath>> {
    let g = &spec.grid;
    if !spec.has_noise() {
        return Ok(vec![BrownianPath::zero(g.nt, g.dt)]);
    }
    (0..n_paths as u64).map(|p| sample_brownian(seed, p, g.nt, g.dt)).collect()
}

/// Solves every (datum, path) pair and keeps only the member statistics.
pub fn observability_members(
    spec: &ProblemSpec,
    partition: &BoundaryPartition,
    modes: &[TraceKind],
    data: &[StateSnapshot],
    paths: &[BrownianPath],
) -> Result<Vec<Vec<MemberStats>>> {
    let g = &spec.grid;
    let np = paths.len();
    let per: Vec<Result<Vec<MemberStats>>> = par_map_ordered(data.len() * np, |m| {
        let (i, p) = (m / np, m % np);
        let tr = solve(&data[i], spec, &paths[p])?;
        let dn = data[i].h_norm_sq(g);
        modes
            .iter()
            .map(|&mode| Ok(MemberStats { data_index: i, path_index: paths[p].path_index, data_norm_sq: dn, observation_sq: observe(&tr, partition, mode)?.norm_sq() }))
            .collect()
    });
    let per = per.into_iter().collect::<Result<Vec<_>>>()?;
    Ok((0..modes.len()).map(|k| per.iter().map(|v| v[k]).collect()).collect())
}

/// Streaming observability check over `data x paths`.
pub fn run_observability(
    spec: &ProblemSpec,
    partition: &BoundaryPartition,
    mode: TraceKind,
    data: &[StateSnapshot],
    paths: &[BrownianPath],
    c_max: f64,
) -> Result<(ObservabilityReport, Vec<MemberStats>)> {
    let stats = observability_members(spec, partition, &[mode], data, paths)?.remove(0);
    let (f, g) = forcing_terms(spec);
    Ok((observability_report(mode, &stats, f, g, c_max)?, stats))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ContinuationReport {
    pub observation_norm: f64,
    pub trajectory_norm: f64,
    pub threshold: f64,
    /// The observation is below the threshold.
    pub antecedent: bool,
    /// The trajectory norm is at most `K * tol`.
    pub consequent: bool,
    pub holds: bool,
}

impl Report for ContinuationReport {
    fn fields(&self) -> Vec<(&'static str, Field)> {
        vec![
            ("observation_norm", self.observation_norm.into()),
            ("trajectory_norm", self.trajectory_norm.into()),
            ("threshold", self.threshold.into()),
            ("antecedent", self.antecedent.into()),
            ("consequent", self.consequent.into()),
            ("holds", self.holds.into()),
        ]
    }
}

/// Checks "small internal observation implies small trajectory" with the
/// supplied trace. The threshold is `tol` times the norm of the unit
/// function on `(0, T) x G`, so `tol` is relative to a unit signal.
pub fn continuation_check(traj: &Trajectory, trace: &ObservationTrace, tol: f64, k: f64) -> ContinuationReport {
    let g = &traj.grid;
    let volume: f64 = g.node_weights().iter().sum::<f64>() * g.t_final;
    let threshold = tol * volume.sqrt();
    let observation_norm = trace.norm_sq().sqrt();
    let trajectory_norm = traj.max_norm();
    let antecedent = observation_norm <= threshold;
    let consequent = trajectory_norm <= k * threshold;
    ContinuationReport { observation_norm, trajectory_norm, threshold, antecedent, consequent, holds: !antecedent || consequent }
}

/// Unique continuation probe on the internal observation of `traj`.
pub fn unique_continuation_probe(traj: &Trajectory, partition: &BoundaryPartition, tol: f64, k: f64) -> Result<ContinuationReport> {
    Ok(continuation_check(traj, &observe_internal(traj, partition)?, tol, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compute_gamma0, MetricField, WeightSpec};
    use crate::spde::LinearCoefficients;
    use std::f64::consts::PI;

    fn setup(nx: usize, nt: usize, delta: f64) -> (ProblemSpec, BoundaryPartition) {
        let g = Grid::interval(nx, 10.0, nt).unwrap();
        let m = MetricField::identity(1);
        let w = WeightSpec::quadratic(1, 4.0, [-1.0, 0.0], 0.0);
        let part = compute_gamma0(&w, &m, &g, delta).unwrap();
        (ProblemSpec::linear(g, m, LinearCoefficients::zero()).unwrap(), part)
    }

    fn standing(spec: &ProblemSpec) -> Trajectory {
        let init = StateSnapshot::from_fns(&spec.grid, |x| (PI * x[0]).sin(), |_| 0.0);
        solve(&init, spec, &BrownianPath::zero(spec.grid.nt, spec.grid.dt)).unwrap()
    }

    #[test]
    fn zero_trajectory_gives_zero_traces() {
        let (spec, part) = setup(21, 400, 0.2);
        let tr = solve(&StateSnapshot::zero(&spec.grid), &spec, &BrownianPath::zero(400, spec.grid.dt)).unwrap();
        assert_eq!(observe_boundary(&tr, &part).unwrap().norm_sq(), 0.0);
        assert_eq!(observe_internal(&tr, &part).unwrap().norm_sq(), 0.0);
    }

    #[test]
    fn standing_wave_boundary_trace() {
        let mut errs = Vec::new();
        for (nx, nt) in [(51, 1000), (101, 2000)] {
            let (spec, part) = setup(nx, nt, 0.2);
            let tr = observe_boundary(&standing(&spec), &part).unwrap();
            assert_eq!(tr.nodes, vec![nx - 1]);
            let e = (0..=nt).map(|k| (tr.values[k][0] + PI * (PI * spec.grid.time(k)).cos()).abs()).fold(0.0, f64::max);
            errs.push(e);
            assert!((tr.norm_sq() - 5.0 * PI * PI).abs() < 2e-2 * 5.0 * PI * PI);
        }
        let ratio = errs[0] / errs[1];
        assert!((3.6..=4.4).contains(&ratio), "{errs:?}");
    }

    #[test]
    fn standing_wave_internal_trace() {
        let (spec, part) = setup(101, 2000, 0.2);
        let tr = observe_internal(&standing(&spec), &part).unwrap();
        // collar is [0.8, 1] and its dual cells cover [0.8 - h/2, 1]
        let a = 0.8 - 0.005;
        let space = PI * PI * (0.5 * (1.0 - a) + ((2.0 * PI).sin() - (2.0 * PI * a).sin()) / (4.0 * PI));
        let exact = space * 5.0;
        assert!((tr.norm_sq() - exact).abs() < 1e-2 * exact, "{} vs {exact}", tr.norm_sq());
        let (spec2, all) = setup(101, 2000, 2.0);
        let big = observe_internal(&standing(&spec2), &all).unwrap();
        assert!(big.norm_sq() >= tr.norm_sq());
    }

    #[test]
    fn traces_are_linear() {
        let (spec, part) = setup(41, 800, 0.2);
        let p = BrownianPath::zero(800, spec.grid.dt);
        let u = random_fourier_data(&spec.grid, 5, 1, 0);
        let v = random_fourier_data(&spec.grid, 5, 1, 1);
        let w = u.combine(2.0, &v, -3.0);
        let tu = solve(&u, &spec, &p).unwrap();
        let tv = solve(&v, &spec, &p).unwrap();
        let tw = solve(&w, &spec, &p).unwrap();
        for mode in [TraceKind::Boundary, TraceKind::Internal] {
            let a = observe(&tu, &part, mode).unwrap();
            let b = observe(&tv, &part, mode).unwrap();
            let c = observe(&tw, &part, mode).unwrap();
            let d = a.combine(2.0, &b, -3.0).combine(1.0, &c, -1.0);
            assert!(d.norm_sq().sqrt() <= 1e-10 * c.norm_sq().sqrt());
        }
    }

    #[test]
    fn constant_is_scale_invariant_and_monotone_in_delta() {
        let (spec, part) = setup(41, 800, 0.2);
        let data: Vec<StateSnapshot> = (0..4).map(|i| random_fourier_data(&spec.grid, 3, 5, i)).collect();
        let paths = ensemble_paths(&spec, 1, 1).unwrap();
        let (base, _) = run_observability(&spec, &part, TraceKind::Boundary, &data, &paths, 1e6).unwrap();
        for alpha in [0.1, 10.0] {
            let scaled: Vec<StateSnapshot> = data.iter().map(|d| d.scaled(alpha)).collect();
            let (r, _) = run_observability(&spec, &part, TraceKind::Boundary, &scaled, &paths, 1e6).unwrap();
            assert!((r.empirical_constant / base.empirical_constant - 1.0).abs() < 1e-8);
        }
        let mut last = f64::INFINITY;
        for delta in [0.1, 0.2, 0.4] {
            let (_, p) = setup(41, 800, delta);
            let (r, _) = run_observability(&spec, &p, TraceKind::Internal, &data, &paths, 1e6).unwrap();
            assert!(r.empirical_constant <= last);
            last = r.empirical_constant;
        }
    }

    #[test]
    fn zero_ensemble_passes_and_degenerate_aborts() {
        let (spec, part) = setup(21, 400, 0.2);
        let data = vec![StateSnapshot::zero(&spec.grid)];
        let paths = ensemble_paths(&spec, 1, 1).unwrap();
        let (r, _) = run_observability(&spec, &part, TraceKind::Boundary, &data, &paths, 1.0).unwrap();
        assert_eq!(r.lhs, 0.0);
        assert!(r.pass);
        let fake = [MemberStats { data_index: 0, path_index: 0, data_norm_sq: 1.0, observation_sq: 0.0 }];
        assert!(matches!(observability_report(TraceKind::Boundary, &fake, 0.0, 0.0, 1.0), Err(Error::DegenerateEnsemble(_))));
    }

    #[test]
    fn hidden_regularity_of_standing_wave() {
        let (spec, _) = setup(51, 1000, 0.2);
        let tr = standing(&spec);
        let r = check_hidden_regularity(&[tr.clone()], &spec, 10.0).unwrap();
        assert!(r.ok);
        let zero = solve(&StateSnapshot::zero(&spec.grid), &spec, &BrownianPath::zero(1000, spec.grid.dt)).unwrap();
        let z = check_hidden_regularity(&[zero], &spec, 1.0).unwrap();
        assert_eq!(z.trace, 0.0);
        assert!(z.ok);
    }

    #[test]
    fn continuation_probe_paths() {
        let (spec, part) = setup(41, 800, 0.2);
        let zero = solve(&StateSnapshot::zero(&spec.grid), &spec, &BrownianPath::zero(800, spec.grid.dt)).unwrap();
        assert!(unique_continuation_probe(&zero, &part, 1e-8, 10.0).unwrap().holds);
        let tr = standing(&spec);
        let r = unique_continuation_probe(&tr, &part, 1e-8, 10.0).unwrap();
        assert!(!r.antecedent && r.holds);
        let trace = observe_internal(&tr, &part).unwrap().zeroed();
        let bad = continuation_check(&tr, &trace, 1e-8, 10.0);
        assert!(bad.antecedent && !bad.holds);
    }
}
