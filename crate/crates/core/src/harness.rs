//! Subcommand dispatch for the `obswave` binary.
//!
//! Every subcommand loads and validates a config, runs inside the worker pool
//! capped by `OBSWAVE_THREADS`, writes its artifacts through an
//! [`ArtifactWriter`] and finishes with a manifest. Numeric CSV output is a
//! pure function of the config and seed.

use std::path::PathBuf;
use std::str::FromStr;

use crate::brownian::{sample_brownian, BrownianPath};
use crate::carleman::{
    build_weight, find_lambda0, fit_b_polynomials, identity_residual, ito_correction_check, loglog_slope, multiplier_identity_residual,
    sample_interior_points, sample_times, summarize, Derivatives, IdentityResidual, TestField, VectorField,
};
use crate::config::{Experiment, ExperimentConfig};
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::io::{fmt_f64, read_numeric_csv, BinarySeries, Csv, Field, Report};
use crate::manifest::ArtifactWriter;
use crate::observability::{
    ensemble_paths, hidden_regularity_from_samples, observability_members, observability_report, observe, observe_full_boundary,
    random_fourier_data, MemberStats, ObservabilityReport, ObservationTrace, TraceKind,
};
use crate::reconstruction::{fine_grid_target, objective, objective_and_gradient, reconstruct_partial, stability_probe, InverseProblem};
use crate::spde::{energy_estimate_from_samples, energy_h, energy_samples, solve, ProblemSpec, StateSnapshot, Trajectory};
use crate::stats::{kahan_sum, par_map_ordered, with_thread_cap};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    CheckGeometry,
    Solve,
    Observe,
    VerifyIdentity,
    VerifyEnergy,
    VerifyObservability,
    Reconstruct,
    StabilityProbe,
}

impl Command {
    pub const ALL: [Command; 8] = [
        Command::CheckGeometry,
        Command::Solve,
        Command::Observe,
        Command::VerifyIdentity,
        Command::VerifyEnergy,
        Command::VerifyObservability,
        Command::Reconstruct,
        Command::StabilityProbe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::CheckGeometry => "check-geometry",
            Command::Solve => "solve",
            Command::Observe => "observe",
            Command::VerifyIdentity => "verify-identity",
            Command::VerifyEnergy => "verify-energy",
            Command::VerifyObservability => "verify-observability",
            Command::Reconstruct => "reconstruct",
            Command::StabilityProbe => "stability-probe",
        }
    }
}

impl FromStr for Command {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Command::ALL.into_iter().find(|c| c.name() == s).ok_or_else(|| Error::InvalidParameters(format!("unknown subcommand {s}")))
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
}

/// What a run reports back to the caller.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub pass: bool,
    pub failures: Vec<String>,
    /// `key=value` summary, also printed by the binary.
    pub summary: String,
    pub out_dir: PathBuf,
}

/// Collects pass/fail results and the printed summary of one run.
#[derive(Default)]
struct Checks {
    failures: Vec<String>,
    summary: String,
}

impl Checks {
    fn require(&mut self, ok: bool, msg: impl Into<String>) {
        if !ok {
            self.failures.push(msg.into());
        }
    }

    fn line(&mut self, key: &str, v: impl Into<Field>) {
        self.summary.push_str(&format!("{key}={}\n", v.into()));
    }

    fn section(&mut self, prefix: &str, r: &dyn Report) {
        for (k, v) in r.fields() {
            self.summary.push_str(&format!("{prefix}{k}={v}\n"));
        }
    }
}

fn prefixed_kv(prefix: &str, r: &dyn Report) -> String {
    r.fields().iter().map(|(k, v)| format!("{prefix}{k}={v}\n")).collect()
}

fn mode_name(m: TraceKind) -> &'static str {
    match m {
        TraceKind::Boundary => "boundary",
        TraceKind::Internal => "internal",
    }
}

fn rel_change(coarse: f64, fine: f64) -> f64 {
    if coarse == fine {
        0.0
    } else {
        (fine - coarse).abs() / coarse.abs().max(fine.abs())
    }
}

/// Paths for a spec: a single zero path without noise, seeded paths otherwise.
fn paths_for(spec: &ProblemSpec, seed: u64, n: usize) -> Result<Vec<BrownianPath>> {
    ensemble_paths(spec, seed, n)
}

fn single_path(spec: &ProblemSpec, seed: u64, index: u64) -> Result<BrownianPath> {
    let g = &spec.grid;
    if spec.has_noise() {
        sample_brownian(seed, index, g.nt, g.dt)
    } else {
        Ok(BrownianPath::zero(g.nt, g.dt))
    }
}

/// Loads the config, runs `cmd` and writes the manifest.
pub fn run(cmd: Command, opts: &RunOptions) -> Result<Outcome> {
    let (mut cfg, text) = ExperimentConfig::load(&opts.config)?;
    if let Some(s) = opts.seed {
        cfg.ensemble.seed = s;
    }
    let out = opts.out.clone().or_else(|| cfg.task.out_dir.clone()).unwrap_or_else(|| PathBuf::from("out").join(cmd.name()));
    let mut w = ArtifactWriter::create(&out)?;
    let mut checks = Checks::default();
    let res = with_thread_cap(|| dispatch(cmd, &cfg, &text, &mut w, &mut checks));
    let resolved = serde_json::to_value(&cfg).map_err(|e| Error::Format(e.to_string()))?;
    if let Err(e) = res {
        // still leave a manifest of whatever was written
        w.finish(cmd.name(), resolved, cfg.ensemble.seed, false)?;
        return Err(e);
    }
    let pass = checks.failures.is_empty();
    checks.line("pass", pass);
    w.write_str("summary.txt", &checks.summary)?;
    w.finish(cmd.name(), resolved, cfg.ensemble.seed, pass)?;
    Ok(Outcome { pass, failures: checks.failures, summary: checks.summary, out_dir: out })
}

fn dispatch(cmd: Command, cfg: &ExperimentConfig, text: &str, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    if cmd == Command::CheckGeometry {
        return check_geometry(cfg, text, w, ck);
    }
    let exp = cfg.resolve(text)?;
    match cmd {
        Command::CheckGeometry => unreachable!(),
        Command::Solve => run_solve(&exp, w, ck),
        Command::Observe => run_observe(&exp, text, w, ck),
        Command::VerifyIdentity => verify_identity(&exp, w, ck),
        Command::VerifyEnergy => verify_energy(&exp, w, ck),
        Command::VerifyObservability => verify_observability(&exp, w, ck),
        Command::Reconstruct => run_reconstruct(&exp, text, w, ck),
        Command::StabilityProbe => run_stability(&exp, w, ck),
    }
}

fn check_geometry(cfg: &ExperimentConfig, text: &str, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    use crate::geometry::{certify, check_condition2, compute_gamma0};
    let grid = cfg.grid(text)?;
    let metric = cfg.metric(grid.dim);
    let raw = cfg.weight(&grid, text)?;
    let (weight, cond) = certify(&metric, &raw, &grid)?;
    let c2 = check_condition2(&weight, &metric, &grid, cfg.carleman.c0, cfg.carleman.c1)?;
    ck.section("", &cond);
    ck.section("", &c2);
    ck.require(cond.ok, format!("weight condition fails: mu0 = {}, min |grad d| = {}", cond.mu0, cond.min_grad));
    for f in c2.failures() {
        ck.require(false, f);
    }
    let mut csv = Csv::new(&["node", "x", "y", "normal_x", "normal_y", "weight", "tagged"]);
    match compute_gamma0(&weight, &metric, &grid, cfg.geometry.delta) {
        Ok(part) => {
            for (b, &t) in part.boundary.iter().zip(&part.tagged) {
                let x = grid.coords(b.node);
                csv.row(vec![b.node.into(), x[0].into(), x[1].into(), b.normal[0].into(), b.normal[1].into(), b.weight.into(), Field::Int(t as i64)]);
            }
            let g0: Vec<String> = part.gamma0().map(|b| grid.coords(b.node)[..grid.dim].iter().map(|v| fmt_f64(*v)).collect::<Vec<_>>().join(" ")).collect();
            ck.line("gamma0_nodes", part.gamma0().count());
            ck.line("gamma0", g0.join(";"));
            ck.line("collar_nodes", part.collar.len());
        }
        Err(e) => ck.require(false, e.to_string()),
    }
    let mut row = Csv::new(&["mu0", "min_grad", "R0", "R1", "T0", "flag1", "flag2", "flag3", "flag4"]);
    row.row(vec![
        cond.mu0.into(),
        cond.min_grad.into(),
        c2.r0.into(),
        c2.r1.into(),
        c2.t0.into(),
        c2.flux_dominates.into(),
        c2.time_long_enough.into(),
        c2.c1_window.into(),
        c2.mu0_margin.into(),
    ]);
    w.write_str("condition.txt", &(cond.to_kv() + &c2.to_kv()))?;
    w.write_str("condition.csv", &row.render())?;
    w.write_str("boundary.csv", &csv.render())?;
    Ok(())
}

fn series_of(traj: &Trajectory) -> BinarySeries {
    let g = &traj.grid;
    BinarySeries {
        dim: g.dim,
        nx: g.nx[..g.dim].to_vec(),
        nt: g.nt,
        dt: g.dt,
        fields_per_level: 2,
        levels: traj.snapshots.iter().map(|s| vec![s.z.clone(), s.zt.clone()]).collect(),
    }
}

fn snapshot_series(grid: &Grid, s: &StateSnapshot) -> BinarySeries {
    BinarySeries { dim: grid.dim, nx: grid.nx[..grid.dim].to_vec(), nt: 0, dt: grid.dt, fields_per_level: 2, levels: vec![vec![s.z.clone(), s.zt.clone()]] }
}

/// Per-level time, energy and squared boundary flux of a trajectory.
pub fn trajectory_summary(traj: &Trajectory) -> Csv {
    let g = &traj.grid;
    let flux = observe_full_boundary(traj).level_norms_sq();
    let mut csv = Csv::new(&["level", "time", "energy", "boundary_flux"]);
    for (k, s) in traj.snapshots.iter().enumerate() {
        csv.row(vec![k.into(), g.time(k).into(), energy_h(g, s).into(), flux[k].into()]);
    }
    csv
}

fn run_solve(exp: &Experiment, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    let cfg = &exp.config;
    let spec = &exp.spec;
    let init = cfg.initial(&exp.grid, "")?;
    let paths = paths_for(spec, cfg.ensemble.seed, cfg.ensemble.n_paths)?;
    let finals: Vec<Result<f64>> = par_map_ordered(paths.len(), |p| Ok(energy_h(&exp.grid, solve(&init, spec, &paths[p])?.final_state())));
    let mut ens = Csv::new(&["path_index", "seed", "final_energy"]);
    for (p, e) in paths.iter().zip(finals) {
        ens.row(vec![Field::Int(p.path_index as i64), Field::Str(p.seed.to_string()), e?.into()]);
    }
    let idx = (cfg.task.path_index as usize).min(paths.len() - 1);
    let traj = solve(&init, spec, &paths[idx])?;
    w.write("trajectory.bin", &series_of(&traj).to_bytes()?)?;
    w.write_str("summary.csv", &trajectory_summary(&traj).render())?;
    w.write_str("ensemble.csv", &ens.render())?;
    let e0 = energy_h(&exp.grid, traj.initial());
    let e1 = energy_h(&exp.grid, traj.final_state());
    ck.line("paths", paths.len());
    ck.line("cfl", spec.cfl());
    ck.line("initial_energy", e0);
    ck.line("final_energy", e1);
    ck.line("relative_drift", if e0 > 0.0 { (e1 - e0) / e0 } else { 0.0 });
    Ok(())
}

/// Long-format trace table: level, time, node, component, value.
pub fn trace_csv(trace: &ObservationTrace) -> Csv {
    let mut csv = Csv::new(&["level", "time", "node", "component", "value"]);
    for (k, v) in trace.values.iter().enumerate() {
        for (s, &n) in trace.nodes.iter().enumerate() {
            for c in 0..trace.components {
                csv.row(vec![k.into(), (k as f64 * trace.dt).into(), n.into(), c.into(), v[s * trace.components + c].into()]);
            }
        }
    }
    csv
}

/// Fills `template` (which fixes nodes, weights and shape) from a trace table.
pub fn trace_from_csv(body: &str, template: &ObservationTrace) -> Result<ObservationTrace> {
    let (header, rows) = read_numeric_csv(body)?;
    if header != ["level", "time", "node", "component", "value"] {
        return Err(Error::Format(format!("unexpected trace columns {header:?}")));
    }
    let mut out = template.zeroed();
    let nc = template.components;
    let expected = template.levels() * template.nodes.len() * nc;
    if rows.len() != expected {
        return Err(Error::Format(format!("trace has {} rows, expected {expected}", rows.len())));
    }
    for (i, r) in rows.iter().enumerate() {
        let k = i / (template.nodes.len() * nc);
        let s = (i / nc) % template.nodes.len();
        let c = i % nc;
        if r[0] as usize != k || r[2] as usize != template.nodes[s] || r[3] as usize != c {
            return Err(Error::Format(format!("trace row {} does not match the observation layout", i + 2)));
        }
        out.values[k][s * nc + c] = r[4];
    }
    Ok(out)
}

fn run_observe(exp: &Experiment, text: &str, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    let cfg = &exp.config;
    let init = cfg.initial(&exp.grid, text)?;
    let path = single_path(&exp.spec, cfg.ensemble.seed, cfg.task.path_index)?;
    let traj = solve(&init, &exp.spec, &path)?;
    for &m in &cfg.task.modes {
        let tr = observe(&traj, &exp.partition, m)?;
        let name = mode_name(m);
        w.write_str(&format!("trace_{name}.csv"), &trace_csv(&tr).render())?;
        ck.line(&format!("{name}_norm_sq"), tr.norm_sq());
        ck.line(&format!("{name}_nodes"), tr.nodes.len());
    }
    ck.line("path_index", Field::Int(path.path_index as i64));
    ck.line("path_seed", path.seed.to_string());
    Ok(())
}

fn verify_identity(exp: &Experiment, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    let cfg = &exp.config;
    let t = &cfg.task;
    let c = &cfg.carleman;
    let cw = build_weight(&exp.weight, &exp.metric, &exp.grid, c.lambda, c.c0, c.c1)?;
    let pts = sample_interior_points(&exp.grid, t.sample_points, cfg.ensemble.seed);
    let h = VectorField::parse(&t.multiplier[0], &t.multiplier[1])?;
    let fields = t.test_fields.iter().map(|s| TestField::parse(s)).collect::<Result<Vec<_>>>()?;
    let analytic = cw.weight.is_analytic();
    ck.require(analytic, "the pointwise identity needs an analytic weight");

    let eval_all = |mode: Derivatives| -> Result<(Vec<IdentityResidual>, Vec<IdentityResidual>)> {
        let mut car = Vec::new();
        let mut mul = Vec::new();
        for f in &fields {
            let rows: Vec<Result<(Option<IdentityResidual>, IdentityResidual)>> = par_map_ordered(pts.len(), |i| {
                let (tt, x) = pts[i];
                let a = if analytic { Some(identity_residual(f, &cw, tt, x, mode)?) } else { None };
                Ok((a, multiplier_identity_residual(f, &h, &exp.metric, tt, x, mode)))
            });
            for r in rows {
                let (a, m) = r?;
                car.extend(a);
                mul.push(m);
            }
        }
        Ok((car, mul))
    };

    let (car, mul) = eval_all(Derivatives::Analytic)?;
    let mut csv = Csv::new(&["identity", "field", "point", "t", "x", "y", "residual", "scale", "relative"]);
    let np = pts.len();
    for (name, rows) in [("carleman", &car), ("multiplier", &mul)] {
        for (i, r) in rows.iter().enumerate() {
            csv.row(vec![name.into(), (i / np).into(), (i % np).into(), r.t.into(), r.x[0].into(), r.x[1].into(), r.residual.into(), r.scale.into(), r.relative().into()]);
        }
    }
    w.write_str("identity.csv", &csv.render())?;
    let sc = summarize(&car, t.identity_tol);
    let sm = summarize(&mul, t.identity_tol);
    ck.section("carleman_", &sc);
    ck.section("multiplier_", &sm);
    ck.require(sc.pass || !analytic, format!("weighted identity residual {} exceeds {}", sc.max_relative, t.identity_tol));
    ck.require(sm.pass, format!("multiplier identity residual {} exceeds {}", sm.max_relative, t.identity_tol));

    // refinement study with difference quotients
    let mut refine = Csv::new(&["h", "carleman", "multiplier"]);
    let (mut hs, mut rc, mut rm) = (Vec::new(), Vec::new(), Vec::new());
    for &step in &t.fd_steps {
        let (c_fd, m_fd) = eval_all(Derivatives::FiniteDifference(step))?;
        let mx = |rows: &[IdentityResidual]| rows.iter().map(|r| r.residual.abs()).fold(0.0, f64::max);
        let (a, b) = (mx(&c_fd), mx(&m_fd));
        refine.row(vec![step.into(), a.into(), b.into()]);
        hs.push(step);
        rc.push(a);
        rm.push(b);
    }
    w.write_str("refinement.csv", &refine.render())?;
    if hs.len() >= 2 {
        let sm_slope = loglog_slope(&hs, &rm);
        ck.line("multiplier_fd_slope", sm_slope);
        ck.require((1.8..=2.2).contains(&sm_slope), format!("multiplier difference-quotient slope {sm_slope} outside [1.8, 2.2]"));
        if analytic {
            let sc_slope = loglog_slope(&hs, &rc);
            ck.line("carleman_fd_slope", sc_slope);
            ck.require((1.8..=2.2).contains(&sc_slope), format!("identity difference-quotient slope {sc_slope} outside [1.8, 2.2]"));
        }
    }

    // lower bound for B and its lambda threshold
    let times = sample_times(&exp.grid, 21);
    let lr = find_lambda0(&cw, &times, c.lambda_lo, c.lambda_hi)?;
    ck.section("b_", &lr);
    ck.require(lr.found, format!("no lambda0 in [{}, {}] for the B lower bound", c.lambda_lo, c.lambda_hi));
    if analytic {
        ck.require(lr.leading_max_rel_dev <= 0.05, format!("fitted lambda^3 coefficient deviates by {} from the analytic one", lr.leading_max_rel_dev));
    }
    let polys = fit_b_polynomials(&cw, &times, [10.0, 20.0, 40.0, 80.0]);
    let mut bcsv = Csv::new(&["lambda", "min_b", "bound"]);
    for i in 0..=40 {
        let l = c.lambda_lo * (c.lambda_hi / c.lambda_lo).powf(i as f64 / 40.0);
        let min_b = polys.iter().map(|p| p.eval(l)).fold(f64::INFINITY, f64::min);
        bcsv.row(vec![l.into(), min_b.into(), (lr.bound_coefficient * l.powi(3)).into()]);
    }
    w.write_str("b_field.csv", &bcsv.render())?;
    w.write_str("lambda.txt", &lr.to_kv())?;

    // quadratic-variation term, reported but not asserted (a 3-SE test)
    if analytic {
        let sigma = TestField::parse("1 + 0.5*x")?;
        let ito = ito_correction_check(&sigma, &cw.with_lambda(c.lambda), cfg.ensemble.n_paths.max(100), cfg.ensemble.seed)?;
        ck.section("ito_", &ito);
        w.write_str("ito.txt", &ito.to_kv())?;
    }
    Ok(())
}

/// Per-path samples of the energy study.
#[derive(Clone, Copy, Debug)]
struct EnergySample {
    energy_s: f64,
    energy_t: f64,
    trace: f64,
    data: f64,
}

fn energy_study(spec: &ProblemSpec, init: &StateSnapshot, paths: &[BrownianPath], s: f64, t: f64) -> Result<Vec<EnergySample>> {
    let g = &spec.grid;
    let r: Vec<Result<EnergySample>> = par_map_ordered(paths.len(), |p| {
        let tr = solve(init, spec, &paths[p])?;
        let (es, et) = energy_samples(&tr, s, t);
        Ok(EnergySample { energy_s: es, energy_t: et, trace: observe_full_boundary(&tr).norm_sq(), data: init.h_norm_sq(g) })
    });
    r.into_iter().collect()
}

fn verify_energy(exp: &Experiment, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    let cfg = &exp.config;
    let task = &cfg.task;
    let (s, t) = (task.energy_s, task.energy_t.unwrap_or(exp.grid.t_final));
    let init = cfg.initial(&exp.grid, "")?;
    let paths = paths_for(&exp.spec, cfg.ensemble.seed, cfg.ensemble.n_paths)?;
    let samples = energy_study(&exp.spec, &init, &paths, s, t)?;
    let col = |f: fn(&EnergySample) -> f64, v: &[EnergySample]| v.iter().map(f).collect::<Vec<f64>>();
    let rep = energy_estimate_from_samples(&col(|e| e.energy_s, &samples), &col(|e| e.energy_t, &samples), &exp.spec, s, t, task.constant)?;
    let hid = hidden_regularity_from_samples(&col(|e| e.trace, &samples), &col(|e| e.data, &samples), &exp.spec, task.constant)?;
    let mut csv = Csv::new(&["path_index", "energy_s", "energy_t", "boundary_trace"]);
    for (p, e) in paths.iter().zip(&samples) {
        csv.row(vec![Field::Int(p.path_index as i64), e.energy_s.into(), e.energy_t.into(), e.trace.into()]);
    }
    w.write_str("energy_paths.csv", &csv.render())?;
    let mut kv = prefixed_kv("energy_", &rep) + &prefixed_kv("hidden_", &hid);
    ck.section("energy_", &rep);
    ck.section("hidden_", &hid);
    ck.require(rep.ok, format!("energy estimate fails with C = {}: ratio {}", task.constant, rep.ratio));
    ck.require(hid.ok, format!("hidden regularity bound fails with C = {}", task.constant));
    if task.refine {
        let fine = exp.spec.on_grid(exp.grid.refined())?;
        let finit = cfg.initial(&fine.grid, "")?;
        let fpaths: Vec<BrownianPath> = paths.iter().map(|p| if exp.spec.has_noise() { p.refine() } else { BrownianPath::zero(fine.grid.nt, fine.grid.dt) }).collect();
        let fs = energy_study(&fine, &finit, &fpaths, s, t)?;
        let frep = energy_estimate_from_samples(&col(|e| e.energy_s, &fs), &col(|e| e.energy_t, &fs), &fine, s, t, task.constant)?;
        let change = rel_change(rep.c_min, frep.c_min);
        kv += &prefixed_kv("refined_energy_", &frep);
        kv += &format!("c_min_change={}\n", fmt_f64(change));
        ck.line("refined_energy_C_min", frep.c_min);
        ck.line("c_min_change", change);
        ck.require(frep.ok, format!("energy estimate fails on the refined grid: ratio {}", frep.ratio));
        ck.require(change <= task.refine_tol, format!("C_min changes by {change} under refinement"));
    }
    w.write_str("energy.txt", &kv)?;
    Ok(())
}

fn forcing_terms(spec: &ProblemSpec) -> (f64, f64) {
    spec.forcing_norms_sq(0, spec.grid.nt)
}

/// Observability reports for every mode plus the member statistics.
fn observability_study(exp: &Experiment, spec: &ProblemSpec, partition: &crate::geometry::BoundaryPartition, paths: &[BrownianPath]) -> Result<Vec<(ObservabilityReport, Vec<MemberStats>)>> {
    let cfg = &exp.config;
    let data: Vec<StateSnapshot> = (0..cfg.ensemble.n_data as u64).map(|i| random_fourier_data(&spec.grid, cfg.ensemble.n_modes, cfg.ensemble.seed, i)).collect();
    let per_mode = observability_members(spec, partition, &cfg.task.modes, &data, paths)?;
    let (f, g) = forcing_terms(spec);
    cfg.task.modes.iter().zip(per_mode).map(|(&m, st)| Ok((observability_report(m, &st, f, g, cfg.task.c_max)?, st))).collect()
}

fn verify_observability(exp: &Experiment, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    let cfg = &exp.config;
    let task = &cfg.task;
    let paths = paths_for(&exp.spec, cfg.ensemble.seed, cfg.ensemble.n_paths)?;
    let coarse = observability_study(exp, &exp.spec, &exp.partition, &paths)?;
    let fine = if task.refine {
        let fspec = exp.spec.on_grid(exp.grid.refined())?;
        let fpart = crate::geometry::compute_gamma0(&exp.weight, &exp.metric, &fspec.grid, exp.partition.delta)?;
        let fpaths: Vec<BrownianPath> = paths.iter().map(|p| if exp.spec.has_noise() { p.refine() } else { BrownianPath::zero(fspec.grid.nt, fspec.grid.dt) }).collect();
        Some(observability_study(exp, &fspec, &fpart, &fpaths)?)
    } else {
        None
    };
    let (f, g) = forcing_terms(&exp.spec);
    for (i, (rep, stats)) in coarse.iter().enumerate() {
        let name = mode_name(rep.mode);
        let mut csv = Csv::new(&["data_index", "path_index", "data_norm_sq", "observation_sq"]);
        for s in stats {
            csv.row(s.fields().into_iter().map(|(_, v)| v).collect());
        }
        w.write_str(&format!("members_{name}.csv"), &csv.render())?;
        // running constant over growing data subsets
        let mut conv = Csv::new(&["n_data", "members", "constant"]);
        for nd in 1..=cfg.ensemble.n_data {
            let sub: Vec<MemberStats> = stats.iter().filter(|s| s.data_index < nd).copied().collect();
            let r = observability_report(rep.mode, &sub, f, g, task.c_max)?;
            conv.row(vec![nd.into(), sub.len().into(), r.empirical_constant.into()]);
        }
        w.write_str(&format!("constant_vs_size_{name}.csv"), &conv.render())?;
        let mut kv = rep.to_kv();
        ck.section(&format!("{name}_"), rep);
        ck.require(rep.empirical_constant.is_finite(), format!("{name}: empirical constant is not finite"));
        ck.require(rep.pass, format!("{name}: empirical constant {} exceeds {}", rep.empirical_constant, task.c_max));
        if let Some(fine) = &fine {
            let fr = &fine[i].0;
            let change = rel_change(rep.empirical_constant, fr.empirical_constant);
            kv += &prefixed_kv("refined_", fr);
            kv += &format!("constant_change={}\n", fmt_f64(change));
            ck.line(&format!("{name}_refined_constant"), fr.empirical_constant);
            ck.line(&format!("{name}_constant_change"), change);
            ck.require(change <= task.refine_tol, format!("{name}: constant changes by {change} under refinement"));
        }
        w.write_str(&format!("observability_{name}.txt"), &kv)?;
    }
    Ok(())
}

/// Directional-derivative test: `(eps, difference quotient, exact)` rows.
fn gradient_check(problem: &InverseProblem, at: &StateSnapshot, dir: &StateSnapshot) -> Result<Vec<(f64, f64, f64)>> {
    let (_, g) = objective_and_gradient(at, problem)?;
    let exact = g.h_dot(dir, &problem.spec.grid);
    [1e-2, 1e-3, 1e-4, 1e-5]
        .iter()
        .map(|&e| {
            let fd = (objective(&at.combine(1.0, dir, e), problem)? - objective(&at.combine(1.0, dir, -e), problem)?) / (2.0 * e);
            Ok((e, fd, exact))
        })
        .collect()
}

fn run_reconstruct(exp: &Experiment, text: &str, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    let cfg = &exp.config;
    let task = &cfg.task;
    let g = &exp.grid;
    let truth = cfg.initial(g, text)?;
    let path = single_path(&exp.spec, cfg.ensemble.seed, task.path_index)?;
    if task.trace_file.is_some() && task.modes.len() != 1 {
        return Err(Error::Config("`trace_file` needs exactly one entry in `modes`".into()));
    }
    for &mode in &task.modes {
        let name = mode_name(mode);
        let target = match &task.trace_file {
            Some(f) => {
                let body = std::fs::read_to_string(f).map_err(|_| Error::MissingArtifact(f.display().to_string()))?;
                let layout = observe(&solve(&StateSnapshot::zero(g), &exp.spec, &path)?, &exp.partition, mode)?;
                trace_from_csv(&body, &layout)?
            }
            None if task.fine_data => {
                let fpath = if exp.spec.has_noise() { path.refine() } else { BrownianPath::zero(2 * g.nt, 0.5 * g.dt) };
                fine_grid_target(&exp.spec, &exp.weight, &exp.partition, mode, |gg| cfg.initial(gg, text).expect("validated initial data"), &fpath)?.0
            }
            None => observe(&solve(&truth, &exp.spec, &path)?, &exp.partition, mode)?,
        };
        let mut problem = InverseProblem::new(exp.spec.clone(), exp.partition.clone(), mode, target, path.clone())?;
        problem.regularization = task.regularization;
        problem.max_iter = task.max_iter;
        problem.grad_tol = task.grad_tol;
        problem.obj_tol = task.obj_tol;

        // adjoint and gradient self-checks
        let u = random_fourier_data(g, cfg.ensemble.n_modes, cfg.ensemble.seed ^ 0xa5a5, 0);
        let v = random_fourier_data(g, cfg.ensemble.n_modes, cfg.ensemble.seed ^ 0xa5a5, 1);
        let au = problem.linear_forward(&u);
        let r = problem.linear_forward(&v);
        let lhs = problem.trace_inner(&au, &r);
        let rhs = u.h_dot(&problem.linear_adjoint(&r), g);
        let dot_rel = (lhs - rhs).abs() / lhs.abs().max(rhs.abs()).max(f64::MIN_POSITIVE);
        let gc = gradient_check(&problem, &truth.combine(1.0, &u, 0.1), &v)?;
        let mut gcsv = Csv::new(&["eps", "difference_quotient", "gradient", "abs_error"]);
        for &(e, fd, ex) in &gc {
            gcsv.row(vec![e.into(), fd.into(), ex.into(), (fd - ex).abs().into()]);
        }
        w.write_str(&format!("gradient_check_{name}.csv"), &gcsv.render())?;
        let errs: Vec<f64> = gc.iter().map(|&(_, fd, ex)| (fd - ex).abs() / ex.abs().max(f64::MIN_POSITIVE)).collect();
        let grad_slope = loglog_slope(&[gc[0].0, gc[1].0], &[errs[0].max(1e-300), errs[1].max(1e-300)]);
        let grad_ok = errs.iter().all(|&e| e <= 1e-6) || (1.8..=2.2).contains(&grad_slope);
        ck.line(&format!("{name}_dot_product_rel"), dot_rel);
        ck.line(&format!("{name}_gradient_max_rel_error"), errs.iter().copied().fold(0.0, f64::max));
        ck.line(&format!("{name}_gradient_slope"), grad_slope);
        ck.require(dot_rel <= 1e-10, format!("{name}: adjoint dot-product mismatch {dot_rel}"));
        ck.require(grad_ok, format!("{name}: gradient disagrees with difference quotients"));

        let guess = match task.guess_perturbation {
            Some(eps) => {
                let p = random_fourier_data(g, cfg.ensemble.n_modes, cfg.ensemble.seed ^ 0x5a5a, 0);
                let s = eps * truth.h_norm_sq(g).sqrt() / p.h_norm_sq(g).sqrt().max(f64::MIN_POSITIVE);
                truth.combine(1.0, &p, s)
            }
            None => StateSnapshot::zero(g),
        };
        let tn = truth.h_norm_sq(g).sqrt();
        let initial_error = guess.combine(1.0, &truth, -1.0).h_norm_sq(g).sqrt() / tn.max(f64::MIN_POSITIVE);
        let res = reconstruct_partial(&problem, &guess)?.with_truth(&truth, g);
        let mut hist = Csv::new(&["iteration", "objective", "gradient_norm"]);
        for h in &res.history {
            hist.row(h.fields().into_iter().map(|(_, v)| v).collect());
        }
        w.write_str(&format!("history_{name}.csv"), &hist.render())?;
        w.write(&format!("recovered_{name}.bin"), &snapshot_series(g, &res.recovered).to_bytes()?)?;
        let err = res.relative_error.unwrap_or(f64::NAN);
        let mut kv = String::new();
        for (k, v) in [
            ("mode", Field::from(name)),
            ("linear", exp.spec.is_linear().into()),
            ("iterations", res.iterations().into()),
            ("converged", res.converged.into()),
            ("final_residual", res.final_residual.into()),
            ("initial_error", initial_error.into()),
            ("relative_error", err.into()),
            ("null_space_estimate", res.null_space_estimate.into()),
            ("dot_product_rel", dot_rel.into()),
            ("gradient_slope", grad_slope.into()),
        ] {
            kv.push_str(&format!("{k}={v}\n"));
            if !matches!(k, "dot_product_rel" | "gradient_slope") {
                ck.line(&format!("{name}_{k}"), v);
            }
        }
        w.write_str(&format!("reconstruct_{name}.txt"), &kv)?;
        if exp.spec.is_linear() {
            ck.require(
                res.converged,
                format!("{name}: no convergence after {} iterations, estimated null-space dimension {}", res.iterations(), res.null_space_estimate),
            );
        } else {
            let decreasing = res.history.windows(2).all(|h| h[1].objective < h[0].objective);
            ck.require(decreasing && res.history.len() > 1, format!("{name}: objective did not decrease strictly"));
            ck.require(err < initial_error, format!("{name}: final error {err} does not improve on the initial guess error {initial_error}"));
        }
        if let Some(m) = task.max_error {
            ck.require(err <= m, format!("{name}: relative error {err} exceeds {m}"));
        }
    }
    Ok(())
}

fn stability_pairs(grid: &Grid, n_modes: usize, seed: u64, n: usize) -> Vec<(StateSnapshot, StateSnapshot)> {
    (0..n as u64).map(|i| (random_fourier_data(grid, n_modes, seed, 2 * i), random_fourier_data(grid, n_modes, seed, 2 * i + 1))).collect()
}

fn probe_problem(spec: &ProblemSpec, part: &crate::geometry::BoundaryPartition, mode: TraceKind, path: &BrownianPath) -> Result<InverseProblem> {
    let zero = observe(&solve(&StateSnapshot::zero(&spec.grid), spec, path)?, part, mode)?;
    InverseProblem::new(spec.clone(), part.clone(), mode, zero, path.clone())
}

fn run_stability(exp: &Experiment, w: &mut ArtifactWriter, ck: &mut Checks) -> Result<()> {
    let cfg = &exp.config;
    let task = &cfg.task;
    let path = single_path(&exp.spec, cfg.ensemble.seed, task.path_index)?;
    let pairs = stability_pairs(&exp.grid, cfg.ensemble.n_modes, cfg.ensemble.seed, task.pairs);
    for &mode in &task.modes {
        let name = mode_name(mode);
        let rep = stability_probe(&pairs, &probe_problem(&exp.spec, &exp.partition, mode, &path)?)?;
        let mut csv = Csv::new(&["pair", "ratio"]);
        for (i, r) in rep.ratios.iter().enumerate() {
            csv.row(vec![i.into(), (*r).into()]);
        }
        w.write_str(&format!("stability_{name}.csv"), &csv.render())?;
        let mut kv = rep.to_kv();
        ck.line(&format!("{name}_constant"), rep.constant);
        ck.require(rep.constant.is_finite(), format!("{name}: stability constant is not finite"));
        if task.refine {
            let fspec = exp.spec.on_grid(exp.grid.refined())?;
            let fpart = crate::geometry::compute_gamma0(&exp.weight, &exp.metric, &fspec.grid, exp.partition.delta)?;
            let fpath = if exp.spec.has_noise() { path.refine() } else { BrownianPath::zero(fspec.grid.nt, fspec.grid.dt) };
            let fpairs = stability_pairs(&fspec.grid, cfg.ensemble.n_modes, cfg.ensemble.seed, task.pairs);
            let frep = stability_probe(&fpairs, &probe_problem(&fspec, &fpart, mode, &fpath)?)?;
            let change = rel_change(rep.constant, frep.constant);
            kv += &format!("refined_constant={}\nconstant_change={}\n", fmt_f64(frep.constant), fmt_f64(change));
            ck.line(&format!("{name}_refined_constant"), frep.constant);
            ck.line(&format!("{name}_constant_change"), change);
            ck.require(change <= task.refine_tol, format!("{name}: stability constant changes by {change} under refinement"));
        }
        w.write_str(&format!("stability_{name}.txt"), &kv)?;
    }
    Ok(())
}

/// Sum of a CSV column, used by tests comparing artifacts.
pub fn column_sum(body: &str, column: &str) -> Result<f64> {
    let (h, rows) = read_numeric_csv(body)?;
    let i = h.iter().position(|c| c == column).ok_or_else(|| Error::Format(format!("no column {column}")))?;
    Ok(kahan_sum(rows.iter().map(|r| r[i])))
}
