//! Experiment configuration files.
//!
//! A config is a JSON object with the blocks `geometry`, `dynamics`,
//! `carleman`, `ensemble` and `task`. Unknown keys are rejected. Errors carry
//! the line of the offending entry.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::expr::Expr;
use crate::geometry::{certify, check_condition2, compute_gamma0, dilate_weight, BoundaryPartition, Condition2Report, ConditionReport, MetricField, WeightSpec};
use crate::grid::Grid;
use crate::io::read_numeric_csv;
use crate::observability::{random_fourier_data, TraceKind};
use crate::spde::{Dynamics, LinearCoefficients, Nonlinearity, ProblemSpec, StateSnapshot, FIELD_VARS};

fn zero_expr() -> String {
    "0".into()
}

fn zero_pair() -> [String; 2] {
    [zero_expr(), zero_expr()]
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub dynamics: DynamicsConfig,
    pub carleman: CarlemanConfig,
    pub ensemble: EnsembleConfig,
    #[serde(default)]
    pub task: TaskConfig,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub nx: Vec<usize>,
    pub t_final: f64,
    pub nt: usize,
    /// Identity when absent.
    #[serde(default)]
    pub metric: Option<MetricField>,
    pub weight: WeightConfig,
    /// Optional `[a, b]` replacing `d` by `a d + b`.
    #[serde(default)]
    pub dilate: Option<[f64; 2]>,
    /// Width of the internal observation collar.
    #[serde(default = "default_delta")]
    pub delta: f64,
}

fn default_delta() -> f64 {
    0.2
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum WeightConfig {
    /// `a |x - center|^2 + offset`.
    Quadratic {
        a: f64,
        center: Vec<f64>,
        #[serde(default)]
        offset: f64,
    },
    /// One-column CSV (header `d`) of nodal values in node order.
    Tabulated { file: PathBuf },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearConfig {
    #[serde(default = "zero_expr")]
    pub b1: String,
    #[serde(default = "zero_pair")]
    pub b2: [String; 2],
    #[serde(default = "zero_expr")]
    pub b3: String,
    #[serde(default = "zero_expr")]
    pub b4: String,
    #[serde(default = "zero_expr")]
    pub f: String,
    #[serde(default = "zero_expr")]
    pub g: String,
}

impl Default for LinearConfig {
    fn default() -> Self {
        Self { b1: zero_expr(), b2: zero_pair(), b3: zero_expr(), b4: zero_expr(), f: zero_expr(), g: zero_expr() }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NonlinearConfig {
    /// `F(t, x, y, eta, rho, zx, zy)`.
    pub drift: String,
    /// `K(t, x, y, eta)`.
    #[serde(default = "zero_expr")]
    pub diffusion: String,
    pub lipschitz: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialConfig {
    /// Expressions in `x`, `y` (`t` is 0).
    Analytic { z0: String, z1: String },
    /// Random sine series drawn from the ensemble seed.
    Fourier {
        modes: usize,
        #[serde(default)]
        index: u64,
    },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DynamicsConfig {
    #[serde(default)]
    pub linear: Option<LinearConfig>,
    #[serde(default)]
    pub nonlinear: Option<NonlinearConfig>,
    /// When false the stochastic terms are dropped.
    #[serde(default = "yes")]
    pub noise: bool,
    #[serde(default)]
    pub p_exponent: Option<f64>,
    pub initial: InitialConfig,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CarlemanConfig {
    pub c0: f64,
    pub c1: f64,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lambda_lo")]
    pub lambda_lo: f64,
    #[serde(default = "default_lambda_hi")]
    pub lambda_hi: f64,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_lambda_lo() -> f64 {
    0.1
}
fn default_lambda_hi() -> f64 {
    1e3
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub seed: u64,
    #[serde(default = "one")]
    pub n_paths: usize,
    #[serde(default = "one")]
    pub n_data: usize,
    /// Sine modes per axis of random initial data.
    #[serde(default = "five")]
    pub n_modes: usize,
}

fn one() -> usize {
    1
}
fn five() -> usize {
    5
}

/// Subcommand settings; each subcommand reads the keys it needs.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Observation modes.
    #[serde(default = "default_modes")]
    pub modes: Vec<TraceKind>,
    /// Constant of the energy and hidden-regularity checks.
    #[serde(default = "ten")]
    pub constant: f64,
    /// Largest acceptable observability constant.
    #[serde(default = "default_c_max")]
    pub c_max: f64,
    /// Repeat the study on the refined grid and compare.
    #[serde(default)]
    pub refine: bool,
    /// Largest accepted relative change under refinement.
    #[serde(default = "default_refine_tol")]
    pub refine_tol: f64,
    #[serde(default = "default_sample_points")]
    pub sample_points: usize,
    /// Test functions of `(t, x, y)` for the identity checks.
    #[serde(default = "default_test_fields")]
    pub test_fields: Vec<String>,
    /// Multiplier vector field `[h_x, h_y]`.
    #[serde(default = "default_multiplier")]
    pub multiplier: [String; 2],
    #[serde(default = "default_identity_tol")]
    pub identity_tol: f64,
    #[serde(default = "default_fd_steps")]
    pub fd_steps: Vec<f64>,
    /// Times `s` and `t` of the energy estimate; `t` defaults to `T`.
    #[serde(default)]
    pub energy_s: f64,
    #[serde(default)]
    pub energy_t: Option<f64>,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_grad_tol")]
    pub grad_tol: f64,
    #[serde(default)]
    pub obj_tol: f64,
    #[serde(default)]
    pub regularization: f64,
    /// Generate synthetic data on the refined grid.
    #[serde(default)]
    pub fine_data: bool,
    /// Observation CSV written by `observe`; synthetic data when absent.
    #[serde(default)]
    pub trace_file: Option<PathBuf>,
    /// Relative size of the perturbation of the truth used as initial guess; zero guess when absent.
    #[serde(default)]
    pub guess_perturbation: Option<f64>,
    /// Largest accepted relative reconstruction error.
    #[serde(default)]
    pub max_error: Option<f64>,
    #[serde(default = "default_pairs")]
    pub pairs: usize,
    /// Brownian path used by single-path subcommands.
    #[serde(default)]
    pub path_index: u64,
}

fn default_modes() -> Vec<TraceKind> {
    vec![TraceKind::Boundary]
}
fn ten() -> f64 {
    10.0
}
fn default_c_max() -> f64 {
    1e6
}
fn default_refine_tol() -> f64 {
    0.2
}
fn default_sample_points() -> usize {
    100
}
fn default_test_fields() -> Vec<String> {
    vec!["sin(2*t + x)*cos(3*y) + x*x*t".into(), "exp(0.3*t)*(x*x + y) + cos(x*y)".into()]
}
fn default_multiplier() -> [String; 2] {
    ["x + 0.1*t".into(), "y*y".into()]
}
fn default_identity_tol() -> f64 {
    1e-8
}
fn default_fd_steps() -> Vec<f64> {
    vec![4e-2, 2e-2, 1e-2, 5e-3]
}
fn default_max_iter() -> usize {
    200
}
fn default_grad_tol() -> f64 {
    1e-8
}
fn default_pairs() -> usize {
    30
}

impl Default for TaskConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all task keys have defaults")
    }
}

/// Line (1-based) of the first occurrence of `"key"` in `text`.
fn line_of(text: &str, key: &str) -> Option<usize> {
    let pat = format!("\"{key}\"");
    text.lines().position(|l| l.contains(&pat)).map(|i| i + 1)
}

fn config_error(text: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    match line_of(text, key) {
        Some(l) => Error::Config(format!("line {l} (`{key}`): {msg}")),
        None => Error::Config(format!("`{key}`: {msg}")),
    }
}

/// The resolved objects a run works with.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub grid: Grid,
    pub metric: MetricField,
    pub weight: WeightSpec,
    pub spec: ProblemSpec,
    pub partition: BoundaryPartition,
    pub condition_d: ConditionReport,
    pub condition2: Condition2Report,
}

impl ExperimentConfig {
    /// Parses JSON; syntax and schema errors report line and column.
    pub fn parse(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| {
            // serde_json appends " at line L column C"; lead with it instead
            let msg = e.to_string();
            let msg = msg.rsplit_once(" at line ").map_or(msg.as_str(), |(m, _)| m).to_string();
            Error::Config(format!("line {}, column {}: {msg}", e.line(), e.column()))
        })
    }

    pub fn load(path: &Path) -> Result<(Self, String)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut cfg = Self::parse(&text)?;
        // tabulated weights are resolved relative to the config file
        if let WeightConfig::Tabulated { file } = &mut cfg.geometry.weight {
            if file.is_relative() {
                if let Some(dir) = path.parent() {
                    *file = dir.join(&*file);
                }
            }
        }
        if let Some(f) = &mut cfg.task.trace_file {
            if f.is_relative() {
                if let Some(dir) = path.parent() {
                    *f = dir.join(&*f);
                }
            }
        }
        Ok((cfg, text))
    }

    pub fn grid(&self, text: &str) -> Result<Grid> {
        let g = &self.geometry;
        Grid::new(&g.lo, &g.hi, &g.nx, g.t_final, g.nt).map_err(|e| config_error(text, "geometry", e))
    }

    pub fn metric(&self, dim: usize) -> MetricField {
        self.geometry.metric.clone().unwrap_or_else(|| MetricField::identity(dim))
    }

    /// The weight function before certification.
    pub fn weight(&self, grid: &Grid, text: &str) -> Result<WeightSpec> {
        let w = match &self.geometry.weight {
            WeightConfig::Quadratic { a, center, offset } => {
                if center.len() != grid.dim {
                    return Err(config_error(text, "center", format!("expected {} coordinates", grid.dim)));
                }
                let mut c = [0.0; 2];
                c[..grid.dim].copy_from_slice(center);
                WeightSpec::quadratic(grid.dim, *a, c, *offset)
            }
            WeightConfig::Tabulated { file } => {
                let body = std::fs::read_to_string(file).map_err(|e| config_error(text, "file", format!("{}: {e}", file.display())))?;
                let (_, rows) = read_numeric_csv(&body).map_err(|e| config_error(text, "file", e))?;
                let values: Vec<f64> = rows.iter().filter_map(|r| r.first().copied()).collect();
                if values.len() != grid.n_nodes() {
                    return Err(config_error(text, "file", format!("{} values for {} nodes", values.len(), grid.n_nodes())));
                }
                WeightSpec::tabulated(grid, values)
            }
        };
        match self.geometry.dilate {
            Some([a, b]) => dilate_weight(&w, a, b, grid).map_err(|e| config_error(text, "dilate", e)),
            None => Ok(w),
        }
    }

    pub fn dynamics(&self, text: &str) -> Result<Dynamics> {
        let d = &self.dynamics;
        match (&d.linear, &d.nonlinear) {
            (Some(_), Some(_)) => Err(config_error(text, "nonlinear", "give either `linear` or `nonlinear`, not both")),
            (None, Some(n)) => {
                let diffusion = if d.noise { n.diffusion.as_str() } else { "0" };
                Ok(Dynamics::Nonlinear(Nonlinearity::parse(&n.drift, diffusion, n.lipschitz).map_err(|e| config_error(text, "nonlinear", e))?))
            }
            (l, None) => {
                let l = l.clone().unwrap_or_default();
                let (b4, g) = if d.noise { (l.b4.as_str(), l.g.as_str()) } else { ("0", "0") };
                let c = LinearCoefficients::parse(&l.b1, [&l.b2[0], &l.b2[1]], &l.b3, b4, &l.f, g).map_err(|e| config_error(text, "linear", e))?;
                Ok(Dynamics::Linear(c))
            }
        }
    }

    pub fn initial(&self, grid: &Grid, text: &str) -> Result<StateSnapshot> {
        match &self.dynamics.initial {
            InitialConfig::Analytic { z0, z1 } => {
                let p = |s: &str| Expr::parse(s, FIELD_VARS).map_err(|e| config_error(text, "initial", e));
                let (a, b) = (p(z0)?, p(z1)?);
                Ok(StateSnapshot::from_fns(grid, |x| a.eval(&[0.0, x[0], x[1]]), |x| b.eval(&[0.0, x[0], x[1]])))
            }
            InitialConfig::Fourier { modes, index } => Ok(random_fourier_data(grid, *modes, self.ensemble.seed, *index)),
        }
    }

    /// Builds and validates everything; geometry failures are errors.
    pub fn resolve(&self, text: &str) -> Result<Experiment> {
        let grid = self.grid(text)?;
        let metric = self.metric(grid.dim);
        if metric.dim != grid.dim {
            return Err(config_error(text, "metric", format!("metric dimension {} does not match the grid", metric.dim)));
        }
        let raw = self.weight(&grid, text)?;
        let (weight, condition_d) = certify(&metric, &raw, &grid).map_err(|e| config_error(text, "weight", e))?;
        if !condition_d.ok {
            return Err(config_error(text, "weight", format!("weight condition fails: mu0 = {}, min |grad d| = {}", condition_d.mu0, condition_d.min_grad)));
        }
        let c = &self.carleman;
        let condition2 = check_condition2(&weight, &metric, &grid, c.c0, c.c1)?;
        if !condition2.all_pass() {
            let key = if condition2.time_long_enough { "carleman" } else { "t_final" };
            return Err(config_error(text, key, format!("time/weight compatibility fails: {}", condition2.failures().join("; "))));
        }
        let partition = compute_gamma0(&weight, &metric, &grid, self.geometry.delta).map_err(|e| config_error(text, "weight", e))?;
        let dynamics = self.dynamics(text)?;
        let p = self.dynamics.p_exponent.unwrap_or(f64::INFINITY);
        let spec = ProblemSpec::new(grid.clone(), metric.clone(), dynamics, p).map_err(|e| config_error(text, "dynamics", e))?;
        Ok(Experiment { config: self.clone(), grid, metric, weight, spec, partition, condition_d, condition2 })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const BENCH: &str = r#"{
  "geometry": {
    "lo": [0.0], "hi": [1.0], "nx": [51], "t_final": 10.0, "nt": 1000,
    "weight": { "kind": "quadratic", "a": 4.0, "center": [-1.0] }
  },
  "dynamics": {
    "linear": { "b4": "0.5" },
    "initial": { "kind": "analytic", "z0": "sin(pi*x)", "z1": "0" }
  },
  "carleman": { "c0": 1.0, "c1": 0.7 },
  "ensemble": { "seed": 7 }
}"#;

    #[test]
    fn benchmark_resolves() {
        let cfg = ExperimentConfig::parse(BENCH).unwrap();
        let e = cfg.resolve(BENCH).unwrap();
        assert!((e.condition_d.mu0 - 16.0).abs() < 1e-6);
        assert!(e.condition2.all_pass());
        assert_eq!(e.partition.gamma0_nodes().len(), 1);
        assert!(e.spec.has_noise());
    }

    #[test]
    fn short_time_cites_flag_two_with_line() {
        let text = BENCH.replace("\"t_final\": 10.0", "\"t_final\": 6.0").replace("\"nt\": 1000", "\"nt\": 600");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let msg = cfg.resolve(&text).unwrap_err().to_string();
        assert!(msg.contains("flag (2)") && msg.contains("line 3"), "{msg}");
    }

    #[test]
    fn syntax_errors_have_positions() {
        let text = BENCH.replace("\"nt\": 1000", "\"nt\": 1000,,");
        let msg = ExperimentConfig::parse(&text).unwrap_err().to_string();
        assert!(msg.contains("line 3"), "{msg}");
        let missing = BENCH.replace("\"seed\": 7", "\"n_paths\": 2");
        let msg = ExperimentConfig::parse(&missing).unwrap_err().to_string();
        assert!(msg.contains("seed") && msg.contains("line"), "{msg}");
    }

    #[test]
    fn unknown_keys_and_bad_expressions_are_rejected() {
        let text = BENCH.replace("\"b4\": \"0.5\"", "\"b5\": \"0.5\"");
        assert!(ExperimentConfig::parse(&text).is_err());
        let text = BENCH.replace("\"b4\": \"0.5\"", "\"b4\": \"0.5*\"");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        let msg = cfg.resolve(&text).unwrap_err().to_string();
        assert!(msg.contains("line 7"), "{msg}");
    }

    #[test]
    fn noise_switch_drops_stochastic_terms() {
        let text = BENCH.replace("\"initial\"", "\"noise\": false, \"initial\"");
        let cfg = ExperimentConfig::parse(&text).unwrap();
        assert!(!cfg.resolve(&text).unwrap().spec.has_noise());
    }
}
