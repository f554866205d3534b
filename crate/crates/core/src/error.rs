use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("weight function is not strictly positive: d = {value} at node {node}")]
    NonPositiveWeight { node: usize, value: f64 },

    #[error("metric is not uniformly elliptic: smallest eigenvalue {eigenvalue} < s0 = {s0} at node {node}")]
    DegenerateMetric { node: usize, eigenvalue: f64, s0: f64 },

    #[error("no boundary node satisfies the observation sign test; Gamma_0 is empty")]
    EmptyGamma0,

    #[error("CFL number {cfl} exceeds 1; refusing explicit time stepping")]
    CflViolation { cfl: f64 },

    #[error("non-finite state at time level {level}, node {node}")]
    NonFiniteState { level: usize, node: usize },

    #[error("invalid parameters: {0}")]
    InvalidParameters(String),

    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("degenerate ensemble: {0}")]
    DegenerateEnsemble(String),

    #[error("no convergence after {iterations} iterations (gradient norm {gradient_norm:.3e}, estimated null-space dimension {null_space_estimate})")]
    NoConvergence { iterations: usize, gradient_norm: f64, null_space_estimate: usize },

    #[error("ill-posed geometry: {0}")]
    IllPosedGeometry(String),

    #[error("expression error: {0}")]
    Expr(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("malformed file: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
