use thiserror::Error;

/// Errors raised by the solvers, diagnostics and experiment driver.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },

    #[error("invalid initial condition: {0}")]
    InvalidInitialCondition(String),

    #[error("kernel evaluated at |x| = {radius:e}, inside the regularization radius {r_reg:e}")]
    SingularInput { radius: f64, r_reg: f64 },

    #[error("state at step {step} carries no history for the lagged MDE gradient")]
    MissingHistory { step: usize },

    #[error("fields live on different spectral grids ({left} vs {right})")]
    GridMismatch { left: String, right: String },

    #[error("linear solve did not converge: relative residual {residual:e} after {iterations} iterations")]
    SolverDiverged { residual: f64, iterations: usize },

    #[error("tridiagonal solve hit a zero pivot at row {row}")]
    Tridiagonal { row: usize },

    #[error("reference has zero norm")]
    ZeroReference,

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("ln f undefined: lattice value {value:e} at node {node}")]
    NonPositiveField { value: f64, node: usize },

    #[error("snapshot time {time} is not a multiple of dt = {dt} within [0, T]")]
    SnapshotTime { time: f64, dt: f64 },

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(name: &'static str, reason: impl Into<String>) -> Error {
    Error::InvalidParam {
        name,
        reason: reason.into(),
    }
}

impl Error {
    /// Stable machine-readable name of the variant.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::InvalidParam { .. } => "invalid_param",
            Error::InvalidInitialCondition(_) => "invalid_initial_condition",
            Error::SingularInput { .. } => "singular_input",
            Error::MissingHistory { .. } => "missing_history",
            Error::GridMismatch { .. } => "grid_mismatch",
            Error::SolverDiverged { .. } => "solver_diverged",
            Error::Tridiagonal { .. } => "tridiagonal",
            Error::ZeroReference => "zero_reference",
            Error::DegenerateFit(_) => "degenerate_fit",
            Error::NonPositiveField { .. } => "non_positive_field",
            Error::SnapshotTime { .. } => "snapshot_time",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
        }
    }
}
