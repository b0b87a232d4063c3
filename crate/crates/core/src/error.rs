use thiserror::Error;

/// Errors raised across the simulator.
#[derive(Debug, Error)]
pub enum Error {
    #[error("grid mismatch: expected {expected} values, found {found}")]
    GridMismatch { expected: usize, found: usize },

    #[error("unsupported derivative order {0} (only 1 and 2 are available)")]
    UnsupportedOrder(usize),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("direct quadrature refused: n_v = {n_v} exceeds the cost guard of {limit}")]
    CostGuard { n_v: usize, limit: usize },

    #[error("Picard iteration did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("non-finite value produced during {stage} at t = {time}")]
    NonFinite { stage: &'static str, time: f64 },

    #[error("decay fit failed: {0}")]
    Fit(String),

    #[error("weight index out of range: |alpha| + |beta| = {0} > 2")]
    WeightOrder(usize),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("initial condition: {0}")]
    InitialCondition(String),

    #[error("invalid configuration:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
