use thiserror::Error;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// An argument was out of range or structurally invalid.
    #[error("invalid input: {0}")]
    InvalidInput(String),

    /// An environment or run configuration could not be used.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file could not be imported; `record` is the offending row.
    #[error("import error at record {record}: {message}")]
    Import { record: usize, message: String },

    /// Value iteration hit its iteration cap before reaching tolerance.
    #[error(
        "value iteration did not converge for agent {agent} at level {level}: \
         residual {residual:.3e} after {iters} iterations"
    )]
    NonConvergence {
        agent: usize,
        level: usize,
        residual: f64,
        iters: usize,
    },

    /// Gradient ascent kept losing objective after repeated step-size cuts.
    #[error("learning diverged: {0}")]
    Divergence(String),

    /// A probability update degenerated to an all-zero numerator.
    #[error("degenerate distribution: {0}")]
    Degeneracy(String),

    /// A caller violated an API contract (e.g. non-stochastic policy rows).
    #[error("contract violation: {0}")]
    Contract(String),

    /// Required trajectory metadata is missing.
    #[error("metadata error: {0}")]
    Metadata(String),

    /// The requested metric does not apply to the given data.
    #[error("unsupported metric: {0}")]
    Unsupported(String),

    /// Not enough data to satisfy the request.
    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
