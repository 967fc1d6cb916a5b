//! Error types shared across the crate.

use thiserror::Error;

/// Errors raised by model fitting, integration, and data handling.
#[derive(Error, Debug)]
pub enum Error {
    /// Invalid configuration or arguments (bad structure name, tolerance <= 0, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Malformed input data; carries the 1-based row number when known.
    #[error("parse error at row {row}: {msg}")]
    Parse { row: usize, msg: String },

    /// A response value outside the support of the declared margin family.
    #[error("response {y} outside support of {family} (row {row})")]
    UnsupportedResponse {
        y: i64,
        family: String,
        row: usize,
    },

    /// Stacked design matrix does not have full column rank.
    #[error("design matrix is rank deficient (column {column})")]
    RankDeficient { column: usize },

    /// Iterative solver failed to reach its tolerance.
    #[error("{stage} did not converge after {iterations} iterations (gradient norm {grad_norm:.3e})")]
    NonConvergence {
        stage: &'static str,
        iterations: usize,
        grad_norm: f64,
        last_iterate: Vec<f64>,
    },

    /// A working covariance or sensitivity matrix could not be factorized.
    #[error("singular matrix in {context}")]
    Singular { context: String },

    /// A correlation parameter violates its positive-definiteness bound.
    #[error("correlation parameters infeasible: {0}")]
    InfeasibleCorrelation(String),

    /// Rectangle probability evaluation failed.
    #[error("integration failure: {0}")]
    Integration(String),

    /// Underlying I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    /// Process exit code convention: 2 for config/parse problems, 3 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parse { .. } | Error::UnsupportedResponse { .. } => 2,
            Error::Io(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
