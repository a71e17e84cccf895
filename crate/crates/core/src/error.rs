use thiserror::Error;

use crate::optimizer::FitResult;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("matrix is not positive definite (pivot {pivot} = {value:e})")]
    NotPositiveDefinite { pivot: usize, value: f64 },

    #[error("matrix is not symmetric: entry ({row}, {col}) differs from its transpose")]
    NotSymmetric { row: usize, col: usize },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("model `{model}` takes {expected} parameters, got {found}")]
    ParamCountMismatch {
        model: String,
        expected: usize,
        found: usize,
    },

    #[error("model `{model}` produced a non-finite value")]
    NonFiniteOutput { model: String },

    #[error("invalid batch size {batch} for {n} data points")]
    InvalidBatchSize { batch: usize, n: usize },

    #[error("free-energy trace is empty")]
    EmptyTrace,

    #[error("no convergence after {iterations} iterations")]
    NonConvergence { iterations: usize },

    #[error("model evaluation failed at epoch {epoch}: {reason}")]
    ModelEvaluationFailure {
        epoch: usize,
        reason: String,
        partial: Box<FitResult>,
    },

    #[error("unknown model `{0}`")]
    UnknownModel(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: String,
        line: usize,
        message: String,
    },

    #[error("invalid dataset: {0}")]
    InvariantViolation(String),

    #[error("column tags do not form control/label pairs at pair {pair}")]
    TagMismatch { pair: usize },

    #[error("{path}: {source}")]
    File { path: String, source: std::io::Error },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
