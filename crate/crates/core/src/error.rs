use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the tuning pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("value at index {index} lies outside the parameter bounds")]
    OutOfBounds { index: usize },

    #[error("value at index {index} lies outside the unit box")]
    OutOfUnitBox { index: usize },

    #[error("no sample passed the stability threshold")]
    EmptyResult,

    #[error("invalid bounds: {0}")]
    InvalidBounds(String),

    #[error("Cholesky factorization failed after jitter escalation to {jitter:e}")]
    CholeskyFailure { jitter: f64 },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("no active trust regions and restarts are disabled")]
    NoActiveRegions,

    #[error("candidate {0} was never issued by this optimizer or was already observed")]
    UnknownCandidate(u64),

    #[error("{0} initial design points are still awaiting evaluation")]
    PendingEvaluations(usize),

    #[error("batch of {got} samples is too small (need at least {min})")]
    BatchTooSmall { got: usize, min: usize },

    #[error("insufficient data: {got} samples available, {needed} needed")]
    InsufficientData { got: usize, needed: usize },

    #[error("unknown environment id `{0}`")]
    UnknownEnvironment(String),

    #[error("evaluation failed at theta = {theta:?}: {source}")]
    Evaluation {
        theta: Vec<f64>,
        #[source]
        source: Box<Error>,
    },

    #[error("non-finite cost {0}")]
    NonFiniteCost(f64),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
