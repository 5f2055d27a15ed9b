use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("probabilities must be non-negative and sum to 1 (got sum {sum})")]
    InvalidProbabilities { sum: f64 },

    #[error("measurement window is empty: duration {duration} must exceed warmup {warmup}")]
    EmptyWindow { duration: f64, warmup: f64 },

    #[error("drift fit is degenerate: the state set has no spread in the regressor")]
    DegenerateFit,

    #[error("state set is empty")]
    EmptyStateSet,

    #[error("baseline `{0}` is not among the reports")]
    MissingBaseline(String),

    #[error("baseline `{0}` has zero average system time")]
    ZeroBaseline(String),

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
