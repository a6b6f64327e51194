use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("attention row {row} has no admissible key")]
    FullyMaskedRow { row: usize },

    #[error("training diverged at epoch {epoch}, batch {batch}: {what}")]
    Divergence {
        epoch: usize,
        batch: usize,
        what: String,
    },

    #[error("non-finite gradient in parameter tensor {tensor}")]
    NonFiniteGradient { tensor: usize },

    #[error("feature {feature} has a degenerate value range")]
    DegenerateRange { feature: String },

    #[error("invalid state: {0}")]
    State(String),

    #[error("parse error at row {row}, column {column}: {msg}")]
    Parse {
        row: usize,
        column: String,
        msg: String,
    },

    #[error("unknown feature `{0}`")]
    UnknownFeature(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("numeric failure after {iterations} iterations: {msg}")]
    Numeric { iterations: usize, msg: String },

    #[error("degenerate variance in target values")]
    DegenerateVariance,

    #[error("empty input")]
    EmptyInput,

    #[error("coverage mismatch: {0}")]
    Coverage(String),

    #[error("invalid power trace: {0}")]
    Trace(String),

    #[error("unknown region `{0}`")]
    UnknownRegion(String),

    #[error("unknown group label `{0}`")]
    UnknownGroup(String),

    #[error("ground truth unavailable for this cohort")]
    TruthUnavailable,

    #[error("loss denominator is zero: every cell is missing")]
    ZeroDenominator,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }
}
