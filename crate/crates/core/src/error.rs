use std::path::PathBuf;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch on axis {axis}: expected {expected}, found {found}")]
    ShapeMismatch {
        op: &'static str,
        axis: usize,
        expected: usize,
        found: usize,
    },

    #[error("{op}: expected rank {expected}, found rank {found}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("{op}: axis {axis} is empty")]
    EmptyAxis { op: &'static str, axis: usize },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    InvalidAxis { op: &'static str, axis: usize, rank: usize },

    #[error("tensor of {len} elements does not fit shape {shape:?}")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    #[error("label {label} at (n={n}, row={row}, col={col}) outside [0, {classes})")]
    LabelOutOfRange {
        n: usize,
        row: usize,
        col: usize,
        label: usize,
        classes: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical abort at iteration {iteration}: {detail}")]
    NumericalAbort { iteration: usize, detail: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
