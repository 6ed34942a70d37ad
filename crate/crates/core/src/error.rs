use thiserror::Error;

/// Errors raised by the tensor engine and everything built on it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("{op}: non-finite value produced at node {node}")]
    NonFinite { op: &'static str, node: usize },

    #[error("backward root must be a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("graph already freed")]
    GraphFreed,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("invalid task config: {0}")]
    InvalidConfig(String),

    #[error("missing gradients: expected {expected}, got {got}")]
    MissingGrads { expected: usize, got: usize },

    #[error("training diverged at iteration {iter}: {cause}")]
    Diverged { iter: usize, cause: String },

    #[error("empty input: {0}")]
    Empty(&'static str),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
