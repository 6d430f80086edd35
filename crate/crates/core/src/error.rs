use std::fmt;

/// Errors produced by tensor kernels, model assembly and file I/O.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: {dim} mismatch (expected {expected}, got {got})")]
    ShapeMismatch {
        op: &'static str,
        dim: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: expected rank {expected}, got rank {got}")]
    Rank {
        op: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("{op}: {reason}")]
    InvalidArgument { op: &'static str, reason: String },

    #[error("{op}: non-finite value at index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("{what}: malformed input at byte {offset}: {reason}")]
    Malformed {
        what: &'static str,
        offset: usize,
        reason: String,
    },

    #[error("config line {line}: {reason}")]
    Config { line: usize, reason: String },

    #[error("weights: {0}")]
    Weights(String),

    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(op: &'static str, reason: impl fmt::Display) -> Self {
        Error::InvalidArgument {
            op,
            reason: reason.to_string(),
        }
    }

    /// Short stable identifier used for machine-parseable diagnostics.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch { .. } => "shape",
            Error::Rank { .. } => "rank",
            Error::InvalidArgument { .. } => "invalid-argument",
            Error::NonFinite { .. } => "non-finite",
            Error::Malformed { .. } => "malformed",
            Error::Config { .. } => "config",
            Error::Weights(_) => "weights",
            Error::Io(_) => "io",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
