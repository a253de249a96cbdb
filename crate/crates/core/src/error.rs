use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("index {index} out of range for {op} with {len} slots")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },

    #[error("variable belongs to a different tape")]
    ForeignVar,

    #[error("tape has already been consumed by a backward pass")]
    TapeConsumed,

    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),

    #[error("non-finite value produced by `{op}` during {phase}")]
    NonFinite {
        op: &'static str,
        phase: &'static str,
    },

    #[error("rollout diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(
        "step function is not pure: recomputation of step {step} differs from the stored boundary"
    )]
    ImpureStep { step: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid file format in {path}: {detail}")]
    Format { path: PathBuf, detail: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn config(detail: impl Into<String>) -> Self {
        Error::Config(detail.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            detail: detail.into(),
        }
    }

    /// Process exit code: 2 for usage/config/input problems, 3 for numeric failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NonFinite { .. } | Error::Divergence { .. } | Error::ImpureStep { .. } => 3,
            _ => 2,
        }
    }
}
