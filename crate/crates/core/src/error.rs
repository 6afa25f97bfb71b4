use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    /// A caller broke an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("{op}: batch of {len} is too small (need at least {min})")]
    BatchTooSmall {
        op: &'static str,
        len: usize,
        min: usize,
    },
    #[error("{op}: non-finite value ({detail})")]
    NonFinite { op: &'static str, detail: String },
    #[error("{0}: zero spread, statistic undefined")]
    Degenerate(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("io error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// Stable machine-readable category.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::InvalidConfig(_) => "invalid_config",
            Error::Contract(_) => "contract",
            Error::BatchTooSmall { .. } => "batch_too_small",
            Error::NonFinite { .. } => "non_finite",
            Error::Degenerate(_) => "degenerate",
            Error::Checkpoint(_) => "checkpoint",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
            Error::Csv(_) => "csv",
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
