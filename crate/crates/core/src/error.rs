use std::path::PathBuf;

use maskpredict_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },
    #[error("iteration {t} outside 1..={total}")]
    IterationOutOfRange { t: usize, total: usize },
    #[error("{total} iterations cannot each reveal a token of a length-{n} sequence")]
    TooManyIterations { total: usize, n: usize },
    #[error("mask count {k} outside 1..={n}")]
    MaskCount { k: usize, n: usize },
    #[error("token {token} at position {position} outside vocabulary of {limit}")]
    Token { position: usize, token: u32, limit: usize },
    #[error("sequence length {got}, expected {expected}")]
    Length { got: usize, expected: usize },
    #[error("non-finite {what} at step {step} ({regime})")]
    NonFinite { what: String, step: u64, regime: String },
    #[error("unknown pattern family {0:?}; valid families: stripes, checker, blocks, two_region")]
    UnknownFamily(String),
    #[error("empty {0}")]
    Empty(&'static str),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the failure is a numerical one (NaN/Inf in values or gradients).
    pub fn is_numeric(&self) -> bool {
        matches!(
            self,
            Error::NonFinite { .. } | Error::Tensor(TensorError::NonFinite { .. })
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
