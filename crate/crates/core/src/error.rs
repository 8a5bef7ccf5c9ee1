use std::path::PathBuf;

use thiserror::Error;

/// Failure category, used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Validation,
    Configuration,
    Dependency,
    Divergence,
    Contract,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("validation error: {0}")]
    Validation(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("index {index} out of range (len {len}) in {what}")]
    Index {
        what: &'static str,
        index: usize,
        len: usize,
    },

    #[error("skeleton map / pose mismatch: {0}")]
    MapMismatch(String),

    #[error("alignment error: {0}")]
    Alignment(String),

    #[error("dependency error: {0}")]
    Dependency(String),

    #[error("diverged during {stage} at step {step}: {detail}")]
    Divergence {
        stage: String,
        step: usize,
        detail: String,
    },

    #[error("non-finite activation after layer {layer} ({name})")]
    NonFinite { layer: usize, name: String },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error in {path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Validation(_)
            | Error::Index { .. }
            | Error::MapMismatch(_)
            | Error::Alignment(_)
            | Error::Parse { .. } => ErrorKind::Validation,
            Error::Config(_) => ErrorKind::Configuration,
            Error::Dependency(_) => ErrorKind::Dependency,
            Error::Divergence { .. } | Error::NonFinite { .. } => ErrorKind::Divergence,
            Error::Contract(_) => ErrorKind::Contract,
            Error::Io { .. } => ErrorKind::Io,
            Error::Tensor(_) => ErrorKind::Validation,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
