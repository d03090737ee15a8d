use std::path::PathBuf;

use thiserror::Error;

/// Coarse classification used by front ends to pick exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numerical,
    Io,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("zero-shot violation: categories {categories:?} appear in both train and test")]
    ZeroShotViolation { categories: Vec<i64> },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("window [{start_ms}, {end_ms}) ms outside trial span [{min_ms}, {max_ms}] ms")]
    Bounds {
        start_ms: f64,
        end_ms: f64,
        min_ms: f64,
        max_ms: f64,
    },

    #[error("unsupported rate conversion {source_hz} Hz -> {target_hz} Hz (integer decimation only)")]
    UnsupportedRate { source_hz: f64, target_hz: f64 },

    #[error("empty channel selection")]
    EmptySelection,

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite loss at epoch {epoch}, step {step}: {detail}")]
    NonFinite {
        epoch: usize,
        step: usize,
        detail: String,
    },

    #[error("embedding provider failed on {stimulus}: {reason}")]
    Provider { stimulus: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn kind(&self) -> ErrorKind {
        match self {
            Error::Config(_) | Error::UnsupportedRate { .. } | Error::EmptySelection => {
                ErrorKind::Config
            }
            Error::NonFinite { .. } => ErrorKind::Numerical,
            Error::Io(_) => ErrorKind::Io,
            _ => ErrorKind::Data,
        }
    }

    pub(crate) fn load(path: impl Into<PathBuf>, reason: impl ToString) -> Self {
        Error::Load {
            path: path.into(),
            reason: reason.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
