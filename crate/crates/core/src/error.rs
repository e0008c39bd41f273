use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, ClimError>;

/// Broad failure class, used by the command line front end to pick an exit code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorClass {
    Validation,
    Io,
    Numeric,
}

#[derive(Debug, Error)]
pub enum ClimError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("cannot normalize a zero vector")]
    ZeroVector,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported tensor file version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype code {0}")]
    UnsupportedDtype(u8),
    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: u64, found: u64 },
    #[error("dimension overflow in header")]
    DimOverflow,
    #[error("malformed file {path}: {reason}")]
    Malformed { path: PathBuf, reason: String },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("degenerate embedding (zero norm before normalization)")]
    DegenerateEmbedding,
    #[error("stale activation cache: {0}")]
    StaleCache(String),
    #[error("stale cluster model: fitted at epoch {model}, bank is at epoch {bank}")]
    StaleModel { model: u64, bank: u64 },
    #[error("negative queue is empty")]
    EmptyQueue,
    #[error("vector is not unit norm (norm {0})")]
    NotNormalized(f64),
    #[error("labels required")]
    LabelsRequired,
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("config error at `{key}`: {reason}")]
    Config { key: String, reason: String },
}

impl ClimError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        ClimError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        ClimError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn class(&self) -> ErrorClass {
        match self {
            ClimError::Io { .. }
            | ClimError::BadMagic
            | ClimError::UnsupportedVersion(_)
            | ClimError::UnsupportedDtype(_)
            | ClimError::Truncated { .. }
            | ClimError::DimOverflow
            | ClimError::Malformed { .. } => ErrorClass::Io,
            ClimError::DegenerateEmbedding | ClimError::NonFinite(_) => ErrorClass::Numeric,
            _ => ErrorClass::Validation,
        }
    }
}
