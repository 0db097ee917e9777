use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, TpbError>;

#[derive(Debug, Error)]
pub enum TpbError {
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("unknown city `{0}`")]
    UnknownCity(String),

    #[error("unknown variant `{0}` (expected full, no_meta, no_adj or no_clu)")]
    UnknownVariant(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("missing dependency: {0}")]
    Dependency(String),

    #[error("corrupt file {path}: {reason}")]
    CorruptFile { path: PathBuf, reason: String },

    #[error("unsupported file version in {path}: found magic {found:?}, expected {expected:?}")]
    Version {
        path: PathBuf,
        found: String,
        expected: String,
    },

    #[error("hash mismatch: {0}")]
    HashMismatch(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl TpbError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TpbError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn corrupt(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        TpbError::CorruptFile {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// Process exit code used by the command-line front end.
    pub fn exit_code(&self) -> i32 {
        match self {
            TpbError::Config(_)
            | TpbError::InvalidArgument(_)
            | TpbError::UnknownVariant(_)
            | TpbError::UnknownCity(_)
            | TpbError::Serde(_) => 2,
            TpbError::Dependency(_)
            | TpbError::HashMismatch(_)
            | TpbError::CorruptFile { .. }
            | TpbError::Version { .. } => 3,
            _ => 1,
        }
    }
}
