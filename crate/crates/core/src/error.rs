use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("kernel too large: {0}")]
    KernelTooLarge(String),

    #[error("manifest {path}: {problems:?}")]
    Manifest { path: PathBuf, problems: Vec<String> },

    #[error("checkpoint version mismatch: expected {expected:?}, found {found:?}")]
    CheckpointVersion { expected: String, found: String },

    #[error("corrupt checkpoint archive: {0}")]
    CorruptCheckpoint(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// Short machine-readable tag for error reports.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "shape_mismatch",
            Error::InvalidConfig(_) => "invalid_config",
            Error::InvalidInput(_) => "invalid_input",
            Error::KernelTooLarge(_) => "kernel_too_large",
            Error::Manifest { .. } => "manifest",
            Error::CheckpointVersion { .. } => "checkpoint_version",
            Error::CorruptCheckpoint(_) => "corrupt_checkpoint",
            Error::NonFiniteLoss { .. } => "non_finite_loss",
            Error::Io { .. } => "io",
            Error::Image { .. } => "image",
            Error::Json(_) => "json",
        }
    }
}
