use std::path::{Path, PathBuf};

use unipact_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("configuration: {0}")]
    Config(String),
    #[error("degenerate set: {0}")]
    Degenerate(String),
    #[error("unknown task {0:?}")]
    UnknownTask(String),
    #[error("missing checkpoint for {0}")]
    MissingCheckpoint(String),
    #[error("stage order: {0}")]
    Stage(String),
    #[error("incompatible artifacts: {0}")]
    Mismatch(String),
}

impl CoreError {
    pub fn io(path: impl AsRef<Path>, source: std::io::Error) -> Self {
        CoreError::Io { path: path.as_ref().to_path_buf(), source }
    }

    pub fn format(path: impl AsRef<Path>, detail: impl Into<String>) -> Self {
        CoreError::Format { path: path.as_ref().to_path_buf(), detail: detail.into() }
    }

    pub fn invalid(detail: impl Into<String>) -> Self {
        CoreError::Invalid(detail.into())
    }

    /// Short stable category name, used as the CLI error prefix.
    pub fn kind(&self) -> &'static str {
        match self {
            CoreError::Tensor(_) => "tensor",
            CoreError::Io { .. } => "io",
            CoreError::Format { .. } => "format",
            CoreError::Invalid(_) => "invalid",
            CoreError::Config(_) => "config",
            CoreError::Degenerate(_) => "degenerate",
            CoreError::UnknownTask(_) => "unknown-task",
            CoreError::MissingCheckpoint(_) => "missing-checkpoint",
            CoreError::Stage(_) => "stage",
            CoreError::Mismatch(_) => "mismatch",
        }
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;
