use std::path::PathBuf;

use nsf_tensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("index error: {0}")]
    Index(String),
    #[error("I/O error at {path}: {message}")]
    Io { path: PathBuf, message: String },
    #[error("{stage}: {source}")]
    Stage { stage: &'static str, source: Box<CoreError> },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn io(path: impl Into<PathBuf>, err: impl std::fmt::Display) -> Self {
        CoreError::Io { path: path.into(), message: err.to_string() }
    }

    /// Process exit code: 2 config, 3 data/I/O, 4 numeric, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CoreError::Config(_) => 2,
            CoreError::Data(_) | CoreError::Io { .. } | CoreError::Index(_) => 3,
            CoreError::Stage { source, .. } => source.exit_code(),
            CoreError::Tensor(TensorError::Numeric(_)) => 4,
            CoreError::Tensor(TensorError::Io(_) | TensorError::Format(_)) => 3,
            CoreError::Tensor(_) => 1,
        }
    }
}

/// Tags an error with the pipeline stage that produced it.
pub trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: Into<CoreError>> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CoreError::Stage { stage, source: Box::new(e.into()) })
    }
}

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}
