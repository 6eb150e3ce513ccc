use std::path::PathBuf;

use islab_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum IslError {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("load error: {0}")]
    Load(String),
    #[error("undefined metric: {0}")]
    UndefinedMetric(String),
    #[error("routing error: {0}")]
    Routing(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("parse error: {0}")]
    Parse(String),
}

impl IslError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io { path: path.into(), source }
    }

    /// True for errors caused by the data or files supplied by the user (as
    /// opposed to configuration mistakes or internal failures).
    pub fn is_data_error(&self) -> bool {
        matches!(
            self,
            Self::Io { .. } | Self::Format { .. } | Self::Load(_) | Self::UndefinedMetric(_) | Self::Parse(_)
        )
    }
}

pub type Result<T, E = IslError> = std::result::Result<T, E>;
