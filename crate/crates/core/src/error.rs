use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum FobaError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("channel mismatch: {0}")]
    ChannelMismatch(String),
    #[error("group mismatch: {0}")]
    GroupMismatch(String),
    #[error("label {label} out of range 0..={max} ({context})")]
    LabelOutOfRange {
        label: usize,
        max: usize,
        context: String,
    },
    #[error("change mask disagrees with semantic maps at pixel ({y}, {x})")]
    MaskInconsistent { y: usize, x: usize },
    #[error("non-finite gradient for parameter {0}")]
    NonFiniteGradient(String),
    #[error("non-finite attention logits")]
    NonFiniteAttention,
    #[error("non-finite selective-scan state")]
    NonFiniteState,
    #[error("degenerate target: {0}")]
    DegenerateTarget(String),
    #[error("metric undefined: {0}")]
    DegenerateMetric(String),
    #[error("missing file {0}")]
    MissingFile(PathBuf),
    #[error("unknown label color {color:?} at pixel ({y}, {x}) of {file}")]
    UnknownColor {
        color: [u8; 3],
        y: usize,
        x: usize,
        file: PathBuf,
    },
    #[error("empty split: {0}")]
    EmptySplit(String),
    #[error("non-finite loss at step {step} (batch {batch:?})")]
    NonFiniteLoss { step: usize, batch: Vec<String> },
    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {path}: {message}")]
    Image { path: PathBuf, message: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl FobaError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        FobaError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        FobaError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    /// Coarse category used for process exit codes.
    pub fn kind(&self) -> ErrorKind {
        match self {
            FobaError::Config { .. } => ErrorKind::Config,
            FobaError::NonFiniteGradient(_)
            | FobaError::NonFiniteAttention
            | FobaError::NonFiniteState
            | FobaError::NonFiniteLoss { .. } => ErrorKind::Numeric,
            _ => ErrorKind::Data,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ErrorKind {
    Config,
    Data,
    Numeric,
}

pub type Result<T, E = FobaError> = std::result::Result<T, E>;
