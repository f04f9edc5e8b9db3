use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {context}: expected {expected}, got {actual:?}")]
    ShapeMismatch {
        context: String,
        expected: String,
        actual: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("dataset error at {path}: {message}")]
    Dataset { path: PathBuf, message: String },

    #[error("sample index {index} out of range (sequence has {len} frames)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("frame {index} has no {side} context frame")]
    MissingContext { index: usize, side: &'static str },

    #[error("no valid ground-truth pixels in evaluation range")]
    NoValidPixels,

    #[error("non-finite loss in term `{term}` at step {step}")]
    NonFiniteLoss { term: String, step: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint version mismatch: file has {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("checkpoint was written for a different model configuration: {0}")]
    CheckpointConfig(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(context: impl Into<String>, expected: impl Into<String>, actual: &[usize]) -> Self {
        Error::ShapeMismatch {
            context: context.into(),
            expected: expected.into(),
            actual: actual.to_vec(),
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
