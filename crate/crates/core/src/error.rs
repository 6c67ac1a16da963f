use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid layout: {0}")]
    InvalidLayout(String),

    #[error("unknown vocabulary word `{0}`")]
    Vocabulary(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("numeric fault in {location}: {detail}")]
    Numeric { location: String, detail: String },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("token index {index} out of range for prompt of length {len}")]
    TokenIndex { index: usize, len: usize },

    #[error("empty mask: {0}")]
    EmptyMask(String),

    #[error("missing mask for concept `{0}`")]
    MissingMask(String),

    #[error("unregistered placeholder `{0}`")]
    UnknownPlaceholder(String),

    #[error("missing input: {}", .0.display())]
    MissingInput(PathBuf),

    #[error("checkpoint version mismatch: found {found}, expected {expected}")]
    CheckpointVersion { found: u32, expected: u32 },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("evaluation error: {0}")]
    Eval(String),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Process exit status: 2 missing input, 3 configuration, 4 checkpoint
    /// version, 1 anything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput(_) => 2,
            Error::Config(_) | Error::Vocabulary(_) | Error::UnknownPlaceholder(_) => 3,
            Error::CheckpointVersion { .. } => 4,
            _ => 1,
        }
    }
}
