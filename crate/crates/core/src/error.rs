//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("missing gradient on parameter {0}")]
    MissingGradient(String),

    #[error("non-finite loss ({0}); aborting epoch")]
    NonFiniteLoss(f64),

    #[error("malformed wav file: {0}")]
    MalformedWav(String),

    #[error("unsupported wav encoding: {0}")]
    UnsupportedWav(String),

    #[error("channel count mismatch: expected {expected}, got {got}")]
    ChannelCount { expected: usize, got: usize },

    #[error("checkpoint version mismatch: found {found}, supported {supported}")]
    CheckpointVersion { found: u32, supported: u32 },

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("checkpoint tensor mismatch: {0}")]
    CheckpointShape(String),

    #[error("degenerate reference set: {0}")]
    DegenerateReferences(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("manifest error: {0}")]
    Manifest(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
