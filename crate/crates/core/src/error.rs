use thiserror::Error;

use crate::volume::Shape3;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {left} vs {right}")]
    ShapeMismatch { left: Shape3, right: Shape3 },

    #[error("empty foreground: {0}")]
    EmptyForeground(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate {coord:?} outside grid {shape}")]
    OutOfGrid { coord: [i64; 3], shape: Shape3 },

    #[error("grid format error: {0}")]
    Format(String),

    #[error("truncated payload: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },

    #[error("payload length mismatch: header declares {declared} values, payload holds {found}")]
    PayloadMismatch { declared: usize, found: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("non-finite loss at iteration {iteration}: {detail}")]
    NonFiniteLoss { iteration: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn ensure_same_shape(left: Shape3, right: Shape3) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::ShapeMismatch { left, right })
    }
}
