use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes; the message carries both shapes.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("index out of bounds: {0}")]
    Bounds(String),

    /// Operation attempted in the wrong lifecycle state (e.g. reparameterizing
    /// an unfrozen BatchNorm, or train-stepping a frozen one).
    #[error("invalid state: {0}")]
    State(String),

    #[error("invalid configuration: {0}")]
    Validation(String),

    /// Batch too small for batch statistics.
    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("unsupported configuration: {0}")]
    Unsupported(String),

    #[error("bad file format: {0}")]
    Format(String),

    #[error("corrupt file at byte offset {offset}: {msg}")]
    Corrupt { offset: u64, msg: String },

    #[error("unknown weight file version {0}")]
    Version(u32),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
