use thiserror::Error;

#[derive(Debug, Error)]
pub enum DehazeError {
    /// A caller violated an operation's contract (shape/range preconditions).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: String, got: String },

    #[error("index {index} out of range for codebook of size {size}")]
    CodeIndex { index: usize, size: usize },

    #[error("non-finite value encountered in {0}")]
    NonFinite(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DehazeError>;

impl DehazeError {
    pub fn contract(msg: impl Into<String>) -> Self {
        DehazeError::Contract(msg.into())
    }
}
