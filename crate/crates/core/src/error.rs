//! Error type shared across the workspace.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("numeric singularity: {0}")]
    NumericSingularity(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("lookup failed: {0}")]
    Lookup(String),
    #[error("merge undefined: {0}")]
    MergeUndefined(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("missing artifact: {0}")]
    MissingArtifact(String),
    #[error("unsupported format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
