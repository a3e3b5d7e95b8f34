use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Model file could not be decoded; the message names the offending layer.
    #[error("model load failed: {0}")]
    Load(String),

    #[error("image: {0}")]
    Image(String),

    #[error("unknown attack `{0}`")]
    UnknownAttack(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
