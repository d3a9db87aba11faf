use thiserror::Error;

/// Unified error type for the laboratory.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("invalid key: {0}")]
    InvalidKey(String),

    #[error("sequence too short: need at least {min} tokens, got {got}")]
    SequenceTooShort { min: usize, got: usize },

    #[error("token id {token} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { token: u32, vocab_size: usize },

    #[error("training failed: {0}")]
    Training(String),

    #[error("malformed file: {0}")]
    MalformedFile(String),

    #[error("schema mismatch: {0}")]
    SchemaMismatch(String),

    #[error("attack aborted: {0}")]
    AttackAborted(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// True for errors caused by bad configuration or arguments rather than
    /// runtime failures; the CLI maps these to exit code 2.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::InvalidParameter(_) | Error::InvalidKey(_) | Error::SchemaMismatch(_)
        )
    }
}
