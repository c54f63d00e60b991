use thiserror::Error;

/// Error type shared across the crate.
///
/// Variants are grouped by pipeline stage rather than by leaf cause: callers
/// mostly need to distinguish "your data is bad" from "your config is bad"
/// from "I/O failed", and the message carries the specifics.
#[derive(Debug, Error)]
pub enum Error {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    /// Raw dialogue data that cannot be interpreted at all (missing files,
    /// malformed structure). Recoverable oddities in individual turns are
    /// skipped and counted instead.
    #[error("corpus: {0}")]
    Corpus(String),

    /// Invalid configuration: bad dimensions, unknown variant names,
    /// out-of-range hyperparameters.
    #[error("config: {0}")]
    Config(String),

    /// A checkpoint file that cannot be read back (wrong magic, truncated,
    /// or parameter shapes that do not match the stored config).
    #[error("checkpoint: {0}")]
    Checkpoint(String),

    /// Request that is structurally valid but cannot be satisfied, e.g.
    /// sampling from an empty split or decoding with an empty vocabulary.
    #[error("invalid input: {0}")]
    InvalidInput(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn corpus(msg: impl Into<String>) -> Self {
        Error::Corpus(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn checkpoint(msg: impl Into<String>) -> Self {
        Error::Checkpoint(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }
}
