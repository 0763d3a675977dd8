use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupted bank: {0}")]
    CorruptedBank(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("undefined correlation: {0}")]
    UndefinedCorrelation(String),

    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },

    #[error("payload `{name}` is truncated: expected {expected} bytes, found {found}")]
    Truncated {
        name: String,
        expected: u64,
        found: u64,
    },

    #[error("checksum mismatch for payload `{0}`")]
    Checksum(String),

    #[error("malformed checkpoint: {0}")]
    Malformed(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    /// True for every error that signals a damaged or incompatible checkpoint.
    pub fn is_corrupted_checkpoint(&self) -> bool {
        matches!(
            self,
            Error::VersionMismatch { .. }
                | Error::Truncated { .. }
                | Error::Checksum(_)
                | Error::Malformed(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
