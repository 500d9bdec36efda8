use thiserror::Error;

/// Crate-wide error type.
///
/// The variants map onto the CLI exit codes: configuration errors exit 2,
/// training divergence exits 3, and I/O or file-format problems exit 4.
/// Contract violations indicate a caller bug (shape mismatches, out-of-range
/// slot indices) and also exit 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("training diverged at epoch {epoch}: {details}")]
    Divergence { epoch: usize, details: String },

    #[error("zero channel matrix has no direction")]
    ZeroChannel,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("malformed file {path}: {details}")]
    Format { path: String, details: String },
}

impl Error {
    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
