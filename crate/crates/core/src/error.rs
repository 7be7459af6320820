use std::path::PathBuf;

/// Error type shared by every module in this crate.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An entry with the same identity already exists.
    #[error("conflict: {0}")]
    Conflict(String),

    /// Operation not valid in the current lifecycle state (e.g. mutating a
    /// frozen cache, or freezing twice).
    #[error("invalid state: {0}")]
    State(String),

    #[error("not found: {0}")]
    NotFound(String),

    /// Malformed content in an external file; `location` names the line or
    /// byte offset.
    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    /// Structurally valid input whose contents violate a format contract
    /// (count mismatches, inconsistent dimensions, ...).
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid_argument(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}
