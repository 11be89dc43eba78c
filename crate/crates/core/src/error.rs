//! Crate-wide error type.
//!
//! Numeric code never lets a NaN or infinity propagate silently: anything
//! non-finite produced by a public operation surfaces as [`Error::Numeric`]
//! naming the operation that produced it.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed an argument outside the operation's documented domain.
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Two pieces of configuration or state disagree (shapes, counts, hashes).
    #[error("configuration error: {0}")]
    Config(String),

    /// A computation produced a non-finite value.
    #[error("numeric failure in `{op}`: {detail}")]
    Numeric { op: String, detail: String },

    /// A serialized archive is malformed. The offset is the byte position at
    /// which the reader gave up.
    #[error("archive format error at byte {offset}: {detail}")]
    Format { offset: u64, detail: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn numeric(op: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Numeric {
            op: op.into(),
            detail: detail.into(),
        }
    }

    pub fn format(offset: u64, detail: impl Into<String>) -> Self {
        Error::Format {
            offset,
            detail: detail.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
