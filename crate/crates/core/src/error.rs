use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Failures from a remote chat endpoint, after retries were exhausted.
#[derive(Debug, Clone, Error, PartialEq)]
#[error("transport failure after {attempts} attempt(s){}: {message}", status.map(|s| format!(" (last status {s})")).unwrap_or_default())]
pub struct TransportError {
    pub attempts: u32,
    pub status: Option<u16>,
    /// Server-suggested delay from a `Retry-After` header, in seconds.
    pub retry_after: Option<u64>,
    pub message: String,
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("invalid configuration:\n  - {}", .0.join("\n  - "))]
    Config(Vec<String>),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(transparent)]
    Transport(#[from] TransportError),

    #[error("integrity failure at {location}: {message}")]
    Integrity { location: String, message: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(vec![msg.into()])
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn integrity(location: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Integrity {
            location: location.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
