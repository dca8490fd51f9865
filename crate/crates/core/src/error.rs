use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("image decode failed at byte offset {offset}: {reason}")]
    Decode { offset: usize, reason: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("manifest record {record}: {reason}")]
    Manifest { record: String, reason: String },

    #[error("svm training did not converge after {iterations} iterations (max KKT violation {violation:e})")]
    Training { iterations: usize, violation: f64 },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
