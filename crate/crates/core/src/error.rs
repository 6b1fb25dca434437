use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("unknown donor id `{0}`")]
    MissingDonor(String),

    #[error("corrupt checkpoint header: {0}")]
    CorruptHeader(String),

    #[error("truncated checkpoint: {0}")]
    Truncated(String),

    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),

    #[error("malformed checkpoint contents: {0}")]
    MalformedCheckpoint(String),

    #[error("degenerate landmarks: {0}")]
    DegenerateLandmarks(String),

    #[error("degenerate transform (determinant {0:e})")]
    DegenerateTransform(f64),

    #[error("degenerate mask: {0}")]
    DegenerateMask(String),

    #[error("invalid config: {0}")]
    InvalidConfig(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parameter out of range: {0}")]
    InvalidParameter(String),

    #[error("verifier failed: {0}")]
    Verifier(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl ToString) -> Self {
        Error::Format {
            path: path.into(),
            message: message.to_string(),
        }
    }
}
