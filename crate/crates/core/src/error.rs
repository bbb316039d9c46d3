use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("truncated or malformed image data: {0}")]
    Malformed(String),
    #[error("value {value} at index {index} is outside [0, 255]; pass clamp to clip it")]
    OutOfRange { index: usize, value: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("unsupported model format version {0}")]
    UnsupportedVersion(u32),
    #[error("model checksum mismatch (file truncated or corrupted)")]
    Checksum,
    #[error("invalid model file: {0}")]
    ModelFormat(String),
    #[error("head mismatch: {0}")]
    HeadMismatch(String),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
