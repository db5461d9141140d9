use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = LfpError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum LfpError {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    Dimension {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("geometry error: {0}")]
    Geometry(String),

    #[error("configuration error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("value out of range: {0}")]
    Range(String),

    #[error("invalid trimap value {value} at ({x}, {y}); expected 0, 128 or 255")]
    TrimapCode { value: u16, x: u32, y: u32 },

    #[error("data error: {0}")]
    Data(String),

    #[error("no samples contributed to the distance statistics ({skipped} skipped)")]
    EmptyStatistics { skipped: usize },

    #[error("model resources exhausted for a {side}px tile")]
    ResourceExhausted { side: usize },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image codec error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },

    #[error("serialization error: {0}")]
    Serde(String),
}

impl LfpError {
    pub(crate) fn dim(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        LfpError::Dimension {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LfpError::Io {
            path: path.into(),
            source,
        }
    }
}

impl From<serde_json::Error> for LfpError {
    fn from(e: serde_json::Error) -> Self {
        LfpError::Serde(e.to_string())
    }
}
