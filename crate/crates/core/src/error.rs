use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid header in {path}: {reason}")]
    Header { path: PathBuf, reason: String },

    #[error("payload mismatch: expected {expected}, found {found}")]
    PayloadMismatch { expected: String, found: String },

    #[error("orientation matrix is not invertible or not axis-aligned: {0}")]
    Orientation(String),

    #[error("unsupported format: {0}")]
    Unsupported(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("label value {value} at voxel {index} exceeds the maximum class 32")]
    LabelOutOfRange { value: u16, index: usize },

    #[error("centroid table: {0}")]
    Centroids(String),

    #[error("penalty matrix: {0}")]
    Penalty(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("seeds: {0}")]
    Seeds(String),

    #[error("phantom: {0}")]
    Phantom(String),

    #[error("csv error on {path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// True for failures caused by the file system rather than by the content of the inputs.
    pub fn is_io(&self) -> bool {
        matches!(self, Error::Io { .. })
    }
}
