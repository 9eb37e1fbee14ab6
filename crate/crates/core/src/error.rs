//! Error types shared across the toolkit.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A file did not parse as the expected format.
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },

    /// One or more invariant violations; every violation is listed.
    #[error("validation failed:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<String>),

    /// An argument fell outside of its documented domain.
    #[error("invalid argument: {0}")]
    Argument(String),

    /// Array dimensions did not match what an operation requires.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric value fell outside of its documented range.
    #[error("value out of range: {0}")]
    Range(String),

    /// Strict mask encoding hit a color that is not in the class map.
    #[error("unknown color ({r},{g},{b}) at pixel ({row},{col}) not present in class map")]
    UnknownColor {
        row: usize,
        col: usize,
        r: u8,
        g: u8,
        b: u8,
    },

    /// A class index at or above the class count was used.
    #[error("class index {index} out of range for {classes} classes")]
    Index { index: usize, classes: usize },

    /// No usable (image, mask) pairs were found.
    #[error("empty dataset: {0}")]
    EmptyDataset(String),

    /// Training or inference produced a non-finite value.
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    /// Every pixel of a loss target was ignored.
    #[error("all target pixels carry the ignore index; loss is undefined")]
    AllIgnored,

    /// Metrics were requested for a confusion matrix with no counts.
    #[error("confusion matrix is empty; metrics are undefined")]
    EmptyMatrix,

    /// A model configuration cannot be realized as a network.
    #[error("config error: {0}")]
    Config(String),

    /// Training was requested with zero epochs.
    #[error("no training performed: epochs = 0")]
    NoTraining,

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn parse(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Parse {
            path: path.into(),
            message: message.into(),
        }
    }
}
