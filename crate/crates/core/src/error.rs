use std::path::PathBuf;

use thiserror::Error;

/// Errors raised across the toolkit.
#[derive(Error, Debug)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual} ({context})")]
    DimensionMismatch {
        expected: usize,
        actual: usize,
        context: &'static str,
    },

    #[error("objective returned a non-finite value ({0})")]
    NonFiniteObjective(f64),

    #[error("direction vector has zero norm")]
    ZeroDirection,

    #[error("rotation sampling rejected {0} consecutive draws")]
    RotationRejected(usize),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("{path}: bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    IdxMagic {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("{path}: truncated IDX payload ({actual} bytes, need {needed})")]
    IdxTruncated {
        path: PathBuf,
        actual: usize,
        needed: usize,
    },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },

    #[error("invalid label {0}")]
    InvalidLabel(usize),

    #[error("format error: {0}")]
    Format(String),

    #[error("I/O error on {path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Toml(#[from] toml::de::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

pub(crate) fn check_dim(expected: usize, actual: usize, context: &'static str) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            expected,
            actual,
            context,
        })
    }
}
