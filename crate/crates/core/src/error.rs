use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// A tensor extent disagrees with what an operation requires.
    #[error("{op}: dimension mismatch on axis {axis}: expected {expected}, found {found}")]
    Dimension {
        op: &'static str,
        axis: String,
        expected: usize,
        found: usize,
    },

    #[error("{op}: axis {axis} out of range for rank {rank}")]
    AxisOutOfRange {
        op: &'static str,
        axis: usize,
        rank: usize,
    },

    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("parse error in {what} at byte {offset}: {message}")]
    Parse {
        what: &'static str,
        offset: u64,
        message: String,
    },

    #[error("degenerate brightness: enhanced image has zero mean intensity")]
    DegenerateBrightness,

    #[error("checkpoint does not match model: missing {missing:?}, unexpected {unexpected:?}")]
    CheckpointMismatch {
        missing: Vec<String>,
        unexpected: Vec<String>,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dim(op: &'static str, axis: impl ToString, expected: usize, found: usize) -> Self {
        Error::Dimension {
            op,
            axis: axis.to_string(),
            expected,
            found,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
