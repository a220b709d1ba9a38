use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the geometry, loss, optimizer, evaluation and I/O layers.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// The rotation angle of a transform is too close to pi for a unique logarithm.
    #[error("rotation angle {angle} rad is within {eps} of pi; logarithm is not unique")]
    NearSingular { angle: f64, eps: f64 },

    #[error("point is behind the camera (z = {z})")]
    BehindCamera { z: f64 },

    #[error("shape mismatch: expected {expected:?}, got {actual:?} ({what})")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    },

    /// Mask mass is too small for the ego-motion to be defined.
    #[error("empty support: mask mass {mass} is not above {threshold}")]
    EmptySupport { mass: f64, threshold: f64 },

    #[error("no valid pixels for {0}")]
    NoValidPixels(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("missing input: {0}")]
    MissingInput(&'static str),

    #[error("parse error in {context} at byte {offset}: {message}")]
    Parse {
        context: String,
        offset: usize,
        message: String,
    },

    #[error("value out of range for {format}: {value}")]
    OutOfRange { format: &'static str, value: f64 },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error on {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(
        what: &'static str,
        expected: (usize, usize),
        actual: (usize, usize),
    ) -> Self {
        Error::ShapeMismatch {
            what,
            expected,
            actual,
        }
    }
}
