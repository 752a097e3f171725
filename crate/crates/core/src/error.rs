use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid input value; `field` is a dotted path where one is known.
    #[error("invalid {field}: {reason}")]
    Validation { field: String, reason: String },

    #[error("degenerate projection at view {view}, marker {marker}: homogeneous weight {weight:e}")]
    DegenerateProjection { view: usize, marker: usize, weight: f64 },

    #[error("degenerate projection: homogeneous weight {0:e}")]
    DegeneratePoint(f64),

    #[error("degenerate view pair ({0}, {1}): source positions coincide")]
    DegeneratePair(usize, usize),

    #[error("no epipolar samples survived for view pair ({0}, {1})")]
    EmptyPair(usize, usize),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    ShapeMismatch { expected: String, actual: String },

    #[error("objective returned NaN at {point:?}")]
    NonFiniteObjective { point: Vec<f64> },

    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn validation(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Validation {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by bad user configuration or input data,
    /// as opposed to failures during a computation.
    pub fn is_config_error(&self) -> bool {
        matches!(
            self,
            Error::Validation { .. } | Error::Format { .. } | Error::Json(_)
        )
    }
}
