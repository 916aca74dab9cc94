use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid grid: {0}")]
    InvalidGrid(String),

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("array length {actual} does not match grid size {expected}")]
    LengthMismatch { expected: usize, actual: usize },

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("value {value} at index {index} cannot be stored as f32")]
    OutOfRange { index: usize, value: f64 },

    #[error("malformed header {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("payload {path} holds {actual} bytes, header implies {expected}")]
    PayloadSize {
        path: PathBuf,
        expected: usize,
        actual: usize,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid parameter maps: {0}")]
    InvalidMaps(String),

    #[error("invalid acquisition: {0}")]
    InvalidAcquisition(String),

    #[error("relaxation time {value} ms at voxel {index} is below the {floor} ms floor")]
    RelaxationFloor { index: usize, value: f64, floor: f64 },

    #[error("invalid degradation spec: {0}")]
    InvalidDegrade(String),

    #[error("fit error: {0}")]
    Fit(String),

    #[error("guide {index} has zero variance over the mask")]
    ZeroVarianceGuide { index: usize },

    #[error("invalid problem: {0}")]
    InvalidProblem(String),

    #[error("invalid phantom: {0}")]
    InvalidPhantom(String),

    #[error("reference has zero Laplacian-of-Gaussian energy over the mask")]
    ZeroReferenceEnergy,

    #[error("metric error: {0}")]
    Metric(String),

    #[error("config error in `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("report schema error: {0}")]
    Schema(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// True for errors caused by user configuration rather than runtime state.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}
