use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {op} got {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("backward called on a non-scalar tensor of shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("graph already consumed by a previous backward pass")]
    GraphConsumed,
    #[error("matrix is not a rotation (orthogonality error {0:e})")]
    NotARotation(f64),
    #[error("point at zero range has no spherical coordinates")]
    ZeroRange,
    #[error("point with depth {0} is behind the camera")]
    BehindCamera(f64),
    #[error("all miscalibration noises must be positive (index {0})")]
    ZeroNoise(usize),
    #[error("metric inputs have different lengths ({0} vs {1}) or are empty")]
    LengthMismatch(usize, usize),
    #[error("point cloud has no spherical coordinates")]
    MissingSpherical,
    #[error("pyramid level {0} is empty after sampling")]
    EmptyLevel(usize),
    #[error("cannot sample {requested} points from a cloud of {available}")]
    TooFewPoints { requested: usize, available: usize },
    #[error("index mismatch: {0}")]
    IndexMismatch(String),
    #[error("inverse similarity is only defined for the all-to-all mixture")]
    ModeMismatch,
    #[error("point {0} has no pixel candidates")]
    NoCandidates(usize),
    #[error("quaternion head produced a near-zero vector (norm {0:e})")]
    DegenerateQuaternion(f64),
    #[error("non-finite loss at batch {batch} of epoch {epoch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("malformed file {path}: {reason}")]
    MalformedFile { path: PathBuf, reason: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("unknown parameter {0}")]
    UnknownParameter(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

pub(crate) fn malformed(path: impl Into<PathBuf>, reason: impl Into<String>) -> Error {
    Error::MalformedFile {
        path: path.into(),
        reason: reason.into(),
    }
}
