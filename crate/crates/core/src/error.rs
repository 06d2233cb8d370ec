use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),

    #[error("malformed NIfTI header in {path}: {reason}")]
    MalformedHeader { path: PathBuf, reason: String },

    #[error("expected a 3D volume in {path}, found {ndim} dimensions {dims:?}")]
    NotThreeDimensional {
        path: PathBuf,
        ndim: usize,
        dims: Vec<usize>,
    },

    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("patch size {patch} exceeds volume extent {extent}")]
    PatchTooLarge { patch: usize, extent: usize },

    #[error("side {side} has {count} centroid annotations, at least 2 are required")]
    TooFewAnnotations { side: String, count: usize },

    #[error("stratum {stratum} has {count} subjects, too few to populate every split")]
    StratumTooSmall { stratum: String, count: usize },

    #[error("ensemble inputs mix (subject, side) groups: {0}")]
    MixedEnsembleGroup(String),

    #[error("average precision is undefined without positive labels")]
    NoPositives,

    #[error("split {0} is empty")]
    EmptySplit(String),

    #[error("manifest has no fold assignments")]
    MissingFolds,

    #[error("input shape mismatch: expected {expected}, got {got}")]
    ShapeMismatch { expected: String, got: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {value}")]
    NonFiniteLoss { epoch: usize, batch: usize, value: f64 },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("parse error in {context}: {reason}")]
    Parse { context: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn parse(context: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Parse {
            context: context.into(),
            reason: reason.into(),
        }
    }
}
