use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Spatiotemporal axis of a grid, used to name the offending axis in shape errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Time,
    Height,
    Width,
}

impl std::fmt::Display for Axis {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Axis::Time => "time",
            Axis::Height => "height",
            Axis::Width => "width",
        })
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{axis} extent {extent} is not divisible by factor {factor}")]
    NotDivisible {
        axis: Axis,
        extent: usize,
        factor: usize,
    },

    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch { left: Vec<usize>, right: Vec<usize> },

    #[error("RV coefficient undefined: Gram matrix of argument {0} is zero")]
    UndefinedCoefficient(usize),

    #[error("invalid argument: {0}")]
    Invalid(String),

    #[error("step {step} out of range [0, {limit}]")]
    StepOutOfRange { step: usize, limit: usize },

    #[error("resolution level {0} is not present")]
    MissingLevel(String),

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error(transparent)]
    Bundle(#[from] BundleError),
}

/// Failures when reading or writing a tensor bundle.
#[derive(Debug, Error)]
pub enum BundleError {
    #[error("missing bundle file {0}")]
    MissingFile(PathBuf),

    #[error("tensor `{name}` needs bytes {offset}..{end} but the blob holds {blob_len}")]
    SizeMismatch {
        name: String,
        offset: u64,
        end: u64,
        blob_len: u64,
    },

    #[error("tensor `{name}` has unknown dtype `{dtype}`")]
    UnknownDtype { name: String, dtype: String },

    #[error("tensor `{0}` not found in bundle")]
    NotFound(String),

    #[error("malformed manifest: {0}")]
    Manifest(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Invalid(msg.into())
}
