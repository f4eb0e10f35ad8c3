use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("temperature must be positive and finite, got {0}")]
    InvalidTemperature(f64),

    #[error("shape mismatch for {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: (usize, usize),
        found: (usize, usize),
    },

    #[error("{what} is not a probability vector: {reason}")]
    InvalidProbVector { what: &'static str, reason: String },

    #[error("weight matrix for sample {sample} is not symmetric and nonnegative (deviation {deviation:e})")]
    InvalidWeights { sample: usize, deviation: f64 },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("class-wise weights requested without {0}")]
    MissingClassStats(&'static str),

    #[error("class {0} has no samples")]
    EmptyClass(usize),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("forward cache does not match parameters: {0}")]
    StaleCache(String),

    #[error("training diverged at epoch {epoch}, step {step}: non-finite {what}")]
    Diverged {
        epoch: usize,
        step: usize,
        what: &'static str,
    },

    #[error("{}: bad magic bytes (expected {expected:?})", .path.display())]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("{}: truncated file ({detail})", .path.display())]
    Truncated { path: PathBuf, detail: String },

    #[error("{}: {detail}", .path.display())]
    Format { path: PathBuf, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}
