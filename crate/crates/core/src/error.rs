use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("grid {grid} does not fit a {height}x{width} feature map")]
    InvalidGrid {
        grid: usize,
        height: usize,
        width: usize,
    },

    #[error("mask has no pixel at or above threshold {threshold}")]
    EmptyMask { threshold: f64 },

    #[error("covariance is not positive semidefinite even after shrinkage")]
    DegenerateCovariance,

    #[error("no {kind} placement found within {budget} draws")]
    SamplingExhausted { kind: &'static str, budget: usize },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("image {path}: {msg}")]
    Image { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }
}
