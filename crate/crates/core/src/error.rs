use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: lhs {lhs:?} vs rhs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadShape { shape: Vec<usize>, len: usize },

    #[error("matrix is singular: pivot {pivot} has magnitude {value:e}")]
    Singular { pivot: usize, value: f64 },

    #[error("backward root must be scalar, got shape {shape:?}")]
    NonScalarRoot { shape: Vec<usize> },

    #[error("{layer}: coordinate {coord} value {value} outside ({lo}, {hi})")]
    Domain {
        layer: &'static str,
        coord: usize,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("{layer}: invalid parameter: {reason}")]
    InvalidParameter { layer: &'static str, reason: String },

    #[error("newton inversion did not converge after {iterations} iterations (residual {residual:e})")]
    NewtonDiverged { iterations: usize, residual: f64 },

    #[error("inverse failed at layer {layer}: {source}")]
    InverseFailed {
        layer: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("MaP requested with no preprocess layers")]
    MapWithoutPreprocess,

    #[error("model error: {0}")]
    Model(String),

    #[error("non-finite {what} at step {step} (last good checkpoint: {last_checkpoint:?})")]
    NonFinite {
        what: &'static str,
        step: usize,
        last_checkpoint: Option<PathBuf>,
    },

    #[error("importance weights underflowed to zero; use a proposal closer to the model")]
    WeightUnderflow,

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
