//! Reverse-mode differentiation over a closed set of batched primitives.

mod adam;
mod array;
pub mod checkpoint;
pub mod gradcheck;
mod params;
mod tape;

pub use adam::{adam_step, AdamConfig};
pub use array::DenseArray;
pub use params::{Gradients, ParamEntry, ParamId, ParamStore};
pub use tape::{sigmoid, squashed_gaussian_log_prob, tanh_log_det, Activation, ConvGeom, Tape, Var};

pub(crate) use tape::{jac_terms, HALF_LN_2PI};

pub(crate) const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("shape mismatch in {op}: {shapes:?}")]
    Shape { op: &'static str, shapes: Vec<Vec<usize>> },
    #[error("shape {shape:?} does not match storage of length {len}")]
    Storage { shape: Vec<usize>, len: usize },
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
    #[error("unknown parameter {0:?}")]
    UnknownParam(String),
    #[error("parameter store mismatch: {0}")]
    StoreMismatch(String),
    #[error("backward requires a one-element output, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("{0} needs at least one row")]
    EmptyBatch(&'static str),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
