//! Minimal dense f32 tensor kernel with tape-based reverse-mode automatic
//! differentiation and the Adam optimizer.
//!
//! Everything is single-threaded per [`Graph`]; graphs and tensors are
//! `Send` so callers may build independent graphs on different threads.

pub mod graph;
pub mod kernels;
pub mod optim;
pub mod params;
pub mod tensor;

pub use graph::{Graph, OpKind, Var};
pub use optim::{adam_update, clip_grad_norm, AdamConfig, Moments, OptimState};
pub use params::{ParamId, ParamStore};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("index {index} out of range for length {len}")]
    Index { index: usize, len: usize },
    #[error("no supervised positions: the loss mask selects nothing")]
    NoSupervisedPositions,
    #[error("backward needs a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter {0:?} already registered")]
    DuplicateParam(String),
}

impl TensorError {
    pub(crate) fn shape(op: &'static str, detail: String) -> Self {
        TensorError::Shape { op, detail }
    }
}

pub type Result<T> = std::result::Result<T, TensorError>;
