//! Dense `f64` tensors with tape-based reverse-mode differentiation.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{concat_rows, Gradients, Graph, Var};
pub use tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{0}")]
    Usage(String),
    #[error("graph already differentiated; clear it before recording another step")]
    GraphConsumed,
}
