//! Dense-tensor numerics with tape-based reverse-mode gradients.
//!
//! The op set is exactly what the rest of the crate needs: matmul, direct
//! convolution, relu, pooling, elementwise arithmetic, reductions, and the
//! pairwise squared-distance kernel used by the discrepancy losses. All
//! arithmetic is f64; reductions accumulate in f64 regardless of how leaf
//! values were produced.

mod tape;
mod tensor;


pub mod gradcheck;

pub use tape::{Tape, TensorId};
pub use tensor::DiffTensor;

#[derive(Debug, thiserror::Error)]
pub enum DiffError {
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch { op: &'static str, lhs: Vec<usize>, rhs: Vec<usize> },
    #[error("{0}")]
    Precondition(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}
