//! Dense `f64` tensors with a recording tape for reverse-mode gradients and
//! forward-mode directional derivatives over the same primitive set.

mod fd;
mod graph;
mod kernels;
mod ops;
mod tensor;

pub use fd::{finite_difference_gradient, max_relative_error};
pub use graph::{Gradients, Graph, Var};
pub use ops::{Unary, MASKED_SCORE};
pub use tensor::Tensor;

pub(crate) use kernels::softmax_row;
