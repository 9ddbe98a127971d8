//! Dense tensors and reverse-mode differentiation.

mod graph;
mod scalar;
mod tensor;

pub use graph::{gelu_scalar, Gradients, Graph, Var, RMS_EPS};
pub use scalar::{Precision, Scalar};
pub use tensor::{log_sum_exp, softmax_in_place, Tensor};
