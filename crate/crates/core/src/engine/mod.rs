//! Dense `f64` arrays with reverse-mode gradients.

mod check;
mod graph;
mod kernels;
mod tensor;

pub use check::{finite_diff_check, relative_error, GradCheck};
pub use graph::{Graph, Var, ATANH_LIMIT};
pub use tensor::Tensor;
