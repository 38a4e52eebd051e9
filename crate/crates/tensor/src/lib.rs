//! Dense `f64` tensors with reverse-mode automatic differentiation.
//!
//! Every backward rule is written in terms of tensor operations, so running
//! [`grad`] with `create_graph = true` yields gradients that can themselves
//! be differentiated (needed for gradient penalties).

mod autograd;
mod ops;
pub mod optim;
pub mod shape;
mod tensor;

pub use autograd::{backward, grad, Gradients};
pub use tensor::{is_grad_enabled, no_grad, set_grad_enabled, GradModeGuard, Tensor};
