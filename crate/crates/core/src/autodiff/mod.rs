//! Reverse-mode automatic differentiation over dense tensors.
//!
//! The engine records a Wengert tape of operations during the forward pass and
//! replays it in reverse to accumulate vector-Jacobian products. It is generic
//! over the element type: training runs in `f32`, while the gradient-check
//! suites instantiate the identical graph code in `f64`, where
//! finite-difference tolerances are actually reachable.
//!
//! The one non-standard node is [`Tape::grl`], the gradient-reversal layer:
//! identity in the forward pass, multiplies the flowing gradient by
//! `-strength` in the backward pass.

mod kernels;
mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor;
