//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every operation executed during a forward pass; calling
//! [`Tape::backward`] on a scalar loss replays the record in reverse and
//! accumulates gradients into every reachable node. Parameters live outside
//! the tape as plain [`Tensor`]s collected in a [`Params`] registry; each
//! training step binds them onto a fresh tape and harvests gradients back out
//! after the backward sweep.
//!
//! Every forward operation checks its outputs for NaN/Inf and fails hard on
//! non-finite values, so a diverging run surfaces at the op that produced it.

mod error;
mod math;
mod sgd;
mod tape;
mod tensor;

#[cfg(test)]
mod tests;

pub use error::AdError;
pub use math::{col2im_acc, conv_out_dim, im2col, matmul, matmul_acc};
pub use sgd::OptimizerState;
pub use tape::{GrlMode, NodeId, Tape};
pub use tensor::{uniform_fan_in, ParamId, Params, Tensor};

/// Probability clamp applied before every logarithm in cross-entropy losses.
pub const PROB_EPS: f64 = 1e-7;
