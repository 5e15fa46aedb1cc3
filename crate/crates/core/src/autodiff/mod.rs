//! Dense-matrix reverse-mode differentiation.
//!
//! [`Tensor`] is a plain row-major `f64` matrix with forward kernels.
//! [`Graph`] records operations on tensors and replays them backwards.
//! [`ParamStore`] keeps named trainable weights for models built on top.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, grad_check_with_step, FD_STEP};
pub use graph::{Elementwise, Gradients, Graph, Var, LOG_EPS};
pub use params::{accumulate_grads, Bound, ParamEntry, ParamId, ParamStore};
pub use tensor::Tensor;
