//! Reverse-mode differentiation for small feed-forward networks.
//!
//! [`Graph`] records tensor ops; [`grads`] builds the per-sample quantities
//! the trainer and the valuation code need on top of it, including the
//! nested input-gradient of the squared parameter-gradient norm.

mod finite_diff;
mod graph;
pub mod grads;
pub(crate) mod kernels;
mod params;

pub use finite_diff::{finite_diff, max_relative_error};
pub use graph::{AutodiffError, Graph, Result, Var};
pub use grads::{
    grad_input, grad_input_of_sq_param_grad_norm, grad_params, loss_and_param_grad, per_sample_loss,
    NestedMethod, Objective,
};
pub use params::{ParamBlock, ParamLayout, ParamVector};
