pub mod autodiff;
pub mod consistency;
pub mod data;
pub mod dp;
pub mod federation;
pub mod models;
pub mod release;
pub mod tensor;
pub mod valuation;

pub use tensor::{Tensor, TensorError};
