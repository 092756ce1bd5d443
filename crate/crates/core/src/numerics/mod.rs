//! Dense tensors, primitive operations with pullbacks, and gradient checking.

pub mod grad;
pub mod linear;
pub mod ops;
mod tensor;

pub use grad::{grad_check, grad_check_block, grad_check_params, GradCheckOptions, GradCheckReport};
pub use linear::{LinearProjection, NormParams, Parameters};
pub use ops::DualValue;
pub use tensor::Tensor;
