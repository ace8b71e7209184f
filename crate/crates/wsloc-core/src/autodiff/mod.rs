//! Minimal dense-tensor engine with reverse-mode automatic differentiation.

mod backward;
mod gradcheck;
mod ops;
mod tensor;

pub use backward::backward;
pub use gradcheck::{grad_check, GradCheckReport, FD_STEP};
pub use ops::LOG_EPS;
pub use tensor::Tensor;
