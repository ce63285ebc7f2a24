//! Reverse-mode automatic differentiation over dense 2-D `f64` tensors.

pub mod gradcheck;
mod params;
pub mod special;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, numeric_grad, relative_error, GradCheck};
pub use params::{ParamId, ParamSet};
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;
