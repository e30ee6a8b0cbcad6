//! Reverse-mode autodiff over dense `f64` tensors, Adam, finite-difference
//! gradient checks and the parameter container format.

mod adam;
mod container;
mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, Moments};
pub use container::{Container, TensorEntry};
pub use gradcheck::{grad_check, grad_check_store, relative_error, DEFAULT_STEP};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
