//! Minimal reverse-mode automatic differentiation over dense f64 tensors.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{Tape, VarId};
pub use tensor::Tensor;
