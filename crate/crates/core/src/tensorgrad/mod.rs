//! Dense `f64` tensors, a define-by-run reverse-mode tape, Adam, and
//! finite-difference gradient checking.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{gradient_check, gradient_check_at, gradient_check_many, gradient_check_smooth, GradCheckReport};
pub use tape::{Gradients, Tape, Var, PROB_FLOOR};
pub use tensor::{Tensor, TensorError};
