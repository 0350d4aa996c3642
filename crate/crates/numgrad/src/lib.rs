//! Dense `f64` tensors, a reverse-mode tape, an Adam optimizer, a
//! finite-difference gradient checker and a binary checkpoint format.

pub mod checkpoint;
mod error;
pub mod gradcheck;
pub mod optim;
pub mod param;
pub mod tape;
pub mod tensor;

pub use error::{NumError, Result};
pub use gradcheck::{gradient_check, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use param::{ParamSet, Parameter};
pub use tape::{Gradients, Tape, Var};
pub use tensor::{diag_gaussian_kl, Tensor};
