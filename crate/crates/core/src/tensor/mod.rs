//! Dense tensors, reverse-mode differentiation and gradient checking.

mod dense;
mod gradcheck;
pub(crate) mod kernels;
mod scalar;
mod tape;

pub use dense::Tensor;
pub use gradcheck::{gradient_check, relative_error, GradCheckOptions, GradCheckReport, InputCheck};
pub use scalar::Scalar;
pub use tape::{Tape, Var};
