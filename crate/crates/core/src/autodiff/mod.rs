//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor)
//! values, plus a finite-difference checker.

mod gradcheck;
mod tape;

pub use gradcheck::{grad_check, rel_err, GradCheckReport, REL_ERR_FLOOR};
pub use tape::{Gradients, Tape, Var};
