//! Dense tensors, a reverse-mode tape, and a finite-difference checker.

mod dense;
pub mod dump;
pub mod gradcheck;
mod kernels;
mod tape;

pub use dense::Tensor;
pub use gradcheck::grad_check;
pub use tape::{Tape, Var};
