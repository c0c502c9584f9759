//! Dense tensors with a reverse-mode differentiation tape.

mod element;
pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use element::{DType, Element};
pub use gradcheck::{grad_check, grad_check_fn, OpKind};
pub use kernels::SparseRows;
pub use tape::{Gradients, Padding, Tape, Targets, Var};
pub use tensor::{Tensor, MAX_RANK};
