//! Dense matrices, a reverse-mode tape and a finite-difference oracle.

mod gradcheck;
mod matrix;
mod tape;

pub use gradcheck::{finite_diff_grad, relative_error};
pub use matrix::{outer, softmax_row, Matrix};
pub use tape::{Node, Tape, Var};
