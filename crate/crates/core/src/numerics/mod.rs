//! Dense arrays, a reverse-mode tape, and a finite-difference checker.

mod array;
mod gradcheck;
mod tape;

pub use array::Array;
pub use gradcheck::{check_gradients, GradCheck};
pub use tape::{BatchStats, Gradients, Tape, Var};
