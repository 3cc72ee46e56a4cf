//! Dense `f64` linear algebra and a reverse-mode tape.

mod matrix;
mod tape;

pub use matrix::{affine, dot, relu, Matrix};
pub use tape::{Gradients, NodeId, Tape};
