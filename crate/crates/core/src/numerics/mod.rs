//! Dense `f64` tensors and a reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{Tape, Var};
pub use tensor::Tensor;
