//! Minimal tensor algebra with tape-based reverse-mode differentiation and Adam.

mod adam;
pub mod gradcheck;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use tape::{pool_bounds, Gradients, Tape, Var};
pub use tensor::Tensor;
