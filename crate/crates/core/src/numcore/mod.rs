//! Dense tensors, reverse-mode differentiation and the neural layers the
//! model is built from.

mod dump;
pub mod gradcheck;
pub mod nn;
mod scalar;
mod tape;
mod tensor;

pub use dump::{read_dump, write_dump};
pub use scalar::Scalar;
pub use tape::{gelu_value, Gradients, Param, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
