//! Dense `f64` tensors with a tape for reverse-mode differentiation.

mod gradcheck;
mod ops;
mod primitive;
mod tape;
mod tensor;

pub use gradcheck::{finite_difference_grad, relative_error};
pub use primitive::{backward as primitive_backward, forward as apply_primitive, Primitive};
pub(crate) use primitive::sigmoid;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
