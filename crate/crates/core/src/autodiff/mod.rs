//! Reverse-mode autodiff over 4-D tensors: the tape, the tensor type, and
//! parameter management. Generic over the scalar so gradient checks can run
//! in f64 while production training uses f32.

mod params;
mod tape;
mod tensor;

pub use params::{adam_step, he_init, Parameter, Params};
pub use tape::{BnState, Mode, Tape, Var};
pub use tensor::{Dims, Scalar, Tensor4};
