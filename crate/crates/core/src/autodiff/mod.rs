//! Dense `f64` tensors and a reverse-mode tape.

mod tape;
mod tensor;

pub use tape::{gelu, Gradients, Tape, Value, LAYER_NORM_EPS};
pub use tensor::Tensor;
pub(crate) use tensor::gemm;
