//! Dense `f64` tensors with a reverse-mode tape and an Adam optimiser.

mod adam;
pub(crate) mod linalg;
mod tape;
mod tensor;

pub use adam::Adam;
pub use linalg::spectral_norm;
pub use tape::{gelu, gelu_grad, ordered::F64Bits, Gradients, NodeId, OpKind, Tape};
pub use tensor::Tensor;
