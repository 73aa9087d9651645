//! Dense tensors, a reverse-mode tape and the Adam optimizer.

mod adam;
pub mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use params::{glorot_init, uniform_init, ParamId, ParamStore, Parameter};
pub use tape::{Gradients, Tape, Var, MASK_LOGIT};
pub use tensor::Tensor;
