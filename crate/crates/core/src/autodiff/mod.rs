//! Minimal dense tensors with reverse-mode differentiation, AdamW, and weight
//! checkpoints.

pub mod checkpoint;
mod kernels;
mod optim;
mod params;
mod tape;
mod tensor;

pub use kernels::ConvGeom;
pub use optim::{AdamW, AdamWConfig};
pub use params::{Param, ParamGrads, ParamId, ParamStore};
pub use tape::{Gradients, Tape};
pub use tensor::Tensor;

pub(crate) use kernels::dot;
pub(crate) use tape::{sigmoid, softmax_in_place};
