//! Minimal dense-tensor engine: row-major `f32` tensors, a recording tape
//! for reverse-mode differentiation, and the Adam optimizer.
//!
//! Every model in the benchmark is expressed with the operations recorded
//! by [`Tape`]. Reductions accumulate in `f64`; values are `f32`.

mod adam;
mod error;
mod params;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use error::{Result, TensorError};
pub use params::{Gradients, ParamId, ParamStore};
pub use tape::{masked_softmax, NodeId, Tape};
pub use tensor::{matmul, Tensor};
