//! Minimal CPU neural-network engine: per-sample tensors, a handful of layer
//! types with hand-written backward passes, and Adam.

mod adam;
mod layer;
mod network;
mod real;
mod tensor;

pub use adam::{Adam, AdamConfig, Moments};
pub use layer::{Cache, Layer, LayerKind, Param};
pub use network::{Grads, Network, ParamIndex, Trace};
pub use real::Real;
pub use tensor::Tensor;
