//! Minimal dense-tensor layer library with exact backward passes.

mod checkpoint;
pub mod layers;
mod network;
mod tensor;

pub use checkpoint::Checkpoint;
pub use layers::*;
pub use network::{ForwardCache, HeadKind, Mode, Model, NetworkConfig};
pub use tensor::{Scalar, Tensor};
