//! Minimal dense-network engine: flat parameter vectors, a reverse-mode tape
//! over a fixed set of primitives, and Adam.

mod adam;
mod linalg;
mod params;
mod tape;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use params::{mlp_forward, Activation, LayerSlot, LayerSpec, Manifest, MlpScratch, ParamVec};
pub use tape::{grad, value_and_grad, Gradients, Tape, Tensor, Var};

