//! fp32 tensor substrate: kernels, tape autograd, Adam and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod graph;
pub mod kernels;
pub mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use graph::{Graph, RopeTable, Var};
pub use tensor::Tensor;
