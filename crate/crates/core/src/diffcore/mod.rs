//! Reverse-mode automatic differentiation over dense `f64` matrices, the
//! Adam optimizer, and `NFBK` checkpoints.

mod adam;
mod fastmath;
pub mod checkpoint;
pub mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use graph::{Axis, Graph, NodeId, Unary};
pub(crate) use graph::sigmoid;
pub use params::{glorot_uniform, he_normal, normal_tensor, ParamId, ParamStore};
pub use tensor::{matmul, Shape, Tensor};

#[cfg(test)]
mod tests;
