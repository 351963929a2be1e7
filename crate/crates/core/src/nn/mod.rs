//! Minimal dense-tensor reverse-mode autodiff for 3D convolutional networks.
//!
//! A [`Graph`] is a tape: every op appends a node holding its output, and
//! [`Graph::backward`] walks the tape in reverse accumulating gradients into
//! each node's grad slot. Parameters enter as leaves and their gradients are
//! read back after the backward pass.

mod adam;
mod checkpoint;
mod graph;
mod kernels;
mod tensor;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, NamedArray, OptimizerMeta};
pub use graph::{Graph, Var};
pub use kernels::{conv3d_backward, conv3d_forward, maxpool3d_forward, upsample3d_forward};
pub use tensor::{Shape5, Tensor};
