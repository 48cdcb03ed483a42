//! Dense f32 arrays, the differentiable op set, reverse-mode gradients,
//! ADAM, gradient checking, and the checkpoint container.

pub mod adam;
pub mod array;
pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;

pub use adam::{adam_step, AdamState, DEFAULT_BETA1, DEFAULT_BETA2, DEFAULT_EPS};
pub use array::{axpby, scale, Array};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use graph::{Gradients, Graph, NodeId};
pub use params::ParamStore;

#[cfg(test)]
mod tests;
