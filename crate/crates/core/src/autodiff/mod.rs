//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{finite_difference_check, GradCheck, GradCheckReport};
pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use optim::{Adam, AdamConfig, AdamState};
pub use params::{Checkpoint, ParamId, ParamStore, CHECKPOINT_FORMAT};
pub use tensor::Tensor;
