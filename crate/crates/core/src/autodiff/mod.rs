//! Dense `f64` tensors, a reverse-mode autodiff tape, Adam and weight init.

mod graph;
mod init;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, NodeId, OpKind};
pub use init::{truncated_normal, truncated_normal_with, DEFAULT_TRUNCATION};
pub use optim::{adam_step, AdamConfig, LrSchedule, ParamEntry, ParameterStore};
pub use tensor::Tensor;
