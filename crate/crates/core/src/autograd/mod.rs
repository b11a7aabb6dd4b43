//! Reverse-mode automatic differentiation over dense tensors.

mod check;
mod graph;
mod tensor;

pub use check::{grad_check, GradCheckReport, LossFn};
pub use graph::{Graph, NodeId};
pub use tensor::Tensor;
