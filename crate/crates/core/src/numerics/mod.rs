//! Dense tensors, reverse-mode autodiff, and the AdamW optimizer.

mod gradcheck;
mod graph;
mod optim;
mod real;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{Graph, RopeTables, Var};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use real::{gemm, MatRef, Real};
pub use tensor::Tensor;
