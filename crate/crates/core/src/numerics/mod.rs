//! Dense tensors, reverse-mode differentiation, Adam, gradient checking and
//! parameter checkpoints.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod params;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{finite_diff_check, GradCheckOptions, GradCheckReport};
pub use graph::{cross_entropy_from_logits, Graph, MacCounter, PickSpec, Var};
pub use params::{AdamConfig, Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{kernels, matmul, softmax_rows, Tensor};
