//! Minimal dense neural-network toolkit: tensors, a reverse-mode tape,
//! recurrent and attention layers, AdamW and gradient checking.

pub mod adamw;
pub mod gradcheck;
pub mod graph;
pub mod layers;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState};
pub use graph::{Gradients, Graph, Var};
pub use tensor::Tensor;
