//! Dense `f64` tensors, reverse-mode gradients and the AdamW optimizer.

mod adamw;
mod graph;
mod tensor;

pub use adamw::{AdamWConfig, AdamWState};
pub use graph::{Elementwise, Graph, Node, NodeId, DEGENERATE_NORM};
pub use tensor::{cosine, dot, norm, Tensor};
