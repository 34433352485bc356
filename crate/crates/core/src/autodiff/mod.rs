//! Dense `f64` tensors with a tape for reverse-mode differentiation.

mod graph;
mod optim;
mod tensor;

pub use graph::{BatchMoments, Graph, NormStats, Var, BATCH_NORM_EPS, LOG_CLAMP};
pub use optim::{sgd_step, Sgd};
pub use tensor::Tensor;

use crate::error::Result;

/// Row-wise softmax outside of any graph.
pub fn softmax(logits: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let y = g.softmax(x)?;
    Ok(g.value(y).clone())
}
