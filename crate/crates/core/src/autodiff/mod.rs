//! A small reverse-mode differentiation engine over dense `f64` tensors.
//!
//! Graphs are static: build once with placeholders, then call
//! [`Graph::forward`] with fresh [`Bindings`] and [`Graph::backward`] on a
//! scalar node each iteration. Only the op set needed by variational
//! training is provided.

mod graph;
pub mod kernels;
mod tensor;

pub use graph::{Bindings, Gradients, Graph, NodeId, Segments};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {context}: expected {expected:?}, found {found:?}")]
    ShapeMismatch { context: &'static str, expected: Vec<usize>, found: Vec<usize> },
    #[error("placeholder `{0}` is not bound")]
    Unbound(String),
    #[error("non-finite value from {op} (node {node}) at position {position}")]
    NonFinite { node: usize, op: &'static str, position: usize },
    #[error("argument outside the domain of {op} (node {node}) at position {position}")]
    Domain { node: usize, op: &'static str, position: usize },
    #[error("index {index} out of range for length {len}")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: f64, classes: usize },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("backward called before forward")]
    MissingForward,
}

/// Compares backward gradients against central differences
/// `(f(θ + h) - f(θ - h)) / 2h` for every coordinate of `params`.
///
/// Returns the largest `|g - fd| / max(|g|, 1e-8)`.
pub fn finite_diff_check(
    graph: &mut Graph,
    output: NodeId,
    bindings: &Bindings,
    params: &[NodeId],
    h: f64,
) -> Result<f64, AutodiffError> {
    graph.forward(bindings, output)?;
    let grads = graph.backward(output)?;
    let mut probe = bindings.clone();
    let mut worst = 0.0f64;
    for &p in params {
        let n = bindings.get(p).map(Tensor::numel).unwrap_or(0);
        let analytic = grads.get(p).map(|t| t.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for j in 0..n {
            let base = bindings.get(p).expect("bound").data()[j];
            probe.get_mut(p).expect("bound").data_mut()[j] = base + h;
            let up = scalar(graph.forward(&probe, output)?);
            probe.get_mut(p).expect("bound").data_mut()[j] = base - h;
            let down = scalar(graph.forward(&probe, output)?);
            probe.get_mut(p).expect("bound").data_mut()[j] = base;
            let fd = (up - down) / (2.0 * h);
            let err = (analytic[j] - fd).abs() / analytic[j].abs().max(1e-8);
            worst = worst.max(err);
        }
    }
    // leave the caches consistent with the unperturbed point
    graph.forward(bindings, output)?;
    Ok(worst)
}

fn scalar(t: Tensor) -> f64 {
    t.item().unwrap_or(f64::NAN)
}
