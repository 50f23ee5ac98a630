//! Minimal dense tensors with reverse-mode differentiation.
//!
//! Everything is `f32`. A [`Graph`] is built fresh for every forward pass;
//! leaves either borrow long-lived weights or own per-call inputs.

mod gradcheck;
mod graph;
pub mod kernels;
mod tensor;

pub use gradcheck::{analytic_gradients, finite_diff_check, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Var};
pub use kernels::AttnShape;
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NdError {
    #[error("{op}: dimension error: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("{op}: empty dimension")]
    EmptyDim { op: &'static str },
    #[error("expected a scalar, got shape {shape:?}")]
    NotScalar { shape: Vec<usize> },
    #[error("{op}: target is not a distribution (sum {sum})")]
    NotNormalized { op: &'static str, sum: f64 },
    #[error("{op}: index {index} out of range 0..{bound}")]
    IndexOutOfRange { op: &'static str, index: usize, bound: usize },
}

pub type NdResult<T> = Result<T, NdError>;

/// Shannon entropy (nats) of a distribution.
pub fn entropy(p: &[f32]) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|&v| -(v as f64) * (v as f64).ln()).sum()
}

/// `KL(p || q)` in nats.
pub fn kl_divergence(p: &[f32], q: &[f32]) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&a, _)| a > 0.0)
        .map(|(&a, &b)| a as f64 * ((a as f64).ln() - (b as f64).ln()))
        .sum()
}

/// Softmax of a plain slice (no graph).
pub fn softmax(x: &[f32]) -> Vec<f32> {
    let mut out = vec![0.0; x.len()];
    kernels::softmax_into(x, &mut out);
    out
}

#[cfg(test)]
mod tests;
