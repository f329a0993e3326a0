//! Transductive label propagation for few-shot classification.
//!
//! The crate implements the full pipeline: a reverse-mode autodiff tape over
//! dense `f64` tensors, embedding and example-wise length-scale networks, a
//! Gaussian similarity graph with k-nearest-neighbor sparsification and
//! symmetric normalization, closed-form label propagation through a
//! differentiable linear solve, episodic meta-training with Adam, and a CLI
//! bench harness with deterministic CSV reports.

pub mod bench;
mod bytes;
pub mod episodes;
pub mod error;
pub mod graph;
pub mod networks;
pub mod propagation;
pub mod rng;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};

#[cfg(test)]
pub(crate) mod testutil;
