//! Dense tensors and reverse-mode automatic differentiation.
//!
//! [`Tensor`] is plain storage: a shape, a row-major `f64` buffer, and an
//! optional gradient buffer. All computation happens on a [`Tape`](tape::Tape):
//! tensors are staged onto the tape as leaves, operations record enough state
//! for their backward pass, and a single `backward` call accumulates
//! gradients which callers then absorb back into their tensors.

pub mod linalg;
pub mod tape;

pub use tape::{Tape, Var};

use crate::error::{Error, Result};

/// Owned dense array: shape plus row-major data, with an optional gradient
/// buffer of the same length.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor from a shape and matching data buffer.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArg {
                op: "Tensor::new",
                msg: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, requires_grad: false, grad: None })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], requires_grad: false, grad: None }
    }

    /// Constant-filled tensor of the given shape.
    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], requires_grad: false, grad: None }
    }

    /// Marks the tensor as a trainable parameter.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Adds `delta` into the gradient buffer, allocating it on first use.
    /// No-op for tensors with `requires_grad == false`.
    pub fn accumulate_grad(&mut self, delta: &[f64]) {
        if !self.requires_grad {
            return;
        }
        debug_assert_eq!(delta.len(), self.data.len());
        let grad = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
    }

    /// Clears the gradient buffer.
    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_length_mismatch() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn grad_accumulates_only_when_required() {
        let mut frozen = Tensor::zeros(vec![2]);
        frozen.accumulate_grad(&[1.0, 1.0]);
        assert!(frozen.grad.is_none());

        let mut param = Tensor::zeros(vec![2]).with_grad();
        param.accumulate_grad(&[1.0, 2.0]);
        param.accumulate_grad(&[0.5, 0.5]);
        assert_eq!(param.grad.as_deref(), Some(&[1.5, 2.5][..]));
        param.zero_grad();
        assert!(param.grad.is_none());
    }
}
