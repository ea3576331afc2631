//! Dense tensors and the reverse-mode autodiff tape.
//!
//! [`Tensor`] is a plain value: a row-major 64-bit float buffer plus shape,
//! an optional gradient buffer, and a `requires_grad` flag. Differentiable
//! computation happens on a [`Tape`] rebuilt for every training step; values
//! living on the tape are addressed by the copyable handle [`Val`].

pub mod gradcheck;
pub mod kernels;
mod tape;

pub use tape::{BnMode, BnStats, Tape, Val};

use crate::{Error, Real, Result};
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_UID: AtomicU64 = AtomicU64::new(1);

/// Dense N-dimensional array with an attached gradient buffer.
#[derive(Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<Real>,
    pub requires_grad: bool,
    pub grad: Option<Vec<Real>>,
    uid: u64,
}

impl Clone for Tensor {
    /// Clones get a fresh identity: tape bindings are cached per tensor, and
    /// a clone is a new storage location, not another view of the original.
    fn clone(&self) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            requires_grad: self.requires_grad,
            grad: self.grad.clone(),
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        }
    }
}

impl Tensor {
    pub fn new(data: Vec<Real>, shape: &[usize]) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!("zero dimension in shape {shape:?}"),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument {
                op: "tensor",
                msg: format!(
                    "shape {shape:?} implies {numel} elements, got {}",
                    data.len()
                ),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![0.0; numel], shape).expect("zeros: invalid shape")
    }

    pub fn full(shape: &[usize], value: Real) -> Self {
        let numel: usize = shape.iter().product();
        Tensor::new(vec![value; numel], shape).expect("full: invalid shape")
    }

    pub fn scalar(value: Real) -> Self {
        Tensor::new(vec![value], &[1]).unwrap()
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[Real] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Real] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub(crate) fn uid(&self) -> u64 {
        self.uid
    }

    /// Adds `g` into the gradient buffer, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[Real]) {
        debug_assert_eq!(g.len(), self.data.len());
        let grad = self
            .grad
            .get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_data_length_must_agree() {
        assert!(Tensor::new(vec![1.0, 2.0], &[3]).is_err());
        assert!(Tensor::new(vec![1.0, 2.0], &[2, 0]).is_err());
        let t = Tensor::new(vec![1.0; 6], &[2, 3]).unwrap();
        assert_eq!(t.numel(), 6);
    }

    #[test]
    fn clone_gets_fresh_identity() {
        let a = Tensor::zeros(&[2]);
        let b = a.clone();
        assert_ne!(a.uid(), b.uid());
    }

    #[test]
    fn grad_accumulates_by_summation() {
        let mut t = Tensor::zeros(&[3]);
        t.accumulate_grad(&[1.0, 2.0, 3.0]);
        t.accumulate_grad(&[1.0, 1.0, 1.0]);
        assert_eq!(t.grad.as_deref().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad.as_deref().unwrap(), &[0.0, 0.0, 0.0]);
    }
}
