//! Dense row-major f64 tensors with optional gradient buffers.
//!
//! A [`Tensor`] is a value container; differentiation happens on a
//! [`crate::tape::Tape`]. The gradient buffer exists exactly when the tensor
//! participates in optimization (`requires_grad`), and accumulates across
//! backward passes until the owner zeroes it.

use crate::error::{Error, Result};
use rand::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    /// Builds a tensor, validating that `data` fills `shape` exactly.
    pub fn new(shape: Vec<usize>, data: Vec<f64>, requires_grad: bool) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::Dimension {
                op: "tensor_new",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        let grad = requires_grad.then(|| vec![0.0; numel]);
        Ok(Tensor { shape, data, grad })
    }

    pub fn zeros(shape: Vec<usize>, requires_grad: bool) -> Self {
        let numel: usize = shape.iter().product();
        let grad = requires_grad.then(|| vec![0.0; numel]);
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad,
        }
    }

    /// Parameter initialization: uniform in `[-bound, bound]`, gradient on.
    pub fn uniform(shape: Vec<usize>, bound: f64, rng: &mut impl Rng) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-bound..=bound)).collect();
        Tensor {
            shape,
            data,
            grad: Some(vec![0.0; numel]),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.grad.is_some()
    }

    /// Gradient buffer; present iff `requires_grad`.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `delta` into the gradient buffer.
    pub fn accumulate_grad(&mut self, delta: &[f64]) -> Result<()> {
        let grad = self.grad.as_mut().ok_or(Error::Usage(
            "accumulate_grad on a tensor without gradient".into(),
        ))?;
        if grad.len() != delta.len() {
            return Err(Error::Dimension {
                op: "accumulate_grad",
                lhs: vec![grad.len()],
                rhs: vec![delta.len()],
            });
        }
        for (g, d) in grad.iter_mut().zip(delta) {
            *g += d;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        if let Some(g) = self.grad.as_mut() {
            g.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn new_rejects_mismatched_data_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5], false).unwrap_err();
        assert!(matches!(
            err,
            Error::Dimension {
                op: "tensor_new",
                ..
            }
        ));
    }

    #[test]
    fn grad_buffer_present_iff_requires_grad() {
        let t = Tensor::new(vec![2], vec![1.0, 2.0], false).unwrap();
        assert!(t.grad().is_none());
        let t = Tensor::new(vec![2], vec![1.0, 2.0], true).unwrap();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_accumulates_until_zeroed() {
        let mut t = Tensor::zeros(vec![3], true);
        t.accumulate_grad(&[1.0, 2.0, 3.0]).unwrap();
        t.accumulate_grad(&[1.0, 1.0, 1.0]).unwrap();
        assert_eq!(t.grad().unwrap(), &[2.0, 3.0, 4.0]);
        t.zero_grad();
        assert_eq!(t.grad().unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn uniform_init_is_seed_deterministic_and_bounded() {
        let mut a = ChaCha20Rng::seed_from_u64(7);
        let mut b = ChaCha20Rng::seed_from_u64(7);
        let ta = Tensor::uniform(vec![4, 4], 0.25, &mut a);
        let tb = Tensor::uniform(vec![4, 4], 0.25, &mut b);
        assert_eq!(ta.data(), tb.data());
        assert!(ta.data().iter().all(|v| v.abs() <= 0.25));
    }
}
