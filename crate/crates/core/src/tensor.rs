//! Dense row-major f64 tensors.
//!
//! Deliberately minimal: owned storage, explicit shapes, no views, no
//! broadcasting at this level. The autodiff tape works on flat buffers and
//! only needs shape metadata; everything clever lives in the ops.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::{Error, Result};

/// A dense tensor with optional gradient buffer of the same shape.
///
/// Invariant: `data.len() == shape.iter().product()` and, when present,
/// `grad.len() == data.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::new",
                detail: format!("shape {:?} implies {} elements, got {}", shape, numel, data.len()),
            });
        }
        Ok(Tensor { shape, data, grad: None })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel], grad: None }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel], grad: None }
    }

    /// Gaussian init, mean 0. Draws in row-major order from `rng`, so the
    /// same rng state always produces the same tensor.
    pub fn randn<R: Rng>(shape: Vec<usize>, std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..numel).map(|_| dist.sample(rng)).collect();
        Tensor { shape, data, grad: None }
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

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Split borrow for the optimizer: mutable data alongside the
    /// read-only gradient.
    pub fn data_and_grad_mut(&mut self) -> (&mut [f64], Option<&[f64]>) {
        (&mut self.data, self.grad.as_deref())
    }

    /// Install a gradient buffer; its length must match the data buffer.
    pub fn set_grad(&mut self, grad: Vec<f64>) -> Result<()> {
        if grad.len() != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "Tensor::set_grad",
                detail: format!("grad len {} vs data len {}", grad.len(), self.data.len()),
            });
        }
        self.grad = Some(grad);
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }

    /// Population standard deviation of the elements (used by NoisyTune to
    /// scale per-matrix noise). Empty tensors return 0.
    pub fn std(&self) -> f64 {
        let n = self.data.len();
        if n == 0 {
            return 0.0;
        }
        let mean = self.data.iter().sum::<f64>() / n as f64;
        let var = self.data.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        var.sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}
