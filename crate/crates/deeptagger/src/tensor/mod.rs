//! Dense f64 tensors with tape-based reverse-mode differentiation.
//!
//! The engine is deliberately small: row-major storage, a fixed set of
//! primitive ops chosen to cover a transformer tagger, and a dynamic tape
//! rebuilt on every forward pass. Gradients flow to parameters *and* to
//! input embeddings, which the adversarial trainer needs for perturbation
//! search. All primitives verify their outputs are finite so numerical
//! blowups surface at the op that caused them.

mod optim;
mod rng;
mod tape;

pub use optim::{Adam, AdamConfig, Sgd};
pub use rng::Rng;
pub use tape::{Activation, Bcast, Gradients, NodeId, Tape};

use crate::{Error, Result};

/// Dense row-major tensor. Invariant: `data.len() == shape.iter().product()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(Error::Data(format!(
                "tensor shape {shape:?} wants {expect} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![0.0; n] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let n = shape.iter().product();
        Tensor { shape, data: vec![value; n] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], data: vec![value] }
    }

    /// Gaussian init with the given standard deviation.
    pub fn randn(shape: Vec<usize>, std: f64, rng: &mut Rng) -> Self {
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.normal() * std).collect();
        Tensor { shape, data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Number of rows when viewed as a matrix `[rows, cols]`.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() on non-matrix {:?}", self.shape);
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() on non-matrix {:?}", self.shape);
        self.shape[1]
    }

    /// Scalar view. Errors if the tensor holds more than one element.
    pub fn item(&self) -> Result<f64> {
        if self.data.len() != 1 {
            return Err(Error::NonScalarLoss { shape: self.shape.clone() });
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Euclidean norm of the flattened data.
    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constructor_rejects_bad_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn item_rejects_non_scalar() {
        let t = Tensor::zeros(vec![2]);
        assert!(matches!(t.item(), Err(Error::NonScalarLoss { .. })));
        assert_eq!(Tensor::scalar(3.5).item().unwrap(), 3.5);
    }

    #[test]
    fn l2_norm_matches_hand_value() {
        let t = Tensor::new(vec![2], vec![3.0, 4.0]).unwrap();
        assert!((t.l2_norm() - 5.0).abs() < 1e-12);
    }
}
