//! Row-major `f64` tensors.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// A dense row-major tensor of 64-bit floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TensorError {
    #[error("shape {shape:?} implies {expected} elements but {actual} were given")]
    LengthMismatch {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape dimensions must be positive, got {0:?}")]
    ZeroDimension(Vec<usize>),
    #[error("tensor data contains a non-finite value at index {0}")]
    NonFinite(usize),
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        if shape.iter().any(|&d| d == 0) {
            return Err(TensorError::ZeroDimension(shape));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::LengthMismatch {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(idx) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(idx));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let len: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; len],
        }
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

    /// Leading dimension, i.e. the batch size for `[n, ...]` tensors.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Number of elements per leading-dimension slice.
    pub fn row_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_len();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_validates_length() {
        let err = Tensor::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, TensorError::LengthMismatch { expected: 6, .. }));
    }

    #[test]
    fn new_rejects_zero_dims() {
        assert!(matches!(
            Tensor::new(vec![2, 0], vec![]),
            Err(TensorError::ZeroDimension(_))
        ));
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = Tensor::new(vec![3], vec![1.0, f64::NAN, 0.0]).unwrap_err();
        assert_eq!(err, TensorError::NonFinite(1));
    }

    #[test]
    fn row_views() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(t.rows(), 2);
        assert_eq!(t.row(1), &[3.0, 4.0]);
    }
}
