//! Dense row-major tensors over `f64`.
//!
//! Only rank-0 (scalar), rank-1 (vector), and rank-2 (matrix) shapes appear
//! in this crate. The struct is deliberately plain: operations live in the
//! computation graph and the kernel layer, not here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major array of `f64` with an explicit shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Rank-0 tensor holding a single value.
    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    /// Rank-1 tensor from a flat vector.
    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    /// Rank-2 tensor from row-major data; fails if the element count does not
    /// equal `rows * cols`.
    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                context: "Tensor::matrix".into(),
                left: vec![rows, cols],
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape: vec![rows, cols],
            data,
        })
    }

    /// All-zero tensor of the given shape.
    pub fn zeros(shape: &[usize]) -> Self {
        let len = if shape.is_empty() {
            1
        } else {
            shape.iter().product()
        };
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Tensor from an explicit shape and flat data; fails on length mismatch.
    pub fn from_shape_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = if shape.is_empty() {
            1
        } else {
            shape.iter().product()
        };
        if data.len() != expected {
            return Err(Error::ShapeMismatch {
                context: "Tensor::from_shape_vec".into(),
                left: shape.clone(),
                right: vec![data.len()],
            });
        }
        Ok(Tensor { shape, data })
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

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    /// Row count of a matrix. Panics on other ranks; callers guard via
    /// [`Tensor::is_matrix`] or construct shapes they control.
    pub fn rows(&self) -> usize {
        assert!(self.is_matrix(), "rows() on rank-{} tensor", self.shape.len());
        self.shape[0]
    }

    /// Column count of a matrix, with the same contract as [`Tensor::rows`].
    pub fn cols(&self) -> usize {
        assert!(self.is_matrix(), "cols() on rank-{} tensor", self.shape.len());
        self.shape[1]
    }

    /// The single value of a rank-0 tensor.
    pub fn scalar_value(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::ShapeMismatch {
                context: "Tensor::scalar_value".into(),
                left: vec![],
                right: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Element at `(row, col)` of a matrix.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        let cols = self.cols();
        self.data[row * cols + col]
    }

    /// Row `row` of a matrix as a slice.
    pub fn row(&self, row: usize) -> &[f64] {
        let cols = self.cols();
        &self.data[row * cols..(row + 1) * cols]
    }

    /// Verify every element is finite, naming `context` on failure.
    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite {
                context: context.into(),
            })
        }
    }
}
