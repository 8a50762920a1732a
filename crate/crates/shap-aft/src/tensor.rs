//! Dense row-major f64 tensors.
//!
//! Everything in this crate runs on 64-bit floats so that gradient checks
//! against central finite differences hold at tight tolerances. Shapes are
//! at most rank 3 (convolution kernels); most values are vectors, matrices,
//! or scalars (empty shape).

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub data: Vec<f64>,
    pub shape: Vec<usize>,
}

impl Tensor {
    pub fn new(data: Vec<f64>, shape: Vec<usize>) -> Self {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        Tensor { data, shape }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            data: vec![v],
            shape: vec![],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        let n = data.len();
        Tensor {
            data,
            shape: vec![n],
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Tensor {
            data,
            shape: vec![rows, cols],
        }
    }

    /// Uniform Glorot-style initialization: U(-a, a) with a = sqrt(6 / (fan_in + fan_out)).
    pub fn glorot(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-a..a)).collect();
        Tensor {
            data,
            shape: shape.to_vec(),
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.shape.is_empty() && self.data.len() == 1
    }

    /// Scalar payload; panics if the tensor is not scalar.
    pub fn item(&self) -> f64 {
        assert!(self.data.len() == 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Interpret as rows: a vector is one row, a matrix is (rows, cols).
    pub fn rows_cols(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.len() {
            1 => Ok((1, self.shape[0])),
            2 => Ok((self.shape[0], self.shape[1])),
            _ => Err(Error::shape(
                op,
                format!("expected vector or matrix, got shape {:?}", self.shape),
            )),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}
