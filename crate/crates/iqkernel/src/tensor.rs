//! Dense row-major float tensors used on the reference path and at the
//! integer pipeline boundaries.

use crate::error::{Error, Result};
use crate::trace;
use ndarray::{ArrayView2, ArrayViewMut2};

/// A finite, row-major f32 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n == 0 {
            return Err(Error::EmptyTensor(format!("shape {shape:?}")));
        }
        if data.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} wants {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n: usize = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    /// Number of rows when viewed as 2-D (leading dims flattened).
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the trailing dimension.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    fn view2(&self) -> ArrayView2<'_, f32> {
        ArrayView2::from_shape((self.rows(), self.cols()), &self.data).expect("consistent shape")
    }

    /// `self (r×k) · rhs (k×c)` in f32.
    pub fn matmul(&self, rhs: &FloatTensor) -> Result<FloatTensor> {
        if self.cols() != rhs.rows() {
            return Err(Error::ShapeMismatch(format!(
                "matmul inner dims {} vs {}",
                self.cols(),
                rhs.rows()
            )));
        }
        let (r, c) = (self.rows(), rhs.cols());
        trace::count_float(self.len() * rhs.cols());
        let mut out = FloatTensor::zeros(vec![r, c]);
        {
            let mut ov = ArrayViewMut2::from_shape((r, c), out.as_mut_slice()).unwrap();
            ndarray::linalg::general_mat_mul(1.0, &self.view2(), &rhs.view2(), 0.0, &mut ov);
        }
        Ok(out)
    }

    pub fn transpose2(&self) -> FloatTensor {
        let (r, c) = (self.rows(), self.cols());
        let mut data = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = self.data[i * c + j];
            }
        }
        FloatTensor {
            shape: vec![c, r],
            data,
        }
    }

    /// Max-abs difference against another tensor of the same shape.
    pub fn max_abs_diff(&self, other: &FloatTensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (*a as f64 - *b as f64).abs())
            .fold(0.0, f64::max)
    }

    pub fn mse(&self, other: &FloatTensor) -> f64 {
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                let d = *a as f64 - *b as f64;
                d * d
            })
            .sum();
        s / self.data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_and_bad_shape() {
        assert!(FloatTensor::new(vec![2], vec![1.0, f32::NAN]).is_err());
        assert!(FloatTensor::new(vec![3], vec![1.0, 2.0]).is_err());
        assert!(FloatTensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn matmul_small() {
        let a = FloatTensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = FloatTensor::new(vec![2, 2], vec![5.0, 6.0, 7.0, 8.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_roundtrip() {
        let a = FloatTensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let t = a.transpose2();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transpose2().as_slice(), a.as_slice());
    }
}
