//! Dense row-major `f64` tensors with just enough linear algebra for the attention block.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape {shape:?} needs {expected} values, got {actual}")]
    Length {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("non-finite value at flat index {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(TensorError::Length {
                shape,
                expected,
                actual: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite(i));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    /// Uniform entries in `[-scale, scale]`.
    pub fn random_uniform<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(|_| rng.gen_range(-scale..=scale)).collect(),
        }
    }

    /// Uniform entries with zero mean and unit variance.
    pub fn random_unit<R: Rng>(shape: &[usize], rng: &mut R) -> Self {
        Self::random_uniform(shape, 3f64.sqrt(), rng)
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self, TensorError> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(TensorError::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Shape(format!("expected a matrix, got shape {s:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = *self.shape.last().unwrap_or(&0);
        &self.data[r * c..(r + 1) * c]
    }

    pub fn at2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.shape[1] + c]
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        self.same_shape(other)?;
        Ok(Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<(), TensorError> {
        self.same_shape(other)?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| v * alpha).collect(),
        }
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64, TensorError> {
        self.same_shape(other)?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn same_shape(&self, other: &Tensor) -> Result<(), TensorError> {
        if self.shape != other.shape {
            return Err(TensorError::Shape(format!(
                "{:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor, TensorError> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(TensorError::Shape(format!(
                "matmul {m}x{k} by {k2}x{n}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let a = &self.data[i * k..(i + 1) * k];
            let o = &mut out[i * n..(i + 1) * n];
            for (p, &aip) in a.iter().enumerate() {
                let b = &other.data[p * n..(p + 1) * n];
                for (oj, bj) in o.iter_mut().zip(b) {
                    *oj += aip * bj;
                }
            }
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transpose(&self) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(Tensor {
            shape: vec![n, m],
            data: out,
        })
    }

    /// Adds a length-`n` vector to every row of an `m x n` matrix.
    pub fn add_row_vector(&self, v: &Tensor) -> Result<Tensor, TensorError> {
        let (_, n) = self.dims2()?;
        if v.len() != n {
            return Err(TensorError::Shape(format!(
                "row vector of length {} for {n} columns",
                v.len()
            )));
        }
        let mut out = self.clone();
        for row in out.data.chunks_mut(n) {
            for (a, b) in row.iter_mut().zip(&v.data) {
                *a += b;
            }
        }
        Ok(out)
    }

    /// Column sums of a matrix, as a vector.
    pub fn sum_rows(&self) -> Result<Tensor, TensorError> {
        let (_, n) = self.dims2()?;
        let mut out = vec![0.0; n];
        for row in self.data.chunks(n) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        Ok(Tensor {
            shape: vec![n],
            data: out,
        })
    }

    /// Copies columns `start..start + width` of a matrix.
    pub fn columns(&self, start: usize, width: usize) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2()?;
        if start + width > n {
            return Err(TensorError::Shape(format!(
                "columns {start}..{} of {n}",
                start + width
            )));
        }
        let mut out = Vec::with_capacity(m * width);
        for row in self.data.chunks(n) {
            out.extend_from_slice(&row[start..start + width]);
        }
        Ok(Tensor {
            shape: vec![m, width],
            data: out,
        })
    }

    /// Writes `block` into columns `start..` of a matrix.
    pub fn set_columns(&mut self, start: usize, block: &Tensor) -> Result<(), TensorError> {
        let (m, n) = self.dims2()?;
        let (bm, bw) = block.dims2()?;
        if bm != m || start + bw > n {
            return Err(TensorError::Shape(format!(
                "block {bm}x{bw} at column {start} of {m}x{n}"
            )));
        }
        for (row, brow) in self.data.chunks_mut(n).zip(block.data.chunks(bw)) {
            row[start..start + bw].copy_from_slice(brow);
        }
        Ok(())
    }

    /// Reorders the rows of a matrix: row `i` of the result is row `perm[i]` of `self`.
    pub fn permute_rows(&self, perm: &[usize]) -> Result<Tensor, TensorError> {
        let (m, n) = self.dims2()?;
        if perm.len() != m {
            return Err(TensorError::Shape(format!(
                "permutation of length {} for {m} rows",
                perm.len()
            )));
        }
        let mut out = Vec::with_capacity(m * n);
        for &p in perm {
            out.extend_from_slice(&self.data[p * n..(p + 1) * n]);
        }
        Ok(Tensor {
            shape: vec![m, n],
            data: out,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_length_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert_eq!(
            Tensor::new(vec![2], vec![1.0, f64::INFINITY]),
            Err(TensorError::NonFinite(1))
        );
    }

    #[test]
    fn matmul_and_transpose() {
        let a = Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::new(vec![3, 1], vec![1.0, 0.0, -1.0]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), &[-2.0, -2.0]);
        assert_eq!(a.transpose().unwrap().data(), &[1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
        assert!(a.matmul(&a).is_err());
    }

    #[test]
    fn column_blocks_round_trip() {
        let a = Tensor::new(vec![2, 4], (0..8).map(f64::from).collect()).unwrap();
        let block = a.columns(1, 2).unwrap();
        assert_eq!(block.data(), &[1.0, 2.0, 5.0, 6.0]);
        let mut z = Tensor::zeros(&[2, 4]);
        z.set_columns(1, &block).unwrap();
        assert_eq!(z.data(), &[0.0, 1.0, 2.0, 0.0, 0.0, 5.0, 6.0, 0.0]);
    }
}
