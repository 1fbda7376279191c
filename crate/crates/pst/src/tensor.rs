//! Dense row-major f64 matrices.
//!
//! `Tensor2D` is the universal value carrier of the crate: weights,
//! gradients, importance scores and data batches are all plain 2-D
//! matrices. Everything is double precision.

use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Dense matrix with row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor2D {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor2D {
    /// Builds a tensor from raw row-major data. The data length must be
    /// `rows * cols` and both dimensions must be positive.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::contract(format!(
                "tensor dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "data length {} does not match shape {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 1.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    /// Entries drawn i.i.d. from N(0, std^2).
    pub fn gaussian<R: Rng>(rows: usize, cols: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        Self { rows, cols, data }
    }

    /// Convenience for literal matrices in tests and examples.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let r = rows.len();
        let c = rows[0].len();
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        let data = rows.iter().flat_map(|row| row.iter().copied()).collect();
        Self { rows: r, cols: c, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(op, self.shape(), other.shape()));
        }
        Ok(())
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::shape("matmul", self.shape(), other.shape()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            for l in 0..k {
                let a = self.data[i * k + l];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[l * m..(l + 1) * m];
                let orow = &mut out[i * m..(i + 1) * m];
                for j in 0..m {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(Self { rows: n, cols: m, data: out })
    }

    /// Elementwise product.
    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "hadamard")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a * b)
            .collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    pub fn scale(&self, factor: f64) -> Self {
        self.map(|v| v * factor)
    }

    pub fn abs(&self) -> Self {
        self.map(f64::abs)
    }

    /// Elementwise sign with sign(0) = 0.
    pub fn signum0(&self) -> Self {
        self.map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut data = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Self { rows: self.cols, cols: self.rows, data }
    }

    /// Column vector of per-row sums (n x 1).
    pub fn row_sums(&self) -> Self {
        let data = (0..self.rows)
            .map(|r| self.data[r * self.cols..(r + 1) * self.cols].iter().sum())
            .collect();
        Self { rows: self.rows, cols: 1, data }
    }

    /// Row vector of per-column sums (1 x k).
    pub fn col_sums(&self) -> Self {
        let mut data = vec![0.0; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                data[c] += self.data[r * self.cols + c];
            }
        }
        Self { rows: 1, cols: self.cols, data }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    /// Replicates a 1 x k row vector into n identical rows.
    pub fn broadcast_row(&self, n: usize) -> Result<Self> {
        if self.rows != 1 {
            return Err(Error::contract(format!(
                "broadcast_row expects a 1xk row vector, got {}x{}",
                self.rows, self.cols
            )));
        }
        if n == 0 {
            return Err(Error::contract("broadcast_row: n must be positive"));
        }
        let mut data = Vec::with_capacity(n * self.cols);
        for _ in 0..n {
            data.extend_from_slice(&self.data);
        }
        Ok(Self { rows: n, cols: self.cols, data })
    }

    /// Replicates an n x 1 column vector into k identical columns.
    pub fn broadcast_col(&self, k: usize) -> Result<Self> {
        if self.cols != 1 {
            return Err(Error::contract(format!(
                "broadcast_col expects an nx1 column vector, got {}x{}",
                self.rows, self.cols
            )));
        }
        if k == 0 {
            return Err(Error::contract("broadcast_col: k must be positive"));
        }
        let mut data = Vec::with_capacity(self.rows * k);
        for r in 0..self.rows {
            data.extend(std::iter::repeat(self.data[r]).take(k));
        }
        Ok(Self { rows: self.rows, cols: k, data })
    }

    /// Copies columns [start, start+len) into a new tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.cols || len == 0 {
            return Err(Error::contract(format!(
                "slice_cols [{start}, {}) out of range for {} columns",
                start + len,
                self.cols
            )));
        }
        let mut data = Vec::with_capacity(self.rows * len);
        for r in 0..self.rows {
            let base = r * self.cols + start;
            data.extend_from_slice(&self.data[base..base + len]);
        }
        Ok(Self { rows: self.rows, cols: len, data })
    }

    /// Concatenates tensors with equal row counts side by side.
    pub fn concat_cols(parts: &[&Self]) -> Result<Self> {
        if parts.is_empty() {
            return Err(Error::contract("concat_cols: no parts"));
        }
        let rows = parts[0].rows;
        for p in parts {
            if p.rows != rows {
                return Err(Error::shape("concat_cols", (rows, parts[0].cols), p.shape()));
            }
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(&p.data[r * p.cols..(r + 1) * p.cols]);
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|v| **v != 0.0).count()
    }
}
