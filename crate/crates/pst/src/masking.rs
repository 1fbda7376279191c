//! Top-v mask selection and mask comparison.
//!
//! A mask keeps exactly the v highest-scoring entries of a weight matrix.
//! Selection is layer-local and fully deterministic: among equal scores
//! the lower row-major index wins, so identical inputs always produce
//! identical masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor2D;

/// {0,1}-valued matrix marking the kept entries of one weight matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    rows: usize,
    cols: usize,
    bits: Vec<u8>,
}

impl BinaryMask {
    pub fn all_ones(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![1; rows * cols] }
    }

    pub fn all_zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, bits: vec![0; rows * cols] }
    }

    /// Rebuilds a mask from a 0/1-valued tensor (checkpoint loads).
    pub fn from_tensor(t: &Tensor2D) -> Result<Self> {
        let mut bits = Vec::with_capacity(t.len());
        for &v in t.data() {
            if v == 0.0 {
                bits.push(0);
            } else if v == 1.0 {
                bits.push(1);
            } else {
                return Err(Error::contract(format!(
                    "mask tensor entries must be 0 or 1, found {v}"
                )));
            }
        }
        Ok(Self { rows: t.rows(), cols: t.cols(), bits })
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.cols + c] == 1
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// Row-major '0'/'1' string, the mask's form inside run reports.
    pub fn to_bit_string(&self) -> String {
        self.bits.iter().map(|&b| if b == 1 { '1' } else { '0' }).collect()
    }

    pub fn from_bit_string(rows: usize, cols: usize, s: &str) -> Result<Self> {
        if s.len() != rows * cols {
            return Err(Error::contract(format!(
                "bit string length {} does not match {rows}x{cols}",
                s.len()
            )));
        }
        let bits = s
            .chars()
            .map(|ch| match ch {
                '0' => Ok(0u8),
                '1' => Ok(1u8),
                other => Err(Error::contract(format!("bad mask bit {other:?}"))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Ok(Self { rows, cols, bits })
    }

    pub fn ones_count(&self) -> usize {
        self.bits.iter().filter(|b| **b == 1).count()
    }

    /// Fraction of zeroed entries.
    pub fn sparsity(&self) -> f64 {
        1.0 - self.ones_count() as f64 / self.bits.len() as f64
    }

    /// The mask as a 0.0/1.0 tensor, for Hadamard products.
    pub fn to_tensor(&self) -> Tensor2D {
        let data = self.bits.iter().map(|&b| b as f64).collect();
        Tensor2D::new(self.rows, self.cols, data).expect("mask dims are valid")
    }

    /// Zero fraction of each row (length n vector).
    pub fn row_sparsities(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let zeros = self.bits[r * self.cols..(r + 1) * self.cols]
                    .iter()
                    .filter(|b| **b == 0)
                    .count();
                zeros as f64 / self.cols as f64
            })
            .collect()
    }

    /// Zero fraction of each column (length k vector).
    pub fn col_sparsities(&self) -> Vec<f64> {
        let mut zeros = vec![0usize; self.cols];
        for r in 0..self.rows {
            for c in 0..self.cols {
                if self.bits[r * self.cols + c] == 0 {
                    zeros[c] += 1;
                }
            }
        }
        zeros
            .into_iter()
            .map(|z| z as f64 / self.rows as f64)
            .collect()
    }
}

/// Keeps the v largest score entries; among equal scores the lower
/// row-major index wins.
pub fn top_v_mask(scores: &Tensor2D, v: usize) -> Result<BinaryMask> {
    let (n, k) = scores.shape();
    let total = n * k;
    if v > total {
        return Err(Error::contract(format!(
            "top_v_mask: v={v} exceeds {n}x{k}={total} entries"
        )));
    }
    if v == 0 {
        return Ok(BinaryMask::all_zeros(n, k));
    }
    if v == total {
        return Ok(BinaryMask::all_ones(n, k));
    }
    let data = scores.data();
    let mut order: Vec<usize> = (0..total).collect();
    // Better-first comparator: higher score, then lower index. After the
    // partition, positions [0, v) hold exactly the kept entries.
    order.select_nth_unstable_by(v - 1, |&a, &b| {
        data[b].total_cmp(&data[a]).then(a.cmp(&b))
    });
    let mut bits = vec![0u8; total];
    for &idx in &order[..v] {
        bits[idx] = 1;
    }
    Ok(BinaryMask { rows: n, cols: k, bits })
}

/// Kept-entry budget for one n x k matrix at a given sparsity.
///
/// v = floor((1 - sparsity) * n * k). The small epsilon undoes float
/// rounding when the product is mathematically an integer, so e.g.
/// (1 - 0.9) * 100 yields 10, not 9.
pub fn sparsity_to_v(n: usize, k: usize, sparsity: f64) -> Result<usize> {
    if !(0.0..=1.0).contains(&sparsity) {
        return Err(Error::contract(format!(
            "sparsity must lie in [0, 1], got {sparsity}"
        )));
    }
    let total = (n * k) as f64;
    let v = ((1.0 - sparsity) * total + 1e-9).floor() as usize;
    Ok(v.min(n * k))
}

/// Hamming agreement: 1 - differing_entries / (n*k).
pub fn mask_similarity(a: &BinaryMask, b: &BinaryMask) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mask_similarity", a.shape(), b.shape()));
    }
    let differing = a
        .bits
        .iter()
        .zip(&b.bits)
        .filter(|(x, y)| x != y)
        .count();
    Ok(1.0 - differing as f64 / a.bits.len() as f64)
}

/// Bins per-row and per-column zero fractions into equal-width intervals
/// over [0,1]; the last bin is right-closed. Each histogram sums to 1.
pub fn row_col_sparsity_histogram(
    m: &BinaryMask,
    bins: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    if m.bits.is_empty() {
        return Err(Error::contract("histogram of an empty mask"));
    }
    let bin_of = |frac: f64| ((frac * bins as f64) as usize).min(bins - 1);
    let mut row_hist = vec![0.0; bins];
    for frac in m.row_sparsities() {
        row_hist[bin_of(frac)] += 1.0;
    }
    for x in &mut row_hist {
        *x /= m.rows as f64;
    }
    let mut col_hist = vec![0.0; bins];
    for frac in m.col_sparsities() {
        col_hist[bin_of(frac)] += 1.0;
    }
    for x in &mut col_hist {
        *x /= m.cols as f64;
    }
    Ok((row_hist, col_hist))
}
