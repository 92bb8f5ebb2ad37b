//! Dense row-major matrices and the SPD solver used by the ridge router.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Index, IndexMut};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                context: "matrix buffer",
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows. Panics on ragged input.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            let r = r.as_ref();
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn push_row(&mut self, row: &[f64]) -> Result<()> {
        if self.rows == 0 && self.cols == 0 {
            self.cols = row.len();
        }
        if row.len() != self.cols {
            return Err(Error::Shape {
                context: "push_row",
                expected: self.cols,
                actual: row.len(),
            });
        }
        self.data.extend_from_slice(row);
        self.rows += 1;
        Ok(())
    }

    /// Appends zero columns on the right.
    pub fn pad_columns(&mut self, new_cols: usize) {
        if new_cols <= self.cols {
            return;
        }
        let mut data = vec![0.0; self.rows * new_cols];
        for i in 0..self.rows {
            data[i * new_cols..i * new_cols + self.cols].copy_from_slice(self.row(i));
        }
        self.cols = new_cols;
        self.data = data;
    }

    /// Appends zero rows at the bottom.
    pub fn pad_rows(&mut self, new_rows: usize) {
        if new_rows > self.rows {
            self.data.resize(new_rows * self.cols, 0.0);
            self.rows = new_rows;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.rows {
            return Err(Error::Shape {
                context: "matmul",
                expected: self.cols,
                actual: rhs.rows,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in self.row(i).iter().enumerate() {
                if a != 0.0 {
                    axpy(a, rhs.row(k), out_row);
                }
            }
        }
        Ok(out)
    }

    /// `self * rhs^T`, i.e. dot products between rows of both operands.
    pub fn matmul_transposed(&self, rhs: &Matrix) -> Result<Matrix> {
        if self.cols != rhs.cols {
            return Err(Error::Shape {
                context: "matmul_transposed",
                expected: self.cols,
                actual: rhs.cols,
            });
        }
        let mut out = Matrix::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            for j in 0..rhs.rows {
                out[(i, j)] = dot(self.row(i), rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn scale(&mut self, s: f64) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn frobenius_norm(&self) -> f64 {
        libm::sqrt(self.data.iter().map(|v| v * v).sum())
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| libm::fabs(a - b))
            .fold(0.0, f64::max)
    }

    /// Largest `|A_ij - A_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols.min(self.rows) {
                worst = worst.max(libm::fabs(self[(i, j)] - self[(j, i)]));
            }
        }
        worst
    }

    /// Copies the upper triangle over the lower one.
    pub fn mirror_upper(&mut self) {
        let n = self.rows.min(self.cols);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = self[(i, j)];
                self[(j, i)] = v;
            }
        }
    }

    /// Selects rows by index into a new matrix.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Subtracts each column's mean.
    pub fn center_columns(&mut self) {
        if self.rows == 0 {
            return;
        }
        let n = self.rows as f64;
        for j in 0..self.cols {
            let mean = (0..self.rows).map(|i| self[(i, j)]).sum::<f64>() / n;
            for i in 0..self.rows {
                self[(i, j)] -= mean;
            }
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        debug_assert!(i < self.rows && j < self.cols);
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    // Four accumulators let the compiler vectorize without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let k = c * 4;
        acc[0] += a[k] * b[k];
        acc[1] += a[k + 1] * b[k + 1];
        acc[2] += a[k + 2] * b[k + 2];
        acc[3] += a[k + 3] * b[k + 3];
    }
    let mut tail = 0.0;
    for k in chunks * 4..a.len() {
        tail += a[k] * b[k];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// `y += a * x`
#[inline]
pub fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Lower Cholesky factor of a symmetric positive-definite matrix.
#[derive(Debug, Clone)]
pub struct Cholesky {
    lower: Matrix,
}

impl Cholesky {
    /// Factors `a + shift * I`. Returns `None` if a non-positive pivot shows up.
    pub fn factor_shifted(a: &Matrix, shift: f64) -> Option<Self> {
        const BLOCK: usize = 48;
        let n = a.rows();
        debug_assert_eq!(n, a.cols());
        let mut l = Matrix::zeros(n, n);
        // Left-looking over row blocks: each finished row j is streamed once
        // per block and reused for every row of the block.
        for start in (0..n).step_by(BLOCK) {
            let end = (start + BLOCK).min(n);
            for j in 0..end {
                for i in start.max(j)..end {
                    let s = {
                        let li = &l.row(i)[..j];
                        let lj = &l.row(j)[..j];
                        a[(i, j)] + if i == j { shift } else { 0.0 } - dot(li, lj)
                    };
                    if i == j {
                        if !s.is_finite() || s <= 0.0 {
                            return None;
                        }
                        l[(i, i)] = libm::sqrt(s);
                    } else {
                        l[(i, j)] = s / l[(j, j)];
                    }
                }
            }
        }
        Some(Self { lower: l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.lower
    }

    /// Solves `(L L^T) X = B` for every column of `b`.
    pub fn solve(&self, b: &Matrix) -> Matrix {
        let n = self.lower.rows();
        assert_eq!(b.rows(), n, "right-hand side height");
        let k = b.cols();
        let l = &self.lower;
        // Forward substitution, all right-hand sides at once (row-major friendly).
        let mut y = b.clone();
        for i in 0..n {
            let (done, rest) = y.as_mut_slice().split_at_mut(i * k);
            let yi = &mut rest[..k];
            for (j, &lij) in l.row(i)[..i].iter().enumerate() {
                if lij != 0.0 {
                    axpy(-lij, &done[j * k..(j + 1) * k], yi);
                }
            }
            let inv = 1.0 / l[(i, i)];
            yi.iter_mut().for_each(|v| *v *= inv);
        }
        // Backward substitution with L^T: row i of L^T is column i of L.
        let mut x = y;
        for i in (0..n).rev() {
            let (head, tail) = x.as_mut_slice().split_at_mut((i + 1) * k);
            let xi = &mut head[i * k..];
            for r in (i + 1)..n {
                let lri = l[(r, i)];
                if lri != 0.0 {
                    let xr = &tail[(r - i - 1) * k..(r - i) * k];
                    axpy(-lri, xr, xi);
                }
            }
            let inv = 1.0 / l[(i, i)];
            xi.iter_mut().for_each(|v| *v *= inv);
        }
        x
    }
}

/// Solves `(a + shift I) X = b` by Cholesky, escalating a diagonal jitter
/// when round-off makes the factorization fail.
///
/// The first jitter is `1e-10 * trace(a) / n`; it grows by 10x up to three
/// more times before giving up.
pub fn solve_spd_with_jitter(a: &Matrix, shift: f64, b: &Matrix) -> Result<Matrix> {
    if let Some(ch) = Cholesky::factor_shifted(a, shift) {
        return Ok(ch.solve(b));
    }
    let n = a.rows().max(1) as f64;
    let base = libm::fabs(a.trace()) / n * 1e-10;
    let base = if base > 0.0 { base } else { f64::EPSILON };
    let mut jitter = base;
    for _ in 0..4 {
        if let Some(ch) = Cholesky::factor_shifted(a, shift + jitter) {
            return Ok(ch.solve(b));
        }
        jitter *= 10.0;
    }
    Err(Error::Factorization { jitter: jitter / 10.0 })
}
