//! Dense row-major `f32` matrices and a seedable generator.
//!
//! Every activation, gradient and weight in the crate is a [`Matrix`].
//! Batched sequence activations of shape `(batch, seq, width)` are flattened
//! to `(batch * seq) x width`.
//!
//! Reductions always accumulate in ascending index order with plain
//! multiply-then-add, so results are bit-reproducible across runs, builds and
//! platforms. The split-training equivalence tests depend on this.

use std::fmt;

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};

use crate::error::{Error, Result};

/// A dense, row-major single-precision matrix.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Matrix[{}x{}]", self.rows, self.cols)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn filled(rows: usize, cols: usize, value: f32) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "buffer of length {} cannot hold a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from nested rows. Panics on ragged input; meant for
    /// literals in tests and examples.
    pub fn from_rows(rows: &[&[f32]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn diag(values: &[f32]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
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
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn as_mut_slice(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f32] {
        let cols = self.cols;
        &mut self.data[r * cols..(r + 1) * cols]
    }

    /// Copies rows `start..end` into a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Matrix {
        Matrix {
            rows: end - start,
            cols: self.cols,
            data: self.data[start * self.cols..end * self.cols].to_vec(),
        }
    }

    /// Copies columns `start..end` into a new matrix.
    pub fn slice_cols(&self, start: usize, end: usize) -> Matrix {
        let mut out = Matrix::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data
            .iter()
            .map(|&v| f64::from(v) * f64::from(v))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }

    fn check_same_shape(&self, other: &Matrix, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{op}: {}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Matrix { data, ..*self })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&self, s: f32) -> Matrix {
        Matrix {
            data: self.data.iter().map(|v| v * s).collect(),
            ..*self
        }
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Matrix {
        Matrix {
            data: self.data.iter().map(|&v| f(v)).collect(),
            ..*self
        }
    }

    /// Adds `bias` (a `1 x cols` row) to every row.
    pub fn add_row_broadcast(&mut self, bias: &Matrix) -> Result<()> {
        if bias.rows != 1 || bias.cols != self.cols {
            return Err(Error::Shape(format!(
                "row broadcast: {}x{} onto {}x{}",
                bias.rows, bias.cols, self.rows, self.cols
            )));
        }
        for r in 0..self.rows {
            for (a, b) in self.row_mut(r).iter_mut().zip(&bias.data) {
                *a += b;
            }
        }
        Ok(())
    }

    /// Sums rows into a `1 x cols` matrix, ascending row order.
    pub fn sum_rows(&self) -> Matrix {
        let mut out = Matrix::zeros(1, self.cols);
        for r in 0..self.rows {
            for (o, v) in out.data.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    /// Matrix product.
    ///
    /// Each output entry is `0 + a[i,0]*b[0,j] + a[i,1]*b[1,j] + ...` with `k`
    /// ascending, matching a naive triple loop bit for bit. The loop nest is
    /// `i, k, j` so the innermost loop streams contiguous rows; entries in
    /// different columns are independent, so this does not change the order
    /// of any individual sum.
    pub fn matmul(&self, b: &Matrix) -> Result<Matrix> {
        if self.cols != b.rows {
            return Err(Error::Shape(format!(
                "matmul: {}x{} times {}x{}",
                self.rows, self.cols, b.rows, b.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, b.cols);
        let mut out = vec![0.0f32; m * n];
        if n == 0 {
            return Ok(Matrix { rows: m, cols: n, data: out });
        }
        // Four output rows per pass share each load of `b`'s row.
        let mut blocks = out.chunks_exact_mut(4 * n);
        let mut i = 0;
        for block in &mut blocks {
            let (o0, rest) = block.split_at_mut(n);
            let (o1, rest) = rest.split_at_mut(n);
            let (o2, o3) = rest.split_at_mut(n);
            for p in 0..k {
                let a0 = self.data[i * k + p];
                let a1 = self.data[(i + 1) * k + p];
                let a2 = self.data[(i + 2) * k + p];
                let a3 = self.data[(i + 3) * k + p];
                let b_row = &b.data[p * n..(p + 1) * n];
                for j in 0..n {
                    let bv = b_row[j];
                    o0[j] += a0 * bv;
                    o1[j] += a1 * bv;
                    o2[j] += a2 * bv;
                    o3[j] += a3 * bv;
                }
            }
            i += 4;
        }
        for out_row in blocks.into_remainder().chunks_exact_mut(n) {
            let a_row = &self.data[i * k..(i + 1) * k];
            for (p, &a) in a_row.iter().enumerate() {
                let b_row = &b.data[p * n..(p + 1) * n];
                for (o, &bv) in out_row.iter_mut().zip(b_row) {
                    *o += a * bv;
                }
            }
            i += 1;
        }
        Ok(Matrix {
            rows: m,
            cols: n,
            data: out,
        })
    }

    /// `self * b^T` without materialising the transpose.
    pub fn matmul_bt(&self, b: &Matrix) -> Result<Matrix> {
        self.matmul(&b.transpose())
            .map_err(|_| Error::Shape(format!(
                "matmul_bt: {}x{} times ({}x{})^T",
                self.rows, self.cols, b.rows, b.cols
            )))
    }

    /// `self^T * b`.
    pub fn t_matmul(&self, b: &Matrix) -> Result<Matrix> {
        self.transpose().matmul(b).map_err(|_| {
            Error::Shape(format!(
                "t_matmul: ({}x{})^T times {}x{}",
                self.rows, self.cols, b.rows, b.cols
            ))
        })
    }

    /// Fills a matrix by drawing `rows * cols` values in row-major order.
    pub fn seeded_fill(rows: usize, cols: usize, dist: Dist, rng: &mut Rng) -> Result<Matrix> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument(format!(
                "seeded_fill needs positive dimensions, got {rows}x{cols}"
            )));
        }
        let n = rows * cols;
        let data = match dist {
            Dist::Uniform { lo, hi } => {
                if !(lo.is_finite() && hi.is_finite()) || lo > hi {
                    return Err(Error::InvalidArgument(format!(
                        "uniform({lo}, {hi}) is not a valid range"
                    )));
                }
                if lo == hi {
                    vec![lo; n]
                } else {
                    let d = Uniform::new(lo, hi);
                    (0..n).map(|_| d.sample(&mut rng.inner)).collect()
                }
            }
            Dist::Normal { mean, std } => {
                // rand_distr accepts a negative std (it mirrors the draws),
                // so check explicitly.
                if !(mean.is_finite() && std.is_finite() && std >= 0.0) {
                    return Err(Error::InvalidArgument(format!("normal({mean}, {std})")));
                }
                let d = Normal::new(mean, std)
                    .map_err(|e| Error::InvalidArgument(format!("normal({mean}, {std}): {e}")))?;
                (0..n).map(|_| d.sample(&mut rng.inner)).collect()
            }
        };
        Ok(Matrix { rows, cols, data })
    }
}

/// Distributions accepted by [`Matrix::seeded_fill`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Dist {
    Uniform { lo: f32, hi: f32 },
    Normal { mean: f32, std: f32 },
}

/// Seed-deterministic random generator (ChaCha8, identical stream on every
/// platform).
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn seed(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform index in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.gen()
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}
