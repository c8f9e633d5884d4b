use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

static THREADS: AtomicUsize = AtomicUsize::new(1);

/// Caps the number of threads [`Matrix::matmul`] may use. `0` is treated as 1.
///
/// Every output element is still accumulated by one thread in ascending `k`
/// order, so the thread count never changes a single bit of the result.
pub fn set_threads(n: usize) {
    THREADS.store(n.max(1), Ordering::Relaxed);
}

pub fn threads() -> usize {
    THREADS.load(Ordering::Relaxed)
}

/// Dense row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
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

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
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

    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            data.len() == rows * cols,
            "matrix data has {} entries, expected {rows}x{cols}",
            data.len()
        );
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::domain(format!(
                "non-finite matrix entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        ensure!(
            rows.iter().all(|r| r.len() == cols),
            "ragged rows in matrix literal"
        );
        Self::from_vec(rows.len(), cols, rows.concat())
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

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.cols.max(1)).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        const TILE: usize = 32;
        let (r, c) = (self.rows, self.cols);
        let mut out = Matrix::zeros(c, r);
        for i0 in (0..r).step_by(TILE) {
            for j0 in (0..c).step_by(TILE) {
                for i in i0..(i0 + TILE).min(r) {
                    for j in j0..(j0 + TILE).min(c) {
                        out.data[j * r + i] = self.data[i * c + j];
                    }
                }
            }
        }
        out
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Concatenates columns: `[self | other]`.
    pub fn hstack(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.rows == other.rows,
            "hstack: {} rows vs {} rows",
            self.rows,
            other.rows
        );
        let mut data = Vec::with_capacity(self.rows * (self.cols + other.cols));
        for i in 0..self.rows {
            data.extend_from_slice(self.row(i));
            data.extend_from_slice(other.row(i));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols + other.cols,
            data,
        })
    }

    /// Matrix product in reference order: each output entry starts at `0.0`
    /// and accumulates `a[i][k] * b[k][j]` for ascending `k`, one fused
    /// multiply-add per term. `mul_add` is exactly rounded on every
    /// platform, so the result is reproducible bit for bit.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(
            self.cols == other.rows,
            "matmul: inner dimensions disagree ({}x{} times {}x{})",
            self.rows,
            self.cols,
            other.rows,
            other.cols
        );
        Ok(self.dot(other))
    }

    /// Unchecked [`Matrix::matmul`] for internal hot paths; panics on shape
    /// mismatch.
    pub(crate) fn dot(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimension");
        let mut out = Matrix::zeros(self.rows, other.cols);
        gemm(
            &self.data,
            &other.data,
            &mut out.data,
            self.rows,
            self.cols,
            other.cols,
        );
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        self.map(|v| v * s)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(self.shape() == other.shape(), "add: shape mismatch");
        Ok(self.zip_with(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        ensure!(self.shape() == other.shape(), "sub: shape mismatch");
        Ok(self.zip_with(other, |a, b| a - b))
    }

    pub(crate) fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn col_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; self.cols];
        for r in self.row_iter() {
            for (acc, v) in m.iter_mut().zip(r) {
                *acc += v;
            }
        }
        let n = self.rows.max(1) as f64;
        m.iter_mut().for_each(|v| *v /= n);
        m
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

const MR: usize = 4;
const NR: usize = 16;

/// `c = a * b` for row-major `a` (m x k), `b` (k x n); `c` must be zeroed.
fn gemm(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    let threads = threads().min(m.div_ceil(MR)).max(1);
    if threads == 1 || m * n * k < 1 << 18 {
        gemm_rows(a, b, c, m, k, n);
        return;
    }
    let blocks = m.div_ceil(MR);
    let rows_per = blocks.div_ceil(threads) * MR;
    std::thread::scope(|s| {
        for (t, c_chunk) in c.chunks_mut(rows_per * n).enumerate() {
            let r0 = t * rows_per;
            let rows = c_chunk.len() / n;
            let a_chunk = &a[r0 * k..(r0 + rows) * k];
            s.spawn(move || gemm_rows(a_chunk, b, c_chunk, rows, k, n));
        }
    });
}

fn gemm_rows(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    if m == 0 || n == 0 {
        return;
    }
    let full_n = n - n % NR;
    let mut panel = vec![0.0; k * NR];
    for j0 in (0..full_n).step_by(NR) {
        for p in 0..k {
            panel[p * NR..(p + 1) * NR].copy_from_slice(&b[p * n + j0..p * n + j0 + NR]);
        }
        let mut i = 0;
        while i + MR <= m {
            let mut acc = [[0.0f64; NR]; MR];
            let rows: [&[f64]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                for r in 0..MR {
                    let av = rows[r][p];
                    for q in 0..NR {
                        acc[r][q] = av.mul_add(bp[q], acc[r][q]);
                    }
                }
            }
            for (r, acc_row) in acc.iter().enumerate() {
                c[(i + r) * n + j0..(i + r) * n + j0 + NR].copy_from_slice(acc_row);
            }
            i += MR;
        }
        for i in i..m {
            let arow = &a[i * k..(i + 1) * k];
            let mut acc = [0.0f64; NR];
            for (p, bp) in panel.chunks_exact(NR).enumerate() {
                let av = arow[p];
                for q in 0..NR {
                    acc[q] = av.mul_add(bp[q], acc[q]);
                }
            }
            c[i * n + j0..i * n + j0 + NR].copy_from_slice(&acc);
        }
    }
    if full_n < n {
        let w = n - full_n;
        let mut acc = vec![0.0f64; w];
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n + full_n..(p + 1) * n];
                for q in 0..w {
                    acc[q] = av.mul_add(brow[q], acc[q]);
                }
            }
            c[i * n + full_n..(i + 1) * n].copy_from_slice(&acc);
        }
    }
}
