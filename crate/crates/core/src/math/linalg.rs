//! Small dense linear-algebra helpers backed by `nalgebra`.

use nalgebra::DMatrix;

use super::Matrix;
use crate::error::{ensure, Result};

/// Relative eigenvalue cutoff used for ranks and pseudo-inverses.
pub const EIGEN_CUTOFF: f64 = 1e-10;

fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

fn from_na(m: &DMatrix<f64>) -> Matrix {
    let mut out = Matrix::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

/// Uncentered second moment `(1/n) Xᵀ X`.
pub fn second_moment(x: &Matrix) -> Matrix {
    let n = x.rows().max(1) as f64;
    x.transpose().dot(x).scale(1.0 / n)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
/// Eigenvectors are the columns of the returned matrix.
pub fn sym_eigen(m: &Matrix) -> Result<(Vec<f64>, Matrix)> {
    ensure!(m.rows() == m.cols(), "sym_eigen: matrix is {}x{}", m.rows(), m.cols());
    let eig = to_na(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..m.rows()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = Matrix::zeros(m.rows(), m.cols());
    for (col, &src) in order.iter().enumerate() {
        for row in 0..m.rows() {
            vectors.set(row, col, eig.eigenvectors[(row, src)]);
        }
    }
    Ok((values, vectors))
}

/// Count of eigenvalues above `EIGEN_CUTOFF * max eigenvalue`.
pub fn numerical_rank(eigenvalues: &[f64]) -> usize {
    let top = eigenvalues.iter().cloned().fold(0.0, f64::max);
    if top <= 0.0 {
        return 0;
    }
    eigenvalues.iter().filter(|&&l| l > EIGEN_CUTOFF * top).count()
}

/// `M^{†/2}`: inverse square root on the retained eigenspace, zero elsewhere.
pub fn pinv_sqrt(m: &Matrix) -> Result<Matrix> {
    let (values, vectors) = sym_eigen(m)?;
    let top = values.first().copied().unwrap_or(0.0);
    let d = m.rows();
    let mut out = Matrix::zeros(d, d);
    for (k, &l) in values.iter().enumerate() {
        if top <= 0.0 || l <= EIGEN_CUTOFF * top {
            continue;
        }
        let s = 1.0 / l.sqrt();
        for i in 0..d {
            let vi = vectors.get(i, k) * s;
            for j in 0..d {
                let cur = out.get(i, j);
                out.set(i, j, cur + vi * vectors.get(j, k));
            }
        }
    }
    Ok(out)
}

pub fn singular_values(m: &Matrix) -> Vec<f64> {
    let mut sv: Vec<f64> = to_na(m).singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Thin QR's orthonormal factor, used to build whitened test data.
pub fn orthonormal_columns(m: &Matrix) -> Matrix {
    from_na(&to_na(m).qr().q())
}
