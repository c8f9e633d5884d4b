//! Contrastive and classification losses with exact gradients.
//!
//! Contrastive batches use 0-based pairing: rows `2k` and `2k + 1` are the
//! two positives of anchor `k`, so the partner of row `i` is `i ^ 1`.

use crate::error::{ensure, Error, Result};
use crate::math::{dot, norm, Matrix};

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    ensure!(u.len() == v.len(), "cosine of vectors of length {} and {}", u.len(), v.len());
    let (nu, nv) = (norm(u), norm(v));
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::domain("cosine similarity of a zero vector"));
    }
    Ok(dot(u, v) / (nu * nv))
}

/// `log(1 + exp(t))` without overflow.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

/// Logistic function.
pub fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// Cross-entropy of logit `q` against a 0/1 label, written as
/// `log(1 + exp(q)) - y q`.
pub fn binary_xent(q: f64, y: u8) -> f64 {
    debug_assert!(y <= 1, "binary label {y}");
    if y == 1 {
        softplus(-q)
    } else {
        softplus(q)
    }
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// NT-Xent over `z` (`2N` rows). Returns the mean over all `2N` directed
/// positive terms and its gradient with respect to `z`.
pub fn nt_xent(z: &Matrix, temperature: f64) -> Result<(f64, Matrix)> {
    ensure!(temperature > 0.0, "temperature must be positive, got {temperature}");
    let rows = z.rows();
    ensure!(rows >= 2 && rows % 2 == 0, "contrastive batch needs an even row count, got {rows}");

    let mut unit = z.clone();
    let mut norms = vec![0.0; rows];
    for (i, n) in norms.iter_mut().enumerate() {
        *n = norm(z.row(i));
        if *n == 0.0 {
            return Err(Error::domain(format!("contrastive row {i} has zero norm")));
        }
        unit.row_mut(i).iter_mut().for_each(|v| *v /= *n);
    }
    let sims = unit.dot(&unit.transpose());

    // d loss / d sim, accumulated row by row
    let mut dsim = Matrix::zeros(rows, rows);
    let mut total = 0.0;
    let scale = 1.0 / rows as f64;
    for i in 0..rows {
        let pos = i ^ 1;
        let logits = sims.row(i);
        let drow = dsim.row_mut(i);
        for (d, l) in drow.iter_mut().zip(logits) {
            *d = l / temperature;
        }
        // the anchor's self-similarity is excluded from the softmax
        drow[i] = f64::NEG_INFINITY;
        let peak = drow.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        drow.iter_mut().for_each(|d| *d = (*d - peak).exp());
        let sum: f64 = drow.iter().sum();
        total += peak + sum.ln() - logits[pos] / temperature;
        let weight = scale / (temperature * sum);
        drow.iter_mut().for_each(|d| *d *= weight);
        drow[pos] -= scale / temperature;
    }
    let loss = total * scale;

    // sims are symmetric, so d/du_i = sum_j (G_ij + G_ji) u_j
    let mut sym = dsim;
    for i in 0..rows {
        for j in 0..i {
            let v = sym.get(i, j) + sym.get(j, i);
            sym.set(i, j, v);
            sym.set(j, i, v);
        }
        sym.set(i, i, 2.0 * sym.get(i, i));
    }
    let dunit = sym.dot(&unit);
    let mut dz = Matrix::zeros(rows, z.cols());
    for i in 0..rows {
        let u = unit.row(i);
        let du = dunit.row(i);
        let radial = dot(u, du);
        for (out, (ui, dui)) in dz.row_mut(i).iter_mut().zip(u.iter().zip(du)) {
            *out = (dui - ui * radial) / norms[i];
        }
    }
    Ok((loss, dz))
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_xent(logits: &Matrix, labels: &[usize]) -> Result<(f64, Matrix)> {
    let (b, c) = logits.shape();
    ensure!(labels.len() == b, "{} labels for {b} rows of logits", labels.len());
    ensure!(b >= 1, "softmax_xent on an empty batch");
    let mut grad = Matrix::zeros(b, c);
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        ensure!(y < c, "label {y} out of range for {c} classes");
        let row = logits.row(i);
        let lse = log_sum_exp(row.iter().copied());
        total += lse - row[y];
        let g = grad.row_mut(i);
        for k in 0..c {
            g[k] = (row[k] - lse).exp() / b as f64;
        }
        g[y] -= 1.0 / b as f64;
    }
    Ok((total / b as f64, grad))
}

/// Index of the largest entry per row.
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    m.row_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                .0
        })
        .collect()
}
