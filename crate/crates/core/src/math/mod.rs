//! Dense matrices, a seeded random stream and a few linear-algebra helpers.

pub mod linalg;
mod matrix;
mod rng;

pub use matrix::{set_threads, threads, Matrix};
pub use rng::{RngSnapshot, RngState};

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}
