//! Positive-sample construction: Mixup variants, additive Gaussian noise and
//! the per-anchor random choice among the Mixup variants.
//!
//! The Gaussian baseline is `x + s * eps` with `eps ~ N(0, I)`. Published
//! hyperparameter grids describe `s` as a "mean" with unit standard deviation;
//! we read it as a zero-mean scale since a nonzero mean would just shift
//! every positive by the same vector.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::math::{Matrix, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    Linear,
    Geometric,
    Binary,
    Gaussian,
    /// Uniform per-anchor choice among linear, geometric and binary.
    DaclPlus,
}

/// The concrete transform applied to one positive.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixKind {
    Linear,
    Geometric,
    Binary,
    Gaussian,
}

const MIXUP_KINDS: [MixKind; 3] = [MixKind::Linear, MixKind::Geometric, MixKind::Binary];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoisePolicy {
    pub kind: NoiseKind,
    /// Lower end of `lambda ~ U(alpha, 1)` for linear mixing.
    pub alpha: f64,
    /// Lower end of `lambda ~ U(beta, 1)` for geometric mixing.
    pub beta: f64,
    /// Probability that a coordinate is kept from the anchor in binary mixing.
    pub rho: f64,
    pub gaussian_scale: f64,
}

impl Default for NoisePolicy {
    fn default() -> Self {
        Self {
            kind: NoiseKind::Linear,
            alpha: 0.9,
            beta: 0.9,
            rho: 0.5,
            gaussian_scale: 0.1,
        }
    }
}

impl NoisePolicy {
    pub fn linear(alpha: f64) -> Self {
        Self {
            kind: NoiseKind::Linear,
            alpha,
            ..Self::default()
        }
    }

    pub fn gaussian(scale: f64) -> Self {
        Self {
            kind: NoiseKind::Gaussian,
            gaussian_scale: scale,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let open_unit = |v: f64| v > 0.0 && v < 1.0;
        ensure!(open_unit(self.alpha), "noise alpha must lie in (0, 1), got {}", self.alpha);
        ensure!(open_unit(self.beta), "noise beta must lie in (0, 1), got {}", self.beta);
        ensure!(
            (0.0..=1.0).contains(&self.rho),
            "noise rho must lie in [0, 1], got {}",
            self.rho
        );
        ensure!(
            self.gaussian_scale > 0.0 && self.gaussian_scale.is_finite(),
            "gaussian_scale must be positive, got {}",
            self.gaussian_scale
        );
        Ok(())
    }

    pub fn uses_geometric(&self) -> bool {
        matches!(self.kind, NoiseKind::Geometric | NoiseKind::DaclPlus)
    }

    /// The transform for one anchor; `DaclPlus` draws from the stream.
    pub fn choose_kind(&self, rng: &mut RngState) -> MixKind {
        match self.kind {
            NoiseKind::Linear => MixKind::Linear,
            NoiseKind::Geometric => MixKind::Geometric,
            NoiseKind::Binary => MixKind::Binary,
            NoiseKind::Gaussian => MixKind::Gaussian,
            NoiseKind::DaclPlus => MIXUP_KINDS[rng.below(3)],
        }
    }
}

fn check_lengths(x: &[f64], xt: &[f64]) -> Result<()> {
    ensure!(
        x.len() == xt.len(),
        "mixing vectors of length {} and {}",
        x.len(),
        xt.len()
    );
    Ok(())
}

fn check_lambda(lambda: f64) -> Result<()> {
    ensure!(
        (0.0..=1.0).contains(&lambda),
        "mixing weight must lie in [0, 1], got {lambda}"
    );
    Ok(())
}

/// `lambda * x + (1 - lambda) * xt`.
pub fn mix_linear(x: &[f64], xt: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lengths(x, xt)?;
    check_lambda(lambda)?;
    Ok(x.iter()
        .zip(xt)
        .map(|(a, b)| lambda * a + (1.0 - lambda) * b)
        .collect())
}

/// Elementwise `x^lambda * xt^(1 - lambda)` with `0^0 = 1`.
pub fn mix_geometric(x: &[f64], xt: &[f64], lambda: f64) -> Result<Vec<f64>> {
    check_lengths(x, xt)?;
    check_lambda(lambda)?;
    for (i, (a, b)) in x.iter().zip(xt).enumerate() {
        if *a < 0.0 || *b < 0.0 {
            return Err(Error::domain(format!(
                "geometric mixing needs nonnegative entries, index {i} has ({a}, {b})"
            )));
        }
    }
    // powf already gives 0^0 = 1
    Ok(x.iter()
        .zip(xt)
        .map(|(a, b)| a.powf(lambda) * b.powf(1.0 - lambda))
        .collect())
}

/// Keeps `x` where the mask is set and takes `xt` elsewhere.
pub fn mix_binary(x: &[f64], xt: &[f64], mask: &[bool]) -> Result<Vec<f64>> {
    check_lengths(x, xt)?;
    ensure!(
        mask.len() == x.len(),
        "mask length {} does not match vector length {}",
        mask.len(),
        x.len()
    );
    Ok(x.iter()
        .zip(xt)
        .zip(mask)
        .map(|((a, b), &keep)| if keep { *a } else { *b })
        .collect())
}

pub fn gaussian_positive(x: &[f64], scale: f64, rng: &mut RngState) -> Result<Vec<f64>> {
    ensure!(scale > 0.0, "gaussian scale must be positive, got {scale}");
    Ok(x.iter().map(|v| v + scale * rng.standard_normal()).collect())
}

/// `lambda ~ U(lower, 1)`.
pub fn sample_lambda(rng: &mut RngState, lower: f64) -> Result<f64> {
    ensure!(
        lower > 0.0 && lower < 1.0,
        "lambda lower bound must lie in (0, 1), got {lower}"
    );
    rng.sample_uniform(lower, 1.0)
}

/// Uniform index in `0..n` other than `anchor`.
pub fn sample_partner(n: usize, anchor: usize, rng: &mut RngState) -> Result<usize> {
    ensure!(n >= 2, "mixing needs a batch of at least 2 rows, got {n}");
    ensure!(anchor < n, "anchor {anchor} out of range for batch of {n}");
    let j = rng.below(n - 1);
    Ok(if j >= anchor { j + 1 } else { j })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Positive {
    pub values: Vec<f64>,
    pub kind: MixKind,
    /// Batch row the anchor was mixed with (none for Gaussian noise).
    pub partner: Option<usize>,
    /// Mixing weight on the anchor, for linear and geometric mixing.
    pub lambda: Option<f64>,
}

/// One positive for row `anchor` using a fixed transform.
pub fn make_positive_of_kind(
    batch: &Matrix,
    anchor: usize,
    kind: MixKind,
    policy: &NoisePolicy,
    rng: &mut RngState,
) -> Result<Positive> {
    ensure!(
        anchor < batch.rows(),
        "anchor {anchor} out of range for batch of {}",
        batch.rows()
    );
    let x = batch.row(anchor);
    if kind == MixKind::Gaussian {
        return Ok(Positive {
            values: gaussian_positive(x, policy.gaussian_scale, rng)?,
            kind,
            partner: None,
            lambda: None,
        });
    }
    let partner = sample_partner(batch.rows(), anchor, rng)?;
    let xt = batch.row(partner);
    let (values, lambda) = match kind {
        MixKind::Linear => {
            let l = sample_lambda(rng, policy.alpha)?;
            (mix_linear(x, xt, l)?, Some(l))
        }
        MixKind::Geometric => {
            let l = sample_lambda(rng, policy.beta)?;
            (mix_geometric(x, xt, l)?, Some(l))
        }
        MixKind::Binary => {
            let mask = rng.bernoulli_mask(x.len(), policy.rho)?;
            (mix_binary(x, xt, &mask)?, None)
        }
        MixKind::Gaussian => unreachable!(),
    };
    Ok(Positive {
        values,
        kind,
        partner: Some(partner),
        lambda,
    })
}

/// One positive for row `anchor` under `policy`.
pub fn make_positive(
    batch: &Matrix,
    anchor: usize,
    policy: &NoisePolicy,
    rng: &mut RngState,
) -> Result<Positive> {
    let kind = policy.choose_kind(rng);
    make_positive_of_kind(batch, anchor, kind, policy, rng)
}

/// Both positives of an anchor. They share the transform but draw their
/// partners, weights and masks independently.
pub fn make_positive_pair(
    batch: &Matrix,
    anchor: usize,
    policy: &NoisePolicy,
    rng: &mut RngState,
) -> Result<[Positive; 2]> {
    let kind = policy.choose_kind(rng);
    let first = make_positive_of_kind(batch, anchor, kind, policy, rng)?;
    let second = make_positive_of_kind(batch, anchor, kind, policy, rng)?;
    Ok([first, second])
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    #[test]
    fn linear_cases() {
        let x = [0.2, 0.4];
        assert_eq!(mix_linear(&x, &[1.0, 0.0], 1.0).unwrap(), x.to_vec());
        assert_eq!(mix_linear(&[1.0, 3.0], &[3.0, 1.0], 0.5).unwrap(), vec![2.0, 2.0]);
        assert!(close(&mix_linear(&x, &[1.0, 0.0], 0.9).unwrap(), &[0.28, 0.36], 1e-15));
        assert!(mix_linear(&x, &[1.0], 0.5).is_err());
    }

    #[test]
    fn geometric_cases() {
        assert_eq!(mix_geometric(&[0.3, 0.0], &[0.7, 0.0], 1.0).unwrap(), vec![0.3, 0.0]);
        assert_eq!(mix_geometric(&[4.0], &[1.0], 0.5).unwrap(), vec![2.0]);
        assert!(close(
            &mix_geometric(&[0.25, 1.0], &[1.0, 0.04], 0.5).unwrap(),
            &[0.5, 0.2],
            1e-15
        ));
        assert_eq!(mix_geometric(&[0.0], &[0.0], 0.5).unwrap(), vec![0.0]);
        match mix_geometric(&[0.1, -0.2], &[0.5, 0.5], 0.5) {
            Err(Error::Domain(msg)) => assert!(msg.contains("index 1"), "{msg}"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn binary_cases() {
        let x = [1.0, 2.0, 3.0];
        let xt = [9.0, 8.0, 7.0];
        assert_eq!(mix_binary(&x, &xt, &[true; 3]).unwrap(), x.to_vec());
        assert_eq!(mix_binary(&x, &xt, &[false; 3]).unwrap(), xt.to_vec());
        assert_eq!(mix_binary(&x, &xt, &[true, false, true]).unwrap(), vec![1.0, 8.0, 3.0]);
    }

    #[test]
    fn gaussian_noise_moments() {
        let mut rng = RngState::new(3);
        let x = [0.5, -1.0];
        let tiny = gaussian_positive(&x, 1e-12, &mut rng).unwrap();
        assert!(close(&tiny, &x, 1e-10));

        let scale = 0.3;
        let n = 100_000;
        let mut sum = [0.0; 2];
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let p = gaussian_positive(&x, scale, &mut rng).unwrap();
            for j in 0..2 {
                sum[j] += p[j];
                sq[j] += (p[j] - x[j]).powi(2);
            }
        }
        for j in 0..2 {
            assert!((sum[j] / n as f64 - x[j]).abs() < 0.01 * scale);
            let var = sq[j] / n as f64;
            assert!((var / (scale * scale) - 1.0).abs() < 0.03, "var {var}");
        }
    }

    #[test]
    fn lambda_support_and_mean() {
        let mut rng = RngState::new(4);
        let n = 100_000;
        let mut sum = 0.0;
        for _ in 0..n {
            let l = sample_lambda(&mut rng, 0.9).unwrap();
            assert!((0.9..1.0).contains(&l));
            sum += l;
        }
        assert!((sum / n as f64 - 0.95).abs() < 0.002);
        let near = sample_lambda(&mut rng, 1.0 - 1e-12).unwrap();
        assert!(near >= 1.0 - 1e-12 && near < 1.0);
        assert!(sample_lambda(&mut rng, 1.0).is_err());
        assert!(sample_lambda(&mut rng, 0.0).is_err());
    }

    fn batch() -> Matrix {
        Matrix::from_rows(&[
            vec![0.1, 0.9, 0.5],
            vec![0.7, 0.2, 0.0],
            vec![1.0, 0.4, 0.3],
            vec![0.0, 0.6, 0.8],
        ])
        .unwrap()
    }

    #[test]
    fn positive_near_anchor_when_alpha_near_one() {
        let b = batch();
        let alpha = 1.0 - 1e-6;
        let mut rng = RngState::new(5);
        for i in 0..4 {
            let p = make_positive(&b, i, &NoisePolicy::linear(alpha), &mut rng).unwrap();
            let j = p.partner.unwrap();
            let spread = b
                .row(i)
                .iter()
                .zip(b.row(j))
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            let dev = p
                .values
                .iter()
                .zip(b.row(i))
                .map(|(a, c)| (a - c).abs())
                .fold(0.0, f64::max);
            assert!(dev <= (1.0 - alpha) * spread + 1e-15);
        }
    }

    #[test]
    fn two_rows_partner_is_other() {
        let b = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let mut rng = RngState::new(6);
        for _ in 0..50 {
            let p = make_positive(&b, 0, &NoisePolicy::linear(0.5), &mut rng).unwrap();
            assert_eq!(p.partner, Some(1));
            let p = make_positive(&b, 1, &NoisePolicy::linear(0.5), &mut rng).unwrap();
            assert_eq!(p.partner, Some(0));
        }
        let single = Matrix::from_rows(&[vec![1.0]]).unwrap();
        assert!(make_positive(&single, 0, &NoisePolicy::linear(0.5), &mut rng).is_err());
        // gaussian noise needs no partner
        assert!(make_positive(&single, 0, &NoisePolicy::gaussian(0.1), &mut rng).is_ok());
    }

    #[test]
    fn partner_never_anchor() {
        let b = batch();
        let mut rng = RngState::new(7);
        let mut self_picks = 0;
        for t in 0..100_000 {
            let i = t % 4;
            let p = make_positive(&b, i, &NoisePolicy::linear(0.5), &mut rng).unwrap();
            if p.partner == Some(i) {
                self_picks += 1;
            }
        }
        assert_eq!(self_picks, 0);
    }

    #[test]
    fn dacl_plus_kind_frequencies_and_sharing() {
        let b = batch();
        let policy = NoisePolicy {
            kind: NoiseKind::DaclPlus,
            ..NoisePolicy::default()
        };
        let mut rng = RngState::new(8);
        let mut counts = std::collections::HashMap::new();
        let n = 30_000;
        for t in 0..n {
            let [p, q] = make_positive_pair(&b, t % 4, &policy, &mut rng).unwrap();
            assert_eq!(p.kind, q.kind);
            *counts.entry(p.kind).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        for c in counts.values() {
            assert!((*c as f64 / n as f64 - 1.0 / 3.0).abs() < 0.01);
        }
    }

    #[test]
    fn geometric_policy_rejects_negative_batch() {
        let b = Matrix::from_rows(&[vec![-1.0], vec![1.0]]).unwrap();
        let policy = NoisePolicy {
            kind: NoiseKind::Geometric,
            ..NoisePolicy::default()
        };
        let err = make_positive(&b, 1, &policy, &mut RngState::new(1)).unwrap_err();
        assert!(matches!(err, Error::Domain(_)));
    }

    #[test]
    fn policy_validation() {
        assert!(NoisePolicy::default().validate().is_ok());
        assert!(NoisePolicy::linear(1.0).validate().is_err());
        assert!(NoisePolicy::gaussian(0.0).validate().is_err());
        let bad_rho = NoisePolicy {
            rho: 1.5,
            ..NoisePolicy::default()
        };
        assert!(bad_rho.validate().is_err());
    }

    fn unit_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, len)
    }

    proptest! {
        #[test]
        fn mixing_at_one_is_identity(x in unit_vec(6), xt in unit_vec(6)) {
            prop_assert_eq!(mix_linear(&x, &xt, 1.0).unwrap(), x.clone());
            prop_assert_eq!(mix_geometric(&x, &xt, 1.0).unwrap(), x.clone());
            prop_assert_eq!(mix_binary(&x, &xt, &[true; 6]).unwrap(), x);
        }

        #[test]
        fn linear_inside_box(x in unit_vec(5), xt in unit_vec(5), l in 0.0f64..=1.0) {
            let m = mix_linear(&x, &xt, l).unwrap();
            for k in 0..5 {
                let (lo, hi) = (x[k].min(xt[k]), x[k].max(xt[k]));
                prop_assert!(m[k] >= lo - 1e-15 && m[k] <= hi + 1e-15);
            }
        }

        #[test]
        fn geometric_swap_symmetry(x in unit_vec(5), xt in unit_vec(5), l in 0.0f64..=1.0) {
            let a = mix_geometric(&x, &xt, l).unwrap();
            let b = mix_geometric(&xt, &x, 1.0 - l).unwrap();
            for k in 0..5 {
                prop_assert!((a[k] - b[k]).abs() <= 1e-12);
            }
        }

        #[test]
        fn linear_closer_to_anchor(x in unit_vec(4), xt in unit_vec(4), l in 0.5001f64..=1.0) {
            prop_assume!(x != xt);
            let m = mix_linear(&x, &xt, l).unwrap();
            let dist = |a: &[f64], b: &[f64]| {
                a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>()
            };
            prop_assert!(dist(&m, &x) < dist(&m, &xt));
        }
    }
}
