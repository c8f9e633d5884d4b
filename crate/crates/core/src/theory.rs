//! Numerical checks of the contrastive-to-classification identity, the
//! second-order expansion of the noisy classification loss, and the
//! Rademacher comparison between the plain and covariance-weighted classes.
//!
//! Everything here is exact enumeration over small finite worlds except the
//! Gaussian expansion, which is Monte Carlo with antithetic pairs and common
//! random numbers across step sizes.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::loss::{binary_xent, cosine_sim, nt_xent, sigmoid, softplus};
use crate::math::{dot, linalg, norm, Matrix, RngState};
use crate::model::{hex, MlpParams, MlpSpec};

/// Residuals below this are floating-point floor and carry no slope.
pub const RESIDUAL_FLOOR: f64 = 1e-14;
pub const THEOREM1_TOLERANCE: f64 = 1e-9;
pub const MIXUP_SLOPE_WINDOW: (f64, f64) = (2.7, 3.5);
pub const GAUSSIAN_SLOPE_WINDOW: (f64, f64) = (2.5, 3.5);
pub const MIN_MC_PAIRS: usize = 100_000;

/// The representation map `h` of a world.
#[derive(Clone, Debug)]
pub enum Encoder {
    Identity,
    Mlp(MlpParams),
}

impl Encoder {
    /// Embeds every row; networks run in eval mode so rows stay independent.
    pub fn embed(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Encoder::Identity => Ok(x.clone()),
            Encoder::Mlp(p) => p.forward_eval(x),
        }
    }

    fn embed_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.embed(&m)?.into_vec())
    }

    fn digest_bytes(&self) -> Vec<u8> {
        match self {
            Encoder::Identity => b"identity".to_vec(),
            Encoder::Mlp(p) => p.to_bytes(),
        }
    }
}

/// How a perturbation direction is built from a pool draw.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseModel {
    /// `x + a (x~ - x)`, the pool playing the data distribution.
    Mixup,
    /// `x + a x~`, the pool a finite stand-in for Gaussian draws.
    GaussianDiscretized,
}

impl NoiseModel {
    fn perturb(self, x: &[f64], pool_point: &[f64], alpha: f64) -> Vec<f64> {
        match self {
            NoiseModel::Mixup => x.iter().zip(pool_point).map(|(a, b)| a + alpha * (b - a)).collect(),
            NoiseModel::GaussianDiscretized => x.iter().zip(pool_point).map(|(a, b)| a + alpha * b).collect(),
        }
    }
}

/// A finite labelled sample with a finite mixing pool and step-size support,
/// all weighted uniformly, so every expectation is a finite sum.
#[derive(Clone, Debug)]
pub struct EmpiricalWorld {
    pub points: Matrix,
    pub labels: Vec<u8>,
    pub pool: Matrix,
    pub alphas: Vec<f64>,
    pub encoder: Encoder,
}

impl EmpiricalWorld {
    pub fn new(points: Matrix, labels: Vec<u8>, pool: Matrix, alphas: Vec<f64>, encoder: Encoder) -> Result<Self> {
        ensure!(points.rows() == labels.len(), "{} labels for {} points", labels.len(), points.rows());
        ensure!(labels.iter().all(|&y| y <= 1), "labels must be 0 or 1");
        ensure!(
            labels.contains(&0) && labels.contains(&1),
            "both classes must be present for the label-disagreement rate to be defined"
        );
        ensure!(pool.rows() >= 1, "mixing pool is empty");
        ensure!(pool.cols() == points.cols(), "pool width {} vs point width {}", pool.cols(), points.cols());
        ensure!(!alphas.is_empty(), "step-size support is empty");
        if let Encoder::Mlp(p) = &encoder {
            ensure!(p.spec.input_dim() == points.cols(), "encoder expects width {}", p.spec.input_dim());
        }
        Ok(Self {
            points,
            labels,
            pool,
            alphas,
            encoder,
        })
    }

    /// `m` points split evenly between the classes, a standard-normal pool and
    /// a random two-layer ReLU encoder with random hidden biases. Encoders
    /// that send some perturbed point to zero (every hidden unit dead) are
    /// redrawn from the next stream.
    pub fn random(seed: u64, m: usize, pool_size: usize, alphas: Vec<f64>, dim: usize, hidden: usize) -> Result<Self> {
        ensure!(m >= 2, "a world needs at least two points");
        let mut rng = RngState::substream(seed, 0);
        let mut normal = |r: usize, c: usize| {
            Matrix::from_vec(r, c, (0..r * c).map(|_| rng.standard_normal()).collect())
        };
        let points = normal(m, dim)?;
        let pool = normal(pool_size, dim)?;
        let labels: Vec<u8> = (0..m).map(|i| (i % 2) as u8).collect();
        let spec = MlpSpec::plain(vec![dim, hidden, hidden])?;
        const ATTEMPTS: u64 = 64;
        for attempt in 0..ATTEMPTS {
            let mut init_rng = RngState::substream(seed, 1 + attempt);
            let mut params = MlpParams::init(&spec, &mut init_rng);
            params.layers[0].bias.iter_mut().for_each(|b| *b = init_rng.standard_normal());
            let world = Self::new(points.clone(), labels.clone(), pool.clone(), alphas.clone(), Encoder::Mlp(params))?;
            let usable = [NoiseModel::Mixup, NoiseModel::GaussianDiscretized]
                .iter()
                .all(|&noise| world.perturbed_units(noise).is_ok());
            if usable {
                return Ok(world);
            }
        }
        Err(Error::domain(format!(
            "no encoder out of {ATTEMPTS} draws keeps every perturbed point away from zero"
        )))
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.rows() == 0
    }

    fn digest(&self, noise: NoiseModel) -> String {
        let mut h = Sha256::new();
        h.update(format!("{noise:?}"));
        feed(&mut h, self.points.as_slice());
        h.update(&self.labels);
        feed(&mut h, self.pool.as_slice());
        feed(&mut h, &self.alphas);
        h.update(self.encoder.digest_bytes());
        hex(&h.finalize())
    }

    /// Unit embeddings of every perturbed point, indexed by
    /// `(point, pool draw, step size)`.
    fn perturbed_units(&self, noise: NoiseModel) -> Result<PerturbedTable> {
        let (m, t, a) = (self.len(), self.pool.rows(), self.alphas.len());
        let mut rows = Vec::with_capacity(m * t * a);
        for i in 0..m {
            for k in 0..t {
                for &alpha in &self.alphas {
                    rows.push(noise.perturb(self.points.row(i), self.pool.row(k), alpha));
                }
            }
        }
        let emb = self.encoder.embed(&Matrix::from_rows(&rows)?)?;
        let mut units = Vec::with_capacity(emb.rows());
        let mut raw = Vec::with_capacity(emb.rows());
        for (r, row) in emb.row_iter().enumerate() {
            let n = norm(row);
            if n == 0.0 {
                return Err(Error::domain(format!("perturbed point {r} embeds to the zero vector")));
            }
            units.push(row.iter().map(|v| v / n).collect());
            raw.push(row.to_vec());
        }
        Ok(PerturbedTable {
            per_point: t * a,
            units,
            raw,
        })
    }
}

fn feed(h: &mut Sha256, values: &[f64]) {
    for v in values {
        h.update(v.to_le_bytes());
    }
}

struct PerturbedTable {
    per_point: usize,
    units: Vec<Vec<f64>>,
    raw: Vec<Vec<f64>>,
}

impl PerturbedTable {
    fn of_point(&self, i: usize) -> std::ops::Range<usize> {
        i * self.per_point..(i + 1) * self.per_point
    }
}

/// Contrastive loss of one triple with cosine similarity and no projection
/// head.
pub fn contrastive_loss_raw(xp: &[f64], xpp: &[f64], xm: &[f64], h: &Encoder) -> Result<f64> {
    let (hp, hpp, hm) = (h.embed_one(xp)?, h.embed_one(xpp)?, h.embed_one(xm)?);
    contrastive_loss_embedded(&hp, &hpp, &hm)
}

/// The same loss on already-embedded vectors.
pub fn contrastive_loss_embedded(hp: &[f64], hpp: &[f64], hm: &[f64]) -> Result<f64> {
    let pos = cosine_sim(hp, hpp)?;
    let neg = cosine_sim(hp, hm)?;
    let top = pos.max(neg);
    Ok(-(pos - top) + ((pos - top).exp() + (neg - top).exp()).ln())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Tolerance {
    /// `|lhs - rhs| <= bound * max(1, |lhs|)`.
    Relative { bound: f64 },
    /// Fitted slope inside `[low, high]`.
    SlopeWindow { low: f64, high: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualRow {
    pub alpha: f64,
    pub lhs: f64,
    pub rhs: f64,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TheoremReport {
    pub theorem: String,
    pub inputs_digest: String,
    pub lhs: Option<f64>,
    pub rhs: Option<f64>,
    pub residuals: Vec<ResidualRow>,
    pub slope: Option<f64>,
    pub tolerance: Tolerance,
    pub passed: bool,
    pub notes: Vec<String>,
}

/// Enumerates both sides of the contrastive/classification identity.
///
/// The left side averages the contrastive loss over every anchor, negative,
/// pool draw and step size. The right side splits the negatives by label:
/// cross-class triples become a binary cross-entropy of `h(x+)` against the
/// difference of unit embeddings ordered by the anchor's class, same-class
/// triples form the residual term weighted by the squared class frequency.
pub fn verify_theorem1(world: &EmpiricalWorld, noise: NoiseModel) -> Result<TheoremReport> {
    let table = world.perturbed_units(noise)?;
    let m = world.len();
    let per = table.per_point;
    let mf = m as f64;

    let mut lhs = 0.0;
    for i in 0..m {
        for j in 0..m {
            let mut acc = 0.0;
            for p in table.of_point(i) {
                for pp in table.of_point(i) {
                    for n in table.of_point(j) {
                        acc += contrastive_loss_embedded(&table.raw[p], &table.raw[pp], &table.raw[n])?;
                    }
                }
            }
            lhs += acc / (per * per * per) as f64;
        }
    }
    lhs /= mf * mf;

    // cross-class part: classifier f(x+) = h(x+)^T w~, w~ built from the
    // ordered pair (class-1 view, class-0 view)
    let mut cross = 0.0;
    for i in 0..m {
        let y = world.labels[i];
        for j in (0..m).filter(|&j| world.labels[j] != y) {
            let mut acc = 0.0;
            for p in table.of_point(i) {
                let hp = &table.raw[p];
                let scale = 1.0 / norm(hp);
                for pp in table.of_point(i) {
                    for n in table.of_point(j) {
                        let (one, zero) = if y == 1 { (pp, n) } else { (n, pp) };
                        let w: Vec<f64> = table.units[one]
                            .iter()
                            .zip(&table.units[zero])
                            .map(|(a, b)| scale * (a - b))
                            .collect();
                        acc += binary_xent(dot(hp, &w), y);
                    }
                }
            }
            cross += acc / (per * per * per) as f64;
        }
    }
    cross /= mf * mf;

    // same-class part: sum over y of P(y)^2 times the mean within-class term
    let mut same = 0.0;
    for class in [0u8, 1] {
        let members: Vec<usize> = (0..m).filter(|&i| world.labels[i] == class).collect();
        let weight = (members.len() as f64 / mf).powi(2);
        let mut term = 0.0;
        for &i in &members {
            for &j in &members {
                let mut acc = 0.0;
                for p in table.of_point(i) {
                    for pp in table.of_point(i) {
                        for n in table.of_point(j) {
                            let u = &table.units[p];
                            let gap = dot(u, &table.units[pp]) - dot(u, &table.units[n]);
                            acc += softplus(-gap);
                        }
                    }
                }
                term += acc / (per * per * per) as f64;
            }
        }
        same += weight * term / (members.len() * members.len()) as f64;
    }
    let rhs = cross + same;
    let diff = (lhs - rhs).abs();
    Ok(TheoremReport {
        theorem: "1".into(),
        inputs_digest: world.digest(noise),
        lhs: Some(lhs),
        rhs: Some(rhs),
        residuals: Vec::new(),
        slope: None,
        tolerance: Tolerance::Relative {
            bound: THEOREM1_TOLERANCE,
        },
        passed: diff <= THEOREM1_TOLERANCE * lhs.abs().max(1.0),
        notes: vec![format!("noise model {noise:?}, |lhs - rhs| = {diff:e}")],
    })
}

/// Derivative of the logistic function.
pub fn logistic_slope(q: f64) -> f64 {
    let s = sigmoid(q);
    s * (1.0 - s)
}

/// The three regularizer coefficients of the second-order expansion for a
/// linear model `f(x) = w.x`: first order in `|cos(w, x)|`, second order in
/// `cos^2 ||x||^2`, and the pool second-moment weight.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExpansionCoefficients {
    pub first: f64,
    pub second: f64,
    pub moment: f64,
}

pub fn expansion_coefficients(w: &[f64], x: &[f64], y: u8, alpha: f64) -> ExpansionCoefficients {
    let f = dot(w, x);
    let (nw, nx) = (norm(w), norm(x));
    let cos = if nw > 0.0 && nx > 0.0 { f / (nw * nx) } else { 0.0 };
    let slope = logistic_slope(f);
    ExpansionCoefficients {
        first: alpha * cos.abs() * (f64::from(y) - sigmoid(f)).abs() * nx,
        second: alpha * alpha / 2.0 * cos * cos * nx * nx * slope,
        moment: alpha * alpha / 2.0 * slope,
    }
}

fn check_expansion_inputs(w: &[f64], x: &[f64], y: u8, alphas: &[f64]) -> Result<()> {
    ensure!(w.len() == x.len(), "weight width {} vs input width {}", w.len(), x.len());
    ensure!(y <= 1, "label must be 0 or 1, got {y}");
    ensure!(!alphas.is_empty(), "no step sizes given");
    ensure!(alphas.iter().all(|&a| a > 0.0), "step sizes must be positive");
    let f = dot(w, x);
    ensure!(
        (2.0 * f64::from(y) - 1.0) * f >= 0.0,
        "sample is misclassified (label {y}, score {f}), the expansion assumes a correct sign"
    );
    Ok(())
}

/// Ordinary least squares slope of `log residual` against `log alpha`,
/// skipping residuals at the floating-point floor. `None` with fewer than two
/// usable points.
pub fn fit_log_slope(rows: &[ResidualRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.residual >= RESIDUAL_FLOOR)
        .map(|r| (r.alpha.ln(), r.residual.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

fn slope_verdict(rows: &[ResidualRow], window: (f64, f64)) -> (Option<f64>, bool) {
    let slope = fit_log_slope(rows);
    let passed = match slope {
        Some(s) => (window.0..=window.1).contains(&s),
        // nothing above the floor: the expansion is exact
        None => rows.iter().all(|r| r.residual < RESIDUAL_FLOOR),
    };
    (slope, passed)
}

/// Compares the exact pool average of the mixup-perturbed classification
/// loss with its second-order expansion, for each step size.
pub fn verify_theorem2_mixup(w: &[f64], x: &[f64], y: u8, pool: &Matrix, alphas: &[f64]) -> Result<TheoremReport> {
    check_expansion_inputs(w, x, y, alphas)?;
    ensure!(pool.rows() >= 1 && pool.cols() == x.len(), "pool must be non-empty with width {}", x.len());
    let mean = pool.col_means();
    ensure!(norm(&mean) <= 1e-10, "pool mean has norm {:e}, expected zero", norm(&mean));
    let f = dot(w, x);
    let nw = norm(w);
    // w' Sigma w with Sigma the pool second moment
    let projections: Vec<f64> = pool.row_iter().map(|p| dot(w, p)).collect();
    let quad = projections.iter().map(|p| p * p).sum::<f64>() / pool.rows() as f64;
    let base = binary_xent(f, y);

    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        let lhs = base
            + projections
                .iter()
                .map(|&p| binary_xent(f + alpha * (p - f), y) - base)
                .sum::<f64>()
                / pool.rows() as f64;
        let c = expansion_coefficients(w, x, y, alpha);
        let rhs = base + c.first * nw + c.second * nw * nw + c.moment * quad;
        rows.push(ResidualRow {
            alpha,
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
        });
    }
    let (slope, passed) = slope_verdict(&rows, MIXUP_SLOPE_WINDOW);
    let mut h = Sha256::new();
    h.update(b"2-mixup");
    feed(&mut h, w);
    feed(&mut h, x);
    h.update([y]);
    feed(&mut h, pool.as_slice());
    feed(&mut h, alphas);
    Ok(TheoremReport {
        theorem: "2-mixup".into(),
        inputs_digest: hex(&h.finalize()),
        lhs: None,
        rhs: None,
        residuals: rows,
        slope,
        tolerance: Tolerance::SlopeWindow {
            low: MIXUP_SLOPE_WINDOW.0,
            high: MIXUP_SLOPE_WINDOW.1,
        },
        passed,
        notes: vec!["left side by exact enumeration of the pool".into()],
    })
}

/// Gaussian counterpart of [`verify_theorem2_mixup`]. The expectation over
/// `N(0, sigma^2 I)` is estimated with `mc_pairs` antithetic pairs; the same
/// draws serve every step size.
pub fn verify_theorem2_gaussian(
    w: &[f64],
    x: &[f64],
    y: u8,
    sigma: f64,
    alphas: &[f64],
    mc_pairs: usize,
    rng: &mut RngState,
) -> Result<TheoremReport> {
    check_expansion_inputs(w, x, y, alphas)?;
    ensure!(sigma > 0.0, "noise scale must be positive, got {sigma}");
    ensure!(mc_pairs >= MIN_MC_PAIRS, "need at least {MIN_MC_PAIRS} pairs, got {mc_pairs}");
    let f = dot(w, x);
    let nw = norm(w);
    let mut h = Sha256::new();
    h.update(b"2-gaussian");
    feed(&mut h, w);
    feed(&mut h, x);
    h.update([y]);
    feed(&mut h, &[sigma]);
    feed(&mut h, alphas);
    h.update((mc_pairs as u64).to_le_bytes());
    h.update(rng.seed().to_le_bytes());
    h.update(rng.stream().to_le_bytes());

    // only w.x~ enters the loss, so each draw reduces to one projection
    let mut projections = Vec::with_capacity(mc_pairs);
    let mut draw = vec![0.0; w.len()];
    for _ in 0..mc_pairs {
        draw.iter_mut().for_each(|v| *v = sigma * rng.standard_normal());
        projections.push(dot(w, &draw));
    }
    let base = binary_xent(f, y);
    let mut rows = Vec::with_capacity(alphas.len());
    for &alpha in alphas {
        // averaging deviations from the unperturbed loss keeps the sum free
        // of a large common offset
        let lhs = base
            + projections
                .iter()
                .map(|&p| 0.5 * (binary_xent(f + alpha * p, y) + binary_xent(f - alpha * p, y)) - base)
                .sum::<f64>()
                / mc_pairs as f64;
        let c = expansion_coefficients(w, x, y, alpha);
        let rhs = base + sigma * sigma * c.moment * nw * nw;
        rows.push(ResidualRow {
            alpha,
            lhs,
            rhs,
            residual: (lhs - rhs).abs(),
        });
    }
    let (slope, passed) = slope_verdict(&rows, GAUSSIAN_SLOPE_WINDOW);
    Ok(TheoremReport {
        theorem: "2-gaussian".into(),
        inputs_digest: hex(&h.finalize()),
        lhs: None,
        rhs: None,
        residuals: rows,
        slope,
        tolerance: Tolerance::SlopeWindow {
            low: GAUSSIAN_SLOPE_WINDOW.0,
            high: GAUSSIAN_SLOPE_WINDOW.1,
        },
        passed,
        notes: vec![format!(
            "{mc_pairs} antithetic pairs shared across step sizes; odd orders cancel pairwise, \
             so the exact residual is fourth order and the sampling error of the second moment \
             adds a term quadratic in alpha"
        )],
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FunctionClass {
    /// `||w||^2 <= b`.
    L2,
    /// `w' Sigma w <= b` with `Sigma` the empirical second moment.
    Mixup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RademacherEstimate {
    pub class: FunctionClass,
    pub mean: f64,
    pub per_trial: Vec<f64>,
}

/// Monte Carlo empirical Rademacher complexity with the supremum over the
/// class in closed form. Two calls with equal `rng` states see the same sign
/// vectors.
pub fn empirical_rademacher(
    x: &Matrix,
    class: FunctionClass,
    b: f64,
    trials: usize,
    rng: &mut RngState,
) -> Result<RademacherEstimate> {
    let (n, d) = x.shape();
    ensure!(b > 0.0, "class radius must be positive, got {b}");
    ensure!(n >= 2, "need at least two samples, got {n}");
    ensure!(trials >= 1, "need at least one trial");
    ensure!(x.max_abs() > 0.0, "sample matrix is all zeros");
    let whitener = match class {
        FunctionClass::L2 => None,
        FunctionClass::Mixup => Some(linalg::pinv_sqrt(&linalg::second_moment(x))?),
    };
    let mut per_trial = Vec::with_capacity(trials);
    let mut avg = vec![0.0; d];
    for _ in 0..trials {
        avg.iter_mut().for_each(|v| *v = 0.0);
        for row in x.row_iter() {
            let sign = if rng.next_u64() & 1 == 1 { 1.0 } else { -1.0 };
            for (a, v) in avg.iter_mut().zip(row) {
                *a += sign * v;
            }
        }
        avg.iter_mut().for_each(|v| *v /= n as f64);
        let size = match &whitener {
            None => norm(&avg),
            Some(p) => norm(&p.row_iter().map(|r| dot(r, &avg)).collect::<Vec<_>>()),
        };
        per_trial.push(b.sqrt() * size);
    }
    Ok(RademacherEstimate {
        class,
        mean: per_trial.iter().sum::<f64>() / trials as f64,
        per_trial,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundComparison {
    /// `4 sqrt(b c_x d / n)`, the plain norm-ball bound.
    pub l2_bound: f64,
    /// `4 sqrt(b rank / n)`, the covariance-weighted bound.
    pub mixup_bound: f64,
    pub rank: usize,
}

impl BoundComparison {
    pub fn ratio(&self) -> f64 {
        self.mixup_bound / self.l2_bound
    }
}

/// Closed-form generalization bounds with unit Lipschitz constant.
pub fn bound_compare(x: &Matrix, b: f64, c_x: f64) -> Result<BoundComparison> {
    let (n, d) = x.shape();
    ensure!(n >= 1 && d >= 1, "empty sample matrix");
    ensure!(b > 0.0, "class radius must be positive, got {b}");
    for (i, row) in x.row_iter().enumerate() {
        for (k, v) in row.iter().enumerate() {
            ensure!(
                v * v <= c_x,
                "c_x = {c_x} is below the squared entry {} at row {i}, column {k}",
                v * v
            );
        }
    }
    let (eig, _) = linalg::sym_eigen(&linalg::second_moment(x))?;
    let rank = linalg::numerical_rank(&eig);
    Ok(BoundComparison {
        l2_bound: 4.0 * (b * c_x * d as f64 / n as f64).sqrt(),
        mixup_bound: 4.0 * (b * rank as f64 / n as f64).sqrt(),
        rank,
    })
}

/// Worst relative error found by [`grad_check_harness`] and where.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative errors are taken against at least this magnitude; exactly-zero
/// gradients (biases feeding batchnorm) otherwise turn rounding noise into
/// order-one relative error.
pub const GRAD_CHECK_FLOOR: f64 = 1e-3;

fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR)
}

/// Central-difference check of every encoder, head and input gradient of
/// `nt_xent(head(encoder(x)))` in train mode on a random batch of `batch`
/// rows.
pub fn grad_check_harness(
    encoder: &MlpSpec,
    head: Option<&MlpSpec>,
    seed: u64,
    h_step: f64,
    batch: usize,
) -> Result<GradCheck> {
    grad_check_inner(encoder, head, seed, h_step, batch, None)
}

pub(crate) fn grad_check_inner(
    encoder: &MlpSpec,
    head: Option<&MlpSpec>,
    seed: u64,
    h_step: f64,
    batch: usize,
    corrupt: Option<(usize, f64)>,
) -> Result<GradCheck> {
    ensure!((1e-7..=1e-3).contains(&h_step), "finite-difference step {h_step} outside [1e-7, 1e-3]");
    ensure!(batch >= 2 && batch % 2 == 0, "batch must be even and at least 2, got {batch}");
    if let Some(hs) = head {
        ensure!(
            hs.input_dim() == encoder.output_dim(),
            "head expects width {}, encoder gives {}",
            hs.input_dim(),
            encoder.output_dim()
        );
    }
    let mut rng = RngState::substream(seed, 0);
    let mut enc = MlpParams::init(encoder, &mut rng);
    let mut hd = head.map(|s| MlpParams::init(s, &mut rng));
    // move batchnorm away from the identity so its gradients are exercised
    for net in std::iter::once(&mut enc).chain(hd.as_mut()) {
        for layer in &mut net.layers {
            layer.bias.iter_mut().for_each(|b| *b = 0.1 * rng.standard_normal());
            if let Some(bn) = &mut layer.bn {
                bn.gamma.iter_mut().for_each(|g| *g = 1.0 + 0.2 * rng.standard_normal());
                bn.beta.iter_mut().for_each(|b| *b = 0.1 * rng.standard_normal());
            }
        }
    }
    let cols = encoder.input_dim();
    let mut x = Matrix::from_vec(batch, cols, (0..batch * cols).map(|_| rng.standard_normal()).collect())?;

    let loss_of = |enc: &MlpParams, hd: &Option<MlpParams>, x: &Matrix| -> Result<f64> {
        let (z, _) = enc.forward_train_pure(x, None)?;
        let z = match hd {
            Some(h) => h.forward_train_pure(&z, None)?.0,
            None => z,
        };
        Ok(nt_xent(&z, 1.0)?.0)
    };

    let (z, enc_cache) = enc.forward_train_pure(&x, None)?;
    let (out, head_cache) = match &hd {
        Some(h) => {
            let (o, c) = h.forward_train_pure(&z, None)?;
            (o, Some(c))
        }
        None => (z, None),
    };
    let (_, dout) = nt_xent(&out, 1.0)?;
    let (head_grads, dz) = match (&hd, &head_cache) {
        (Some(h), Some(c)) => {
            let (g, dz) = h.backward(c, &dout)?;
            (Some(g.flatten()), dz)
        }
        _ => (None, dout),
    };
    let (enc_grads, dx) = enc.backward(&enc_cache, &dz)?;
    let mut enc_grads = enc_grads.flatten();
    if let Some((index, amount)) = corrupt {
        enc_grads[index] += amount;
    }

    let mut worst = (0.0, String::new());
    let mut checked = 0;
    let mut record = |name: String, analytic: f64, plus: f64, minus: f64| {
        let numeric = (plus - minus) / (2.0 * h_step);
        let err = rel_error(analytic, numeric);
        if err > worst.0 || checked == 0 {
            worst = (err, name);
        }
        checked += 1;
    };

    for (i, &g) in enc_grads.iter().enumerate() {
        let orig = *enc.param_mut(i);
        *enc.param_mut(i) = orig + h_step;
        let plus = loss_of(&enc, &hd, &x)?;
        *enc.param_mut(i) = orig - h_step;
        let minus = loss_of(&enc, &hd, &x)?;
        *enc.param_mut(i) = orig;
        record(format!("encoder param {i}"), g, plus, minus);
    }
    if let Some(grads) = head_grads {
        for (i, &g) in grads.iter().enumerate() {
            let net = hd.as_mut().expect("head present");
            let orig = *net.param_mut(i);
            *net.param_mut(i) = orig + h_step;
            let plus = loss_of(&enc, &hd, &x)?;
            *hd.as_mut().expect("head present").param_mut(i) = orig - h_step;
            let minus = loss_of(&enc, &hd, &x)?;
            *hd.as_mut().expect("head present").param_mut(i) = orig;
            record(format!("head param {i}"), g, plus, minus);
        }
    }
    for r in 0..batch {
        for c in 0..cols {
            let orig = x.get(r, c);
            x.set(r, c, orig + h_step);
            let plus = loss_of(&enc, &hd, &x)?;
            x.set(r, c, orig - h_step);
            let minus = loss_of(&enc, &hd, &x)?;
            x.set(r, c, orig);
            record(format!("input ({r}, {c})"), dx.get(r, c), plus, minus);
        }
    }
    Ok(GradCheck {
        max_rel_error: worst.0,
        worst: worst.1,
        checked,
    })
}
