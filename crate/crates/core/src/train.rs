//! Contrastive pretraining, linear evaluation and the supervised and
//! untrained-encoder baselines.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{make_positive_pair, sample_lambda, sample_partner, NoiseKind, NoisePolicy};
use crate::data::Dataset;
use crate::error::{ensure, Error, Result};
use crate::loss::{argmax_rows, nt_xent, softmax_xent};
use crate::math::{Matrix, RngState};
use crate::model::{HiddenMix, MlpParams, MlpSpec, Mode};
use crate::optim::{lars_step, scaled_lr, schedule_lr, OptimHyper, OptimState};

/// Where positives are formed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum MixSpace {
    Input,
    /// Linear mixing of the input to encoder layer `layer` (1-based hidden
    /// layer index; the output of encoder layer `layer - 1`).
    Hidden { layer: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_ratio: f64,
    pub warmup_epochs: usize,
    pub optim: OptimHyper,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 256,
            lr_ratio: 1.0,
            warmup_epochs: 0,
            optim: OptimHyper {
                weight_decay: 0.0,
                ..OptimHyper::default()
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Encoder output widths; the input width comes from the data.
    pub encoder_widths: Vec<usize>,
    /// Projection head output widths; its input is the encoder output.
    pub head_widths: Vec<usize>,
    pub noise: NoisePolicy,
    pub temperature: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Base learning rate is `lr_ratio * batch_size / 256`.
    pub lr_ratio: f64,
    pub warmup_epochs: usize,
    pub optim: OptimHyper,
    pub seed: u64,
    pub mix_space: MixSpace,
    pub eval: EvalConfig,
    /// Record wall-clock seconds in metrics. Off by default so that repeated
    /// runs produce byte-identical metric files.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            encoder_widths: vec![256, 256, 256, 256],
            head_widths: vec![256, 256, 128],
            noise: NoisePolicy::default(),
            temperature: 1.0,
            batch_size: 256,
            epochs: 100,
            lr_ratio: 1.0,
            warmup_epochs: 10,
            optim: OptimHyper::default(),
            seed: 0,
            mix_space: MixSpace::Input,
            eval: EvalConfig::default(),
            timing: false,
        }
    }
}

impl TrainConfig {
    pub fn encoder_spec(&self, input_dim: usize) -> Result<MlpSpec> {
        let mut widths = vec![input_dim];
        widths.extend(&self.encoder_widths);
        MlpSpec::encoder(widths)
    }

    pub fn head_spec(&self) -> Result<MlpSpec> {
        let mut widths = vec![*self.encoder_widths.last().unwrap_or(&0)];
        widths.extend(&self.head_widths);
        MlpSpec::head(widths)
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 2, "batch_size must be at least 2, got {}", self.batch_size);
        ensure!(self.temperature > 0.0, "temperature must be positive, got {}", self.temperature);
        ensure!(!self.encoder_widths.is_empty(), "encoder_widths is empty");
        ensure!(!self.head_widths.is_empty(), "head_widths is empty");
        ensure!(self.lr_ratio >= 0.0, "lr_ratio must be nonnegative");
        ensure!(self.eval.batch_size >= 1, "eval batch_size must be positive");
        self.noise.validate()?;
        if let MixSpace::Hidden { layer } = self.mix_space {
            ensure!(
                layer >= 1 && layer < self.encoder_widths.len(),
                "hidden mix layer must lie in 1..{}, got {layer}",
                self.encoder_widths.len()
            );
            ensure!(
                self.noise.kind == NoiseKind::Linear,
                "hidden-layer mixing supports linear noise only"
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub phase: String,
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub accuracy: Option<f64>,
    pub seconds: f64,
}

pub type MetricsSink<'a> = &'a mut dyn FnMut(&MetricsRecord) -> Result<()>;

struct Clock {
    start: Instant,
    enabled: bool,
}

impl Clock {
    fn new(enabled: bool) -> Self {
        Self {
            start: Instant::now(),
            enabled,
        }
    }

    fn seconds(&self) -> f64 {
        if self.enabled {
            self.start.elapsed().as_secs_f64()
        } else {
            0.0
        }
    }
}

pub struct PretrainOutput {
    pub encoder: MlpParams,
    pub head: MlpParams,
    pub metrics: Vec<MetricsRecord>,
}

/// How the two positives of an anchor are produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Positives {
    /// The configured noise policy and mixing space.
    Noise,
    /// Both positives are exact copies of the anchor (the reference for the
    /// `lambda -> 1` limit). Random draws are still consumed identically.
    Duplicate,
}

const SHUFFLE_STREAM: u64 = 0;
const INIT_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;
const CLASSIFIER_INIT_STREAM: u64 = 3;
/// Per-anchor streams start here.
const ANCHOR_STREAM_BASE: u64 = 1 << 32;

pub fn pretrain(cfg: &TrainConfig, ds: &Dataset) -> Result<PretrainOutput> {
    let mut metrics = Vec::new();
    let (encoder, head) = pretrain_with(cfg, ds, Positives::Noise, &mut |r| {
        metrics.push(r.clone());
        Ok(())
    })?;
    Ok(PretrainOutput {
        encoder,
        head,
        metrics,
    })
}

/// Contrastive pretraining. Only `ds.features` is read.
pub fn pretrain_with(
    cfg: &TrainConfig,
    ds: &Dataset,
    positives: Positives,
    sink: MetricsSink,
) -> Result<(MlpParams, MlpParams)> {
    cfg.validate()?;
    let x = &ds.features;
    let n = cfg.batch_size;
    ensure!(
        x.rows() >= n,
        "pretraining needs at least one full batch of {n} rows, dataset has {}",
        x.rows()
    );
    if cfg.noise.uses_geometric() {
        if let Some(pos) = x.as_slice().iter().position(|&v| v < 0.0) {
            return Err(Error::domain(format!(
                "geometric mixing needs nonnegative features; row {}, column {} is {}",
                pos / x.cols(),
                pos % x.cols(),
                x.as_slice()[pos]
            )));
        }
    }
    let mut init_rng = RngState::substream(cfg.seed, INIT_STREAM);
    let mut encoder = MlpParams::init(&cfg.encoder_spec(x.cols())?, &mut init_rng);
    let mut head = MlpParams::init(&cfg.head_spec()?, &mut init_rng);
    let mut enc_state = OptimState::new(cfg.optim);
    let mut head_state = OptimState::new(cfg.optim);
    let mut shuffle_rng = RngState::substream(cfg.seed, SHUFFLE_STREAM);

    let steps_per_epoch = x.rows() / n;
    let total = steps_per_epoch * cfg.epochs;
    let warmup = steps_per_epoch * cfg.warmup_epochs;
    let base_lr = scaled_lr(cfg.lr_ratio, n);
    let clock = Clock::new(cfg.timing);
    let mut global = 0usize;
    for epoch in 0..cfg.epochs {
        let order = shuffle_rng.permutation(x.rows());
        for step in 0..steps_per_epoch {
            let anchors = x.select_rows(&order[step * n..(step + 1) * n]);
            let first_stream = ANCHOR_STREAM_BASE + (global * n) as u64;
            let (inputs, mix) = build_views(cfg, &anchors, first_stream, positives)?;

            let (h, enc_cache) = match &mix {
                Some(m) => encoder.forward_mixed_hidden(&inputs, m, Mode::Train)?,
                None => encoder.forward(&inputs, Mode::Train)?,
            };
            let (z, head_cache) = head.forward(&h, Mode::Train)?;
            let (loss, dz) = nt_xent(&z, cfg.temperature)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("pretraining loss at epoch {epoch}, step {step}"),
                });
            }
            let (head_grads, dh) = head.backward(&head_cache.unwrap(), &dz)?;
            let (enc_grads, _) = encoder.backward(&enc_cache.unwrap(), &dh)?;
            let lr = schedule_lr(global, total, warmup, base_lr)?;
            lars_step(&mut encoder.tensors(&enc_grads)?, &mut enc_state, lr)?;
            lars_step(&mut head.tensors(&head_grads)?, &mut head_state, lr)?;
            sink(&MetricsRecord {
                phase: "pretrain".into(),
                epoch,
                step: global,
                loss,
                lr,
                accuracy: None,
                seconds: clock.seconds(),
            })?;
            global += 1;
        }
    }
    Ok((encoder, head))
}

/// The `2N` rows fed to the encoder: rows `2k` and `2k + 1` belong to
/// anchor `k`. Hidden-space mixing returns duplicated anchors plus the plan.
fn build_views(
    cfg: &TrainConfig,
    anchors: &Matrix,
    first_stream: u64,
    positives: Positives,
) -> Result<(Matrix, Option<HiddenMix>)> {
    let n = anchors.rows();
    let mut rows = Matrix::zeros(2 * n, anchors.cols());
    let mut owner = Vec::with_capacity(2 * n);
    let mut plan = HiddenMix {
        layer: 0,
        partners: Vec::with_capacity(2 * n),
        lambdas: Vec::with_capacity(2 * n),
    };
    for k in 0..n {
        let mut rng = RngState::substream(cfg.seed, first_stream + k as u64);
        match cfg.mix_space {
            MixSpace::Input => {
                let pair = make_positive_pair(anchors, k, &cfg.noise, &mut rng)?;
                for (slot, p) in pair.iter().enumerate() {
                    let values = match positives {
                        Positives::Noise => p.values.as_slice(),
                        Positives::Duplicate => anchors.row(k),
                    };
                    rows.row_mut(2 * k + slot).copy_from_slice(values);
                }
            }
            MixSpace::Hidden { .. } => {
                for slot in 0..2 {
                    let partner = sample_partner(n, k, &mut rng)?;
                    let lambda = sample_lambda(&mut rng, cfg.noise.alpha)?;
                    rows.row_mut(2 * k + slot).copy_from_slice(anchors.row(k));
                    // mix with the partner anchor's first copy
                    plan.partners.push(2 * partner);
                    plan.lambdas.push(match positives {
                        Positives::Noise => lambda,
                        Positives::Duplicate => 1.0,
                    });
                }
            }
        }
        owner.extend([k, k]);
    }
    debug_assert!(owner.chunks(2).enumerate().all(|(k, c)| c == [k, k]));
    let mix = match cfg.mix_space {
        MixSpace::Input => None,
        MixSpace::Hidden { layer } => Some(HiddenMix { layer, ..plan }),
    };
    Ok((rows, mix))
}

pub struct EvalOutcome {
    pub accuracy: f64,
    pub metrics: Vec<MetricsRecord>,
}

fn num_classes(train: &Dataset, test: &Dataset) -> Result<usize> {
    let c = train.num_classes().max(test.num_classes());
    ensure!(c >= 2, "classification needs at least 2 classes, found {c}");
    Ok(c)
}

fn accuracy(predicted: &[usize], labels: &[usize]) -> f64 {
    let hits = predicted.iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

fn eval_features(encoder: &MlpParams, x: &Matrix) -> Result<Matrix> {
    encoder.forward_eval(x)
}

/// Trains a linear classifier on frozen encoder features (running
/// statistics, no updates) and reports test accuracy in `[0, 1]`.
pub fn linear_eval(
    encoder: &MlpParams,
    train: &Dataset,
    test: &Dataset,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<EvalOutcome> {
    let train_labels = train.labels()?;
    let test_labels = test.labels()?;
    let classes = num_classes(train, test)?;
    ensure!(cfg.epochs >= 1, "linear evaluation needs at least one epoch");
    let feats = eval_features(encoder, &train.features)?;
    let test_feats = eval_features(encoder, &test.features)?;

    // A zero start would pin the trust ratio at zero after the first step.
    let mut init_rng = RngState::substream(seed, CLASSIFIER_INIT_STREAM);
    let mut clf = MlpParams::init(&MlpSpec::linear(feats.cols(), classes)?, &mut init_rng);
    let mut state = OptimState::new(cfg.optim);
    let mut rng = RngState::substream(seed, EVAL_STREAM);
    let b = cfg.batch_size.min(feats.rows());
    let steps_per_epoch = feats.rows().div_ceil(b);
    let total = steps_per_epoch * cfg.epochs;
    let warmup = (steps_per_epoch * cfg.warmup_epochs).min(total - 1);
    let base_lr = scaled_lr(cfg.lr_ratio, b);
    let mut metrics = Vec::new();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(feats.rows());
        for chunk in order.chunks(b) {
            let xb = feats.select_rows(chunk);
            let yb: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let (logits, cache) = clf.forward_train_pure(&xb, None)?;
            let (loss, dlogits) = softmax_xent(&logits, &yb)?;
            let (grads, _) = clf.backward(&cache, &dlogits)?;
            let lr = schedule_lr(global, total, warmup, base_lr)?;
            lars_step(&mut clf.tensors(&grads)?, &mut state, lr)?;
            metrics.push(MetricsRecord {
                phase: "linear_eval".into(),
                epoch,
                step: global,
                loss,
                lr,
                accuracy: None,
                seconds: 0.0,
            });
            global += 1;
        }
    }
    let predicted = argmax_rows(&clf.forward_eval(&test_feats)?);
    let acc = accuracy(&predicted, test_labels);
    metrics.push(MetricsRecord {
        phase: "linear_eval".into(),
        epoch: cfg.epochs.saturating_sub(1),
        step: global,
        loss: metrics.last().map_or(0.0, |m| m.loss),
        lr: 0.0,
        accuracy: Some(acc),
        seconds: 0.0,
    });
    Ok(EvalOutcome {
        accuracy: acc,
        metrics,
    })
}

/// Linear evaluation of a freshly initialized, untrained encoder.
pub fn no_pretrain_eval(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<EvalOutcome> {
    cfg.validate()?;
    let mut init_rng = RngState::substream(cfg.seed, INIT_STREAM);
    let encoder = MlpParams::init(&cfg.encoder_spec(train.dim())?, &mut init_rng);
    linear_eval(&encoder, train, test, &cfg.eval, cfg.seed)
}

/// Encoder and linear classifier trained end to end on labels with the
/// pretraining schedule; returns test accuracy.
pub fn supervised_train(cfg: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<EvalOutcome> {
    cfg.validate()?;
    let labels = train.labels()?;
    let test_labels = test.labels()?;
    let classes = num_classes(train, test)?;
    let x = &train.features;
    let n = cfg.batch_size.min(x.rows());
    ensure!(n >= 2, "supervised training needs at least 2 rows");
    let mut init_rng = RngState::substream(cfg.seed, INIT_STREAM);
    let mut encoder = MlpParams::init(&cfg.encoder_spec(x.cols())?, &mut init_rng);
    let mut clf_rng = RngState::substream(cfg.seed, CLASSIFIER_INIT_STREAM);
    let mut clf = MlpParams::init(&MlpSpec::linear(encoder.spec.output_dim(), classes)?, &mut clf_rng);
    let mut enc_state = OptimState::new(cfg.optim);
    let mut clf_state = OptimState::new(cfg.optim);
    let mut rng = RngState::substream(cfg.seed, SHUFFLE_STREAM);
    let steps_per_epoch = x.rows() / n;
    let total = (steps_per_epoch * cfg.epochs).max(1);
    let warmup = (steps_per_epoch * cfg.warmup_epochs).min(total - 1);
    let base_lr = scaled_lr(cfg.lr_ratio, n);
    let clock = Clock::new(cfg.timing);
    let mut metrics = Vec::new();
    let mut global = 0;
    for epoch in 0..cfg.epochs {
        let order = rng.permutation(x.rows());
        for step in 0..steps_per_epoch {
            let idx = &order[step * n..(step + 1) * n];
            let xb = x.select_rows(idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (h, enc_cache) = encoder.forward(&xb, Mode::Train)?;
            let (logits, clf_cache) = clf.forward(&h, Mode::Train)?;
            let (loss, dlogits) = softmax_xent(&logits, &yb)?;
            let (clf_grads, dh) = clf.backward(&clf_cache.unwrap(), &dlogits)?;
            let (enc_grads, _) = encoder.backward(&enc_cache.unwrap(), &dh)?;
            let lr = schedule_lr(global, total, warmup, base_lr)?;
            lars_step(&mut encoder.tensors(&enc_grads)?, &mut enc_state, lr)?;
            lars_step(&mut clf.tensors(&clf_grads)?, &mut clf_state, lr)?;
            metrics.push(MetricsRecord {
                phase: "supervised".into(),
                epoch,
                step: global,
                loss,
                lr,
                accuracy: None,
                seconds: clock.seconds(),
            });
            global += 1;
        }
    }
    let logits = clf.forward_eval(&encoder.forward_eval(&test.features)?)?;
    let acc = accuracy(&argmax_rows(&logits), test_labels);
    Ok(EvalOutcome { accuracy: acc, metrics })
}
