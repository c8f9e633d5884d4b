//! Fully connected networks: linear -> batchnorm -> ReLU per layer, with
//! analytic backward passes, mixing of hidden rows and a binary checkpoint
//! format.
//!
//! Weights are stored `in x out`, so a layer computes `X W + b` on a batch
//! of row vectors.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{ensure, Error, Result};
use crate::math::{Matrix, RngState};

pub const BN_EPS: f64 = 1e-5;
/// Weight on the old value in the running-statistics update.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Input width followed by each layer's output width.
    pub widths: Vec<usize>,
    /// Batchnorm flag per layer.
    pub batchnorm: Vec<bool>,
    /// The last layer is a bare linear map (no batchnorm, no ReLU).
    pub final_linear_only: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, batchnorm: Vec<bool>, final_linear_only: bool) -> Result<Self> {
        ensure!(widths.len() >= 2, "a network needs at least 2 widths, got {}", widths.len());
        ensure!(widths.iter().all(|&w| w > 0), "widths must be positive: {widths:?}");
        ensure!(
            batchnorm.len() == widths.len() - 1,
            "{} batchnorm flags for {} layers",
            batchnorm.len(),
            widths.len() - 1
        );
        ensure!(
            !(final_linear_only && *batchnorm.last().unwrap()),
            "a linear-only final layer cannot carry batchnorm"
        );
        Ok(Self {
            widths,
            batchnorm,
            final_linear_only,
        })
    }

    /// Batchnorm and ReLU on every layer.
    pub fn encoder(widths: Vec<usize>) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        Self::new(widths, vec![true; layers], false)
    }

    /// Batchnorm and ReLU on hidden layers, plain linear output.
    pub fn head(widths: Vec<usize>) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        let mut bn = vec![true; layers];
        if let Some(last) = bn.last_mut() {
            *last = false;
        }
        Self::new(widths, bn, true)
    }

    /// ReLU between layers, no batchnorm, linear output.
    pub fn plain(widths: Vec<usize>) -> Result<Self> {
        let layers = widths.len().saturating_sub(1);
        Self::new(widths, vec![false; layers], true)
    }

    pub fn linear(input: usize, output: usize) -> Result<Self> {
        Self::plain(vec![input, output])
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    fn activated(&self, layer: usize) -> bool {
        !(self.final_linear_only && layer + 1 == self.num_layers())
    }

    fn any_batchnorm(&self) -> bool {
        self.batchnorm.iter().any(|&b| b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub bn: Option<BatchNorm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Row mixing applied to the input of layer `layer` (0 mixes raw inputs):
/// row `i` becomes `lambdas[i] * v_i + (1 - lambdas[i]) * v_{partners[i]}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenMix {
    pub layer: usize,
    pub partners: Vec<usize>,
    pub lambdas: Vec<f64>,
}

#[derive(Clone, Debug)]
struct LayerCache {
    /// Layer input after any mixing.
    input: Matrix,
    /// Normalized pre-activation, when the layer has batchnorm.
    xhat: Option<Matrix>,
    mean: Vec<f64>,
    var: Vec<f64>,
    inv_std: Vec<f64>,
    output: Matrix,
}

/// Everything a train-mode forward leaves for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    mix: Option<HiddenMix>,
}

impl ForwardCache {
    /// Batch mean and (biased) variance used by layer `l`'s batchnorm.
    pub fn batch_stats(&self, l: usize) -> Option<(&[f64], &[f64])> {
        let c = self.layers.get(l)?;
        c.xhat.as_ref().map(|_| (c.mean.as_slice(), c.var.as_slice()))
    }

    /// Normalized pre-activation of layer `l` (before gamma and beta).
    pub fn normalized(&self, l: usize) -> Option<&Matrix> {
        self.layers.get(l)?.xhat.as_ref()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerGrads {
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub gamma: Option<Vec<f64>>,
    pub beta: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<LayerGrads>,
}

impl MlpGrads {
    /// All gradient entries in parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for g in &self.layers {
            out.extend_from_slice(g.weight.as_slice());
            out.extend_from_slice(&g.bias);
            if let (Some(gamma), Some(beta)) = (&g.gamma, &g.beta) {
                out.extend_from_slice(gamma);
                out.extend_from_slice(beta);
            }
        }
        out
    }
}

fn col_sums(m: &Matrix) -> Vec<f64> {
    let mut s = vec![0.0; m.cols()];
    for row in m.row_iter() {
        for (acc, v) in s.iter_mut().zip(row) {
            *acc += v;
        }
    }
    s
}

fn apply_mix(v: &Matrix, mix: &HiddenMix) -> Matrix {
    let mut out = v.clone();
    for (i, (&p, &l)) in mix.partners.iter().zip(&mix.lambdas).enumerate() {
        let (a, b) = (v.row(i), v.row(p));
        for (o, (x, y)) in out.row_mut(i).iter_mut().zip(a.iter().zip(b)) {
            *o = l * x + (1.0 - l) * y;
        }
    }
    out
}

/// Gradient through `apply_mix`: both operands receive their share.
fn unmix_grad(dmixed: &Matrix, mix: &HiddenMix) -> Matrix {
    let mut out = Matrix::zeros(dmixed.rows(), dmixed.cols());
    for (i, (&p, &l)) in mix.partners.iter().zip(&mix.lambdas).enumerate() {
        let d = dmixed.row(i).to_vec();
        for (o, v) in out.row_mut(i).iter_mut().zip(&d) {
            *o += l * v;
        }
        for (o, v) in out.row_mut(p).iter_mut().zip(&d) {
            *o += (1.0 - l) * v;
        }
    }
    out
}

impl MlpParams {
    /// He initialization: weights `N(0, 2 / fan_in)`, zero biases, identity
    /// batchnorm, running statistics `(0, 1)`.
    pub fn init(spec: &MlpSpec, rng: &mut RngState) -> Self {
        let layers = (0..spec.num_layers())
            .map(|l| {
                let (fan_in, fan_out) = (spec.widths[l], spec.widths[l + 1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out).map(|_| std * rng.standard_normal()).collect();
                Layer {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("finite init"),
                    bias: vec![0.0; fan_out],
                    bn: spec.batchnorm[l].then(|| BatchNorm::new(fan_out)),
                }
            })
            .collect();
        Self {
            spec: spec.clone(),
            layers,
        }
    }

    /// Every weight zero; batchnorm still identity.
    pub fn zeros(spec: &MlpSpec) -> Self {
        let mut p = Self::init(spec, &mut RngState::new(0));
        for layer in &mut p.layers {
            layer.weight = Matrix::zeros(layer.weight.rows(), layer.weight.cols());
        }
        p
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.weight.as_slice().len() + l.bias.len() + l.bn.as_ref().map_or(0, |b| 2 * b.gamma.len())
            })
            .sum()
    }

    fn check_input(&self, x: &Matrix, mode: Mode) -> Result<()> {
        ensure!(
            x.cols() == self.spec.input_dim(),
            "network expects {} input features, got {}",
            self.spec.input_dim(),
            x.cols()
        );
        ensure!(x.rows() >= 1, "empty batch");
        if mode == Mode::Train && self.spec.any_batchnorm() {
            ensure!(
                x.rows() >= 2,
                "train-mode batchnorm needs at least 2 rows, got {}",
                x.rows()
            );
        }
        Ok(())
    }

    fn check_mix(&self, rows: usize, mix: &HiddenMix) -> Result<()> {
        ensure!(
            mix.layer < self.spec.num_layers(),
            "mix layer {} out of range for {} layers",
            mix.layer,
            self.spec.num_layers()
        );
        ensure!(
            mix.partners.len() == rows && mix.lambdas.len() == rows,
            "mixing plan covers {} / {} rows of a {rows}-row batch",
            mix.partners.len(),
            mix.lambdas.len()
        );
        for (i, (&p, &l)) in mix.partners.iter().zip(&mix.lambdas).enumerate() {
            ensure!(p < rows, "row {i} mixes with out-of-range row {p}");
            ensure!(p != i, "row {i} is mixed with itself");
            ensure!((0.0..=1.0).contains(&l), "row {i} has mixing weight {l} outside [0, 1]");
        }
        Ok(())
    }

    /// Core pass. Never touches `self`; train mode normalizes with batch
    /// statistics and records a cache.
    fn propagate(
        &self,
        x: &Matrix,
        mode: Mode,
        mix: Option<&HiddenMix>,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        self.check_input(x, mode)?;
        if let Some(m) = mix {
            self.check_mix(x.rows(), m)?;
        }
        let train = mode == Mode::Train;
        let mut caches = Vec::new();
        let mut cur = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            if let Some(m) = mix.filter(|m| m.layer == l) {
                cur = apply_mix(&cur, m);
            }
            let mut a = cur.dot(&layer.weight);
            for row in 0..a.rows() {
                for (v, b) in a.row_mut(row).iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let (mut xhat, mut mean, mut var, mut inv_std) = (None, Vec::new(), Vec::new(), Vec::new());
            if let Some(bn) = &layer.bn {
                let n = a.rows() as f64;
                if train {
                    mean = col_sums(&a).into_iter().map(|s| s / n).collect();
                    var = vec![0.0; a.cols()];
                    for row in a.row_iter() {
                        for ((acc, v), m) in var.iter_mut().zip(row).zip(&mean) {
                            *acc += (v - m) * (v - m);
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= n);
                } else {
                    mean = bn.running_mean.clone();
                    var = bn.running_var.clone();
                }
                inv_std = var.iter().map(|v| 1.0 / (v + bn.eps).sqrt()).collect();
                let mut norm = if train { Some(Matrix::zeros(a.rows(), a.cols())) } else { None };
                for i in 0..a.rows() {
                    let row = a.row_mut(i);
                    for j in 0..row.len() {
                        let z = (row[j] - mean[j]) * inv_std[j];
                        row[j] = bn.gamma[j] * z + bn.beta[j];
                        if let Some(m) = norm.as_mut() {
                            m.row_mut(i)[j] = z;
                        }
                    }
                }
                xhat = norm;
            }
            if self.spec.activated(l) {
                a.as_mut_slice().iter_mut().for_each(|v| *v = v.max(0.0));
            }
            if train {
                caches.push(LayerCache {
                    input: cur,
                    xhat,
                    mean,
                    var,
                    inv_std,
                    output: a.clone(),
                });
            }
            cur = a;
        }
        if !cur.is_finite() {
            return Err(Error::NonFinite {
                context: "network forward pass".into(),
            });
        }
        let cache = train.then(|| ForwardCache {
            layers: caches,
            mix: mix.cloned(),
        });
        Ok((cur, cache))
    }

    fn update_running_stats(&mut self, cache: &ForwardCache) {
        for (layer, c) in self.layers.iter_mut().zip(&cache.layers) {
            if let Some(bn) = &mut layer.bn {
                let n = c.input.rows() as f64;
                // running variance tracks the unbiased estimate
                let correction = n / (n - 1.0);
                for j in 0..bn.running_mean.len() {
                    bn.running_mean[j] = bn.momentum * bn.running_mean[j] + (1.0 - bn.momentum) * c.mean[j];
                    bn.running_var[j] =
                        bn.momentum * bn.running_var[j] + (1.0 - bn.momentum) * c.var[j] * correction;
                }
            }
        }
    }

    /// Train mode updates running statistics and returns a cache; eval mode
    /// leaves the parameters untouched.
    pub fn forward(&mut self, x: &Matrix, mode: Mode) -> Result<(Matrix, Option<ForwardCache>)> {
        self.forward_mixed(x, None, mode)
    }

    pub fn forward_mixed_hidden(
        &mut self,
        x: &Matrix,
        mix: &HiddenMix,
        mode: Mode,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        self.forward_mixed(x, Some(mix), mode)
    }

    fn forward_mixed(
        &mut self,
        x: &Matrix,
        mix: Option<&HiddenMix>,
        mode: Mode,
    ) -> Result<(Matrix, Option<ForwardCache>)> {
        let (out, cache) = self.propagate(x, mode, mix)?;
        if let Some(c) = &cache {
            self.update_running_stats(c);
        }
        Ok((out, cache))
    }

    pub fn forward_eval(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.propagate(x, Mode::Eval, None)?.0)
    }

    /// Train-mode pass that does not advance running statistics.
    pub fn forward_train_pure(
        &self,
        x: &Matrix,
        mix: Option<&HiddenMix>,
    ) -> Result<(Matrix, ForwardCache)> {
        let (out, cache) = self.propagate(x, Mode::Train, mix)?;
        Ok((out, cache.expect("train mode yields a cache")))
    }

    /// Gradients of the parameters and of the (pre-mixing) inputs, given
    /// the gradient `dh` of the output.
    pub fn backward(&self, cache: &ForwardCache, dh: &Matrix) -> Result<(MlpGrads, Matrix)> {
        ensure!(
            cache.layers.len() == self.layers.len(),
            "cache has {} layers, network has {}",
            cache.layers.len(),
            self.layers.len()
        );
        let last = cache.layers.last().unwrap();
        ensure!(
            dh.shape() == last.output.shape(),
            "output gradient is {:?}, forward output was {:?}",
            dh.shape(),
            last.output.shape()
        );
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dout = dh.clone();
        for l in (0..self.layers.len()).rev() {
            let (layer, c) = (&self.layers[l], &cache.layers[l]);
            ensure!(
                c.input.cols() == layer.weight.rows() && c.output.cols() == layer.weight.cols(),
                "cache for layer {l} does not match its weights"
            );
            if self.spec.activated(l) {
                for (d, o) in dout.as_mut_slice().iter_mut().zip(c.output.as_slice()) {
                    if *o <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            let (mut dgamma, mut dbeta) = (None, None);
            let da = match (&layer.bn, &c.xhat) {
                (Some(bn), Some(xhat)) => {
                    let n = dout.rows() as f64;
                    let width = dout.cols();
                    let mut dg = vec![0.0; width];
                    let db = col_sums(&dout);
                    // d xhat = dout * gamma
                    let mut dxhat = dout.clone();
                    for i in 0..dxhat.rows() {
                        let (row, xrow) = (dxhat.row_mut(i), xhat.row(i));
                        for j in 0..width {
                            dg[j] += row[j] * xrow[j];
                            row[j] *= bn.gamma[j];
                        }
                    }
                    let sum_dxhat = col_sums(&dxhat);
                    let mut sum_dxhat_xhat = vec![0.0; width];
                    for (drow, xrow) in dxhat.row_iter().zip(xhat.row_iter()) {
                        for j in 0..width {
                            sum_dxhat_xhat[j] += drow[j] * xrow[j];
                        }
                    }
                    let mut da = dxhat;
                    for i in 0..da.rows() {
                        let (row, xrow) = (da.row_mut(i), xhat.row(i));
                        for j in 0..width {
                            row[j] = c.inv_std[j] / n
                                * (n * row[j] - sum_dxhat[j] - xrow[j] * sum_dxhat_xhat[j]);
                        }
                    }
                    dgamma = Some(dg);
                    dbeta = Some(db);
                    da
                }
                _ => dout,
            };
            let dw = c.input.transpose().dot(&da);
            let dbias = col_sums(&da);
            let mut dinput = da.dot(&layer.weight.transpose());
            if let Some(m) = cache.mix.as_ref().filter(|m| m.layer == l) {
                dinput = unmix_grad(&dinput, m);
            }
            grads.push(LayerGrads {
                weight: dw,
                bias: dbias,
                gamma: dgamma,
                beta: dbeta,
            });
            dout = dinput;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, dout))
    }

    /// All trainable entries in the same order as [`MlpGrads::flatten`].
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for l in &self.layers {
            out.extend_from_slice(l.weight.as_slice());
            out.extend_from_slice(&l.bias);
            if let Some(bn) = &l.bn {
                out.extend_from_slice(&bn.gamma);
                out.extend_from_slice(&bn.beta);
            }
        }
        out
    }

    /// Mutable access to trainable entry `index` in flatten order.
    pub fn param_mut(&mut self, mut index: usize) -> &mut f64 {
        for l in &mut self.layers {
            let w = l.weight.as_slice().len();
            if index < w {
                return &mut l.weight.as_mut_slice()[index];
            }
            index -= w;
            if index < l.bias.len() {
                return &mut l.bias[index];
            }
            index -= l.bias.len();
            if let Some(bn) = &mut l.bn {
                if index < bn.gamma.len() {
                    return &mut bn.gamma[index];
                }
                index -= bn.gamma.len();
                if index < bn.beta.len() {
                    return &mut bn.beta[index];
                }
                index -= bn.beta.len();
            }
        }
        panic!("parameter index out of range");
    }

    /// SHA-256 of the checkpoint encoding, as lowercase hex.
    pub fn digest(&self) -> String {
        hex(&Sha256::digest(self.to_bytes()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
        let spec = &self.spec;
        tensors.push((
            "spec.widths".into(),
            vec![spec.widths.len()],
            spec.widths.iter().map(|&w| w as f64).collect(),
        ));
        tensors.push((
            "spec.batchnorm".into(),
            vec![spec.batchnorm.len()],
            spec.batchnorm.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect(),
        ));
        tensors.push((
            "spec.final_linear_only".into(),
            vec![],
            vec![if spec.final_linear_only { 1.0 } else { 0.0 }],
        ));
        for (i, l) in self.layers.iter().enumerate() {
            let w = &l.weight;
            tensors.push((format!("layer{i}.weight"), vec![w.rows(), w.cols()], w.as_slice().to_vec()));
            tensors.push((format!("layer{i}.bias"), vec![l.bias.len()], l.bias.clone()));
            if let Some(bn) = &l.bn {
                let width = bn.gamma.len();
                for (name, v) in [
                    ("gamma", &bn.gamma),
                    ("beta", &bn.beta),
                    ("running_mean", &bn.running_mean),
                    ("running_var", &bn.running_var),
                ] {
                    tensors.push((format!("layer{i}.bn.{name}"), vec![width], v.clone()));
                }
                tensors.push((format!("layer{i}.bn.momentum"), vec![], vec![bn.momentum]));
                tensors.push((format!("layer{i}.bn.eps"), vec![], vec![bn.eps]));
            }
        }
        encode_tensors(&tensors)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut tensors = decode_tensors(bytes)?;
        let mut take = |name: &str, expected: Option<Vec<usize>>| -> Result<Vec<f64>> {
            let (dims, values) = tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))?;
            if let Some(expected) = expected {
                if dims != expected {
                    return Err(Error::ShapeMismatch {
                        tensor: name.to_string(),
                        found: dims,
                        expected,
                    });
                }
            }
            Ok(values)
        };
        let widths: Vec<usize> = take("spec.widths", None)?.iter().map(|&v| v as usize).collect();
        let layers_n = widths.len().saturating_sub(1);
        let batchnorm: Vec<bool> = take("spec.batchnorm", Some(vec![layers_n]))?
            .iter()
            .map(|&v| v != 0.0)
            .collect();
        let final_linear_only = take("spec.final_linear_only", Some(vec![]))?[0] != 0.0;
        let spec = MlpSpec::new(widths, batchnorm, final_linear_only)
            .map_err(|e| Error::Checkpoint(format!("invalid network description: {e}")))?;
        let mut layers = Vec::new();
        for i in 0..spec.num_layers() {
            let (fan_in, fan_out) = (spec.widths[i], spec.widths[i + 1]);
            let weight = Matrix::from_vec(
                fan_in,
                fan_out,
                take(&format!("layer{i}.weight"), Some(vec![fan_in, fan_out]))?,
            )
            .map_err(|e| Error::Checkpoint(format!("layer{i}.weight: {e}")))?;
            let bias = take(&format!("layer{i}.bias"), Some(vec![fan_out]))?;
            let bn = if spec.batchnorm[i] {
                let mut vec_of = |n: &str| take(&format!("layer{i}.bn.{n}"), Some(vec![fan_out]));
                let bn = BatchNorm {
                    gamma: vec_of("gamma")?,
                    beta: vec_of("beta")?,
                    running_mean: vec_of("running_mean")?,
                    running_var: vec_of("running_var")?,
                    momentum: take(&format!("layer{i}.bn.momentum"), Some(vec![]))?[0],
                    eps: take(&format!("layer{i}.bn.eps"), Some(vec![]))?[0],
                };
                if bn.running_var.iter().any(|&v| !(v >= 0.0)) {
                    return Err(Error::Checkpoint(format!("layer{i}.bn.running_var has negative entries")));
                }
                Some(bn)
            } else {
                None
            };
            layers.push(Layer { weight, bias, bn });
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {extra:?}")));
        }
        Ok(Self { spec, layers })
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"DACL";
pub const CHECKPOINT_VERSION: u32 = 1;

fn encode_tensors(tensors: &[(String, Vec<usize>, Vec<f64>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, dims, values) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Truncated { what: what.to_string() });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

type TensorMap = HashMap<String, (Vec<usize>, Vec<f64>)>;

fn decode_tensors(bytes: &[u8]) -> Result<TensorMap> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic bytes")?.try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let count = r.u32("tensor count")?;
    let mut map = HashMap::new();
    for t in 0..count {
        let len = u16::from_le_bytes(r.take(2, &format!("name length of tensor {t}"))?.try_into().unwrap());
        let name = String::from_utf8(r.take(len as usize, &format!("name of tensor {t}"))?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("tensor {t} name is not UTF-8")))?;
        let rank = r.take(1, &format!("rank of {name}"))?[0];
        let mut dims = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            dims.push(r.u32(&format!("dims of {name}"))? as usize);
        }
        let count: usize = dims.iter().product();
        let raw = r.take(count * 8, &format!("values of {name}"))?;
        let values = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if map.insert(name.clone(), (dims, values)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }
    Ok(map)
}

pub fn save_checkpoint(params: &MlpParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, params.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<MlpParams> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    MlpParams::from_bytes(&bytes)
}
