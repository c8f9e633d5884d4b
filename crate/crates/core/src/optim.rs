//! LARS and momentum SGD over named parameter tensors, plus the warmup +
//! cosine learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::model::{MlpGrads, MlpParams};

/// One trainable tensor and its gradient. `exclude` marks tensors that skip
/// trust scaling and weight decay (biases, batchnorm scale and shift).
pub struct ParamTensor<'a> {
    pub name: String,
    pub value: &'a mut [f64],
    pub grad: &'a [f64],
    pub exclude: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHyper {
    pub momentum: f64,
    pub weight_decay: f64,
    pub trust: f64,
}

impl Default for OptimHyper {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 1e-6,
            trust: 0.001,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub hyper: OptimHyper,
    pub buffers: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimState {
    pub fn new(hyper: OptimHyper) -> Self {
        Self {
            hyper,
            buffers: Vec::new(),
            step: 0,
        }
    }

    fn prepare(&mut self, tensors: &[ParamTensor]) -> Result<()> {
        if self.buffers.is_empty() {
            self.buffers = tensors.iter().map(|t| vec![0.0; t.value.len()]).collect();
        }
        ensure!(
            self.buffers.len() == tensors.len(),
            "optimizer tracks {} tensors, got {}",
            self.buffers.len(),
            tensors.len()
        );
        for (t, b) in tensors.iter().zip(&self.buffers) {
            ensure!(
                t.value.len() == b.len() && t.grad.len() == b.len(),
                "tensor {} has {} values and {} gradients, buffer holds {}",
                t.name,
                t.value.len(),
                t.grad.len(),
                b.len()
            );
            if t.grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("gradient of {}", t.name),
                });
            }
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Linear warmup to `base_lr`, then cosine decay towards zero.
pub fn schedule_lr(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> Result<f64> {
    ensure!(step < total_steps, "step {step} outside schedule of {total_steps} steps");
    ensure!(
        warmup_steps < total_steps,
        "warmup of {warmup_steps} steps does not fit in {total_steps}"
    );
    if step < warmup_steps {
        return Ok(base_lr * (step + 1) as f64 / warmup_steps as f64);
    }
    let progress = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok(base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Base learning rate under the linear scaling rule.
pub fn scaled_lr(ratio: f64, batch_size: usize) -> f64 {
    ratio * batch_size as f64 / 256.0
}

pub fn lars_step(tensors: &mut [ParamTensor], state: &mut OptimState, lr: f64) -> Result<()> {
    state.prepare(tensors)?;
    let h = state.hyper;
    for (t, buf) in tensors.iter_mut().zip(&mut state.buffers) {
        let wd = if t.exclude { 0.0 } else { h.weight_decay };
        let local = if t.exclude {
            1.0
        } else {
            let (wn, gn) = (norm(t.value), norm(t.grad));
            if wn > 0.0 && gn > 0.0 {
                h.trust * wn / (gn + wd * wn)
            } else {
                1.0
            }
        };
        let rate = local * lr;
        for ((w, g), b) in t.value.iter_mut().zip(t.grad).zip(buf.iter_mut()) {
            *b = h.momentum * *b + rate * (g + wd * *w);
            *w -= *b;
        }
    }
    state.step += 1;
    Ok(())
}

pub fn sgd_momentum_step(tensors: &mut [ParamTensor], state: &mut OptimState, lr: f64) -> Result<()> {
    state.prepare(tensors)?;
    let h = state.hyper;
    for (t, buf) in tensors.iter_mut().zip(&mut state.buffers) {
        let wd = if t.exclude { 0.0 } else { h.weight_decay };
        for ((w, g), b) in t.value.iter_mut().zip(t.grad).zip(buf.iter_mut()) {
            *b = h.momentum * *b + g + wd * *w;
            *w -= lr * *b;
        }
    }
    state.step += 1;
    Ok(())
}

impl MlpParams {
    /// Pairs every trainable tensor with its gradient, in a stable order.
    pub fn tensors<'a>(&'a mut self, grads: &'a MlpGrads) -> Result<Vec<ParamTensor<'a>>> {
        ensure!(
            grads.layers.len() == self.layers.len(),
            "{} gradient layers for {} network layers",
            grads.layers.len(),
            self.layers.len()
        );
        let mut out = Vec::new();
        for (i, (layer, g)) in self.layers.iter_mut().zip(&grads.layers).enumerate() {
            out.push(ParamTensor {
                name: format!("layer{i}.weight"),
                value: layer.weight.as_mut_slice(),
                grad: g.weight.as_slice(),
                exclude: false,
            });
            out.push(ParamTensor {
                name: format!("layer{i}.bias"),
                value: &mut layer.bias,
                grad: &g.bias,
                exclude: true,
            });
            if let Some(bn) = &mut layer.bn {
                let (Some(dg), Some(db)) = (&g.gamma, &g.beta) else {
                    return Err(Error::contract(format!("layer{i} gradients lack batchnorm terms")));
                };
                out.push(ParamTensor {
                    name: format!("layer{i}.bn.gamma"),
                    value: &mut bn.gamma,
                    grad: dg,
                    exclude: true,
                });
                out.push(ParamTensor {
                    name: format!("layer{i}.bn.beta"),
                    value: &mut bn.beta,
                    grad: db,
                    exclude: true,
                });
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn hyper(momentum: f64, weight_decay: f64) -> OptimHyper {
        OptimHyper {
            momentum,
            weight_decay,
            trust: 0.001,
        }
    }

    fn one<'a>(w: &'a mut [f64], g: &'a [f64], exclude: bool) -> Vec<ParamTensor<'a>> {
        vec![ParamTensor {
            name: "w".into(),
            value: w,
            grad: g,
            exclude,
        }]
    }

    #[test]
    fn schedule_cases() {
        let base = 0.3;
        assert_eq!(schedule_lr(10, 200, 10, base).unwrap(), base);
        assert_eq!(schedule_lr(0, 200, 10, base).unwrap(), base * 0.1);
        // progress (T-1-w)/(T-w) leaves 0.5 * (1 - cos(pi / (T - w))) ~ (pi / (T - w))^2 / 4
        let last = schedule_lr(1009, 1010, 10, base).unwrap();
        assert!(last < base * 1e-4, "{last}");
        let mid = schedule_lr(60, 110, 10, base).unwrap();
        assert!((mid - base / 2.0).abs() < 1e-12);
        assert!(schedule_lr(5, 5, 1, base).is_err());
        assert!(schedule_lr(0, 5, 5, base).is_err());
        // continuity at the junction
        let before = schedule_lr(9, 200, 10, base).unwrap();
        let after = schedule_lr(10, 200, 10, base).unwrap();
        assert!((before - after).abs() <= 1e-12 * base);
    }

    #[test]
    fn schedule_without_warmup() {
        assert_eq!(schedule_lr(0, 10, 0, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn lars_zero_gradient_is_noop() {
        let mut w = [1.0, -2.0];
        let g = [0.0, 0.0];
        let mut state = OptimState::new(hyper(0.9, 0.0));
        lars_step(&mut one(&mut w, &g, false), &mut state, 1.0).unwrap();
        assert_eq!(w, [1.0, -2.0]);
    }

    #[test]
    fn lars_scalar_hand_case() {
        let mut w = [2.0];
        let mut state = OptimState::new(hyper(0.0, 0.0));
        lars_step(&mut one(&mut w, &[1.0], false), &mut state, 1.0).unwrap();
        assert!((w[0] - 1.998).abs() < 1e-15);
    }

    #[test]
    fn lars_momentum_unroll() {
        let (w0, g, lr, m, trust) = (3.0f64, 0.5f64, 0.2, 0.9, 0.001);
        let mut w = [w0];
        let mut state = OptimState::new(hyper(m, 0.0));
        lars_step(&mut one(&mut w, &[g], false), &mut state, lr).unwrap();
        lars_step(&mut one(&mut w, &[g], false), &mut state, lr).unwrap();
        let b1 = trust * w0 / g * lr * g;
        let w1 = w0 - b1;
        let b2 = m * b1 + trust * w1 / g * lr * g;
        let w2 = w1 - b2;
        assert!((w[0] - w2).abs() < 1e-12);
    }

    #[test]
    fn lars_excluded_tensor_is_plain_momentum() {
        let mut w = [1.0];
        let mut state = OptimState::new(hyper(0.0, 0.5));
        lars_step(&mut one(&mut w, &[0.25], true), &mut state, 0.1).unwrap();
        assert!((w[0] - (1.0 - 0.025)).abs() < 1e-15);
    }

    #[test]
    fn nan_gradient_names_tensor() {
        let mut w = [1.0];
        let mut state = OptimState::new(hyper(0.0, 0.0));
        let err = lars_step(&mut one(&mut w, &[f64::NAN], false), &mut state, 1.0).unwrap_err();
        assert!(err.to_string().contains("gradient of w"), "{err}");
        let err = sgd_momentum_step(&mut one(&mut w, &[f64::NAN], false), &mut state, 1.0).unwrap_err();
        assert!(matches!(err, Error::NonFinite { .. }));
    }

    #[test]
    fn sgd_cases() {
        let mut w = [1.0, 2.0];
        let mut state = OptimState::new(hyper(0.0, 0.0));
        sgd_momentum_step(&mut one(&mut w, &[0.5, -1.0], false), &mut state, 0.1).unwrap();
        assert_eq!(w, [1.0 - 0.05, 2.0 + 0.1]);
        let before = w;
        sgd_momentum_step(&mut one(&mut w, &[0.5, -1.0], false), &mut state, 0.0).unwrap();
        assert_eq!(w, before);
    }

    #[test]
    fn sgd_quadratic_bowl() {
        let mut w = [1.0];
        let mut state = OptimState::new(hyper(0.0, 0.0));
        for _ in 0..100 {
            let g = [2.0 * w[0]];
            sgd_momentum_step(&mut one(&mut w, &g, false), &mut state, 0.1).unwrap();
        }
        assert!(w[0].abs() < 1e-9);
        assert!((w[0] - 0.8f64.powi(100)).abs() < 1e-20);
    }

    proptest! {
        #[test]
        fn lars_update_scales_with_layer(
            w in prop::collection::vec(-2.0f64..2.0, 4),
            g in prop::collection::vec(-2.0f64..2.0, 4),
            c in 0.1f64..10.0,
        ) {
            prop_assume!(norm(&w) > 1e-3 && norm(&g) > 1e-3);
            let update = |w: &[f64], g: &[f64]| {
                let mut v = w.to_vec();
                let mut state = OptimState::new(hyper(0.9, 1e-4));
                lars_step(&mut one(&mut v, g, false), &mut state, 0.5).unwrap();
                w.iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>()
            };
            let base = update(&w, &g);
            let ws: Vec<f64> = w.iter().map(|v| v * c).collect();
            let gs: Vec<f64> = g.iter().map(|v| v * c).collect();
            let scaled = update(&ws, &gs);
            for (a, b) in base.iter().zip(&scaled) {
                prop_assert!((c * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
            }
        }
    }
}
