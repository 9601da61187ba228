use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::ModelError;

pub const BATCH_NORM_EPSILON: f64 = 1e-3;
pub const BATCH_NORM_MOMENTUM: f64 = 0.9;
const OUTPUT_INIT_GAIN: f64 = 0.01;

/// Classification head: GAP → dense(+ReLU) ×1–2 → batch-norm → dropout → output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadConfig {
    pub dense_units: Vec<usize>,
    pub dropout_rate: f64,
    pub use_batch_norm: bool,
    pub num_classes: usize,
}

impl HeadConfig {
    /// 128 units, dropout 0.3, batch-norm on.
    pub fn new(num_classes: usize) -> Self {
        Self {
            dense_units: vec![128],
            dropout_rate: 0.3,
            use_batch_norm: true,
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.dense_units.is_empty() || self.dense_units.len() > 2 {
            return Err(ModelError::InvalidConfig(format!(
                "head needs one or two dense layers, got {}",
                self.dense_units.len()
            )));
        }
        if self.dense_units.contains(&0) {
            return Err(ModelError::InvalidConfig("dense layer with zero units".into()));
        }
        if !(self.dropout_rate > 0.0 && self.dropout_rate < 1.0) {
            return Err(ModelError::InvalidConfig(format!(
                "dropout rate {} outside (0, 1)",
                self.dropout_rate
            )));
        }
        if self.num_classes < 2 {
            return Err(ModelError::InvalidConfig("head needs at least two classes".into()));
        }
        Ok(())
    }
}

/// Fully connected layer, `weight` is `inputs × outputs` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Dense {
    fn init(inputs: usize, outputs: usize, gain: f64, rng: &mut ChaCha8Rng) -> Self {
        let std = (gain / inputs as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        Self {
            inputs,
            outputs,
            weight: (0..inputs * outputs).map(|_| dist.sample(rng)).collect(),
            bias: vec![0.0; outputs],
        }
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut out = self.bias.clone();
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            let row = &self.weight[i * self.outputs..][..self.outputs];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
        out
    }

    /// Accumulates parameter gradients and returns dL/dx.
    fn backward(&self, x: &[f64], dy: &[f64], grads: &mut DenseGrads) -> Vec<f64> {
        let mut dx = vec![0.0; self.inputs];
        for i in 0..self.inputs {
            let row = &self.weight[i * self.outputs..][..self.outputs];
            let grow = &mut grads.weight[i * self.outputs..][..self.outputs];
            let mut acc = 0.0;
            for o in 0..self.outputs {
                grow[o] += x[i] * dy[o];
                acc += row[o] * dy[o];
            }
            dx[i] = acc;
        }
        for (b, d) in grads.bias.iter_mut().zip(dy) {
            *b += d;
        }
        dx
    }

    fn input_grad(&self, dy: &[f64]) -> Vec<f64> {
        (0..self.inputs)
            .map(|i| {
                self.weight[i * self.outputs..][..self.outputs]
                    .iter()
                    .zip(dy)
                    .map(|(w, d)| w * d)
                    .sum()
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(n: usize) -> Self {
        Self {
            gamma: vec![1.0; n],
            beta: vec![0.0; n],
            running_mean: vec![0.0; n],
            running_var: vec![1.0; n],
        }
    }

    fn eval_scale(&self, j: usize) -> f64 {
        self.gamma[j] / (self.running_var[j] + BATCH_NORM_EPSILON).sqrt()
    }

    fn forward_eval(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(j, v)| (v - self.running_mean[j]) * self.eval_scale(j) + self.beta[j])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseGrads {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseGrads {
    fn zeros(d: &Dense) -> Self {
        Self {
            weight: vec![0.0; d.weight.len()],
            bias: vec![0.0; d.bias.len()],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadGrads {
    pub dense: Vec<DenseGrads>,
    pub bn: Option<(Vec<f64>, Vec<f64>)>,
    pub output: DenseGrads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub config: HeadConfig,
    pub dense: Vec<Dense>,
    pub bn: Option<BatchNorm>,
    pub output: Dense,
}

/// Per-batch intermediates of a training-mode head pass.
pub struct HeadCache {
    inputs: Vec<Vec<f64>>,
    /// Post-ReLU activations of each dense layer, per sample.
    dense_out: Vec<Vec<Vec<f64>>>,
    normalized: Vec<Vec<f64>>,
    inv_std: Vec<f64>,
    dropout_mask: Vec<Vec<f64>>,
    /// Input to the output layer, per sample.
    pre_output: Vec<Vec<f64>>,
}

impl Head {
    /// He-scaled normal init for the ReLU layers; the output layer starts near
    /// zero so initial predictions are close to uniform.
    pub fn init(config: &HeadConfig, in_features: usize, rng: &mut ChaCha8Rng) -> Result<Self, ModelError> {
        config.validate()?;
        let mut dense = Vec::new();
        let mut width = in_features;
        for &units in &config.dense_units {
            dense.push(Dense::init(width, units, 2.0, rng));
            width = units;
        }
        let bn = config.use_batch_norm.then(|| BatchNorm::new(width));
        let output = Dense::init(width, config.num_classes, OUTPUT_INIT_GAIN, rng);
        Ok(Self {
            config: config.clone(),
            dense,
            bn,
            output,
        })
    }

    pub fn in_features(&self) -> usize {
        self.dense[0].inputs
    }

    pub fn parameter_count(&self) -> usize {
        self.dense.iter().map(|d| d.weight.len() + d.bias.len()).sum::<usize>()
            + self.bn.as_ref().map_or(0, |b| 2 * b.gamma.len())
            + self.output.weight.len()
            + self.output.bias.len()
    }

    fn hidden_eval(&self, pooled: &[f64]) -> Vec<f64> {
        let mut h = pooled.to_vec();
        for d in &self.dense {
            h = d.forward(&h);
            h.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        match &self.bn {
            Some(bn) => bn.forward_eval(&h),
            None => h,
        }
    }

    /// Evaluation-mode logits (running batch-norm statistics, no dropout).
    pub fn logits(&self, pooled: &[f64]) -> Vec<f64> {
        self.output.forward(&self.hidden_eval(pooled))
    }

    /// d(logit[target]) / d(pooled) in evaluation mode.
    pub fn logit_input_grad(&self, pooled: &[f64], target: usize) -> Vec<f64> {
        let mut acts = vec![pooled.to_vec()];
        for d in &self.dense {
            let mut h = d.forward(acts.last().unwrap());
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            acts.push(h);
        }
        let mut grad: Vec<f64> = (0..self.output.inputs)
            .map(|i| self.output.weight[i * self.output.outputs + target])
            .collect();
        if let Some(bn) = &self.bn {
            for (j, g) in grad.iter_mut().enumerate() {
                *g *= bn.eval_scale(j);
            }
        }
        for (li, d) in self.dense.iter().enumerate().rev() {
            let out = &acts[li + 1];
            let masked: Vec<f64> = grad.iter().zip(out).map(|(g, o)| if *o > 0.0 { *g } else { 0.0 }).collect();
            grad = d.input_grad(&masked);
        }
        grad
    }

    /// Training-mode forward over a batch: batch statistics for batch-norm
    /// (running statistics are updated) and inverted dropout drawn from `rng`.
    pub fn forward_train(&mut self, pooled: &[Vec<f64>], rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, HeadCache) {
        let n = pooled.len();
        let mut dense_out: Vec<Vec<Vec<f64>>> = Vec::with_capacity(self.dense.len());
        let mut cur: Vec<Vec<f64>> = pooled.to_vec();
        for d in &self.dense {
            cur = cur
                .iter()
                .map(|x| {
                    let mut h = d.forward(x);
                    h.iter_mut().for_each(|v| *v = v.max(0.0));
                    h
                })
                .collect();
            dense_out.push(cur.clone());
        }

        let width = cur[0].len();
        let (normalized, inv_std) = match &mut self.bn {
            Some(bn) => {
                let mut mean = vec![0.0; width];
                for h in &cur {
                    for (m, v) in mean.iter_mut().zip(h) {
                        *m += v / n as f64;
                    }
                }
                let mut var = vec![0.0; width];
                for h in &cur {
                    for j in 0..width {
                        var[j] += (h[j] - mean[j]).powi(2) / n as f64;
                    }
                }
                let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_NORM_EPSILON).sqrt()).collect();
                let normalized: Vec<Vec<f64>> = cur
                    .iter()
                    .map(|h| (0..width).map(|j| (h[j] - mean[j]) * inv_std[j]).collect())
                    .collect();
                let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
                for j in 0..width {
                    bn.running_mean[j] = BATCH_NORM_MOMENTUM * bn.running_mean[j] + (1.0 - BATCH_NORM_MOMENTUM) * mean[j];
                    bn.running_var[j] =
                        BATCH_NORM_MOMENTUM * bn.running_var[j] + (1.0 - BATCH_NORM_MOMENTUM) * var[j] * unbiased;
                }
                cur = normalized
                    .iter()
                    .map(|x| (0..width).map(|j| bn.gamma[j] * x[j] + bn.beta[j]).collect())
                    .collect();
                (normalized, inv_std)
            }
            None => (Vec::new(), Vec::new()),
        };

        let keep = 1.0 - self.config.dropout_rate;
        let dropout_mask: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..width)
                    .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect()
            })
            .collect();
        let pre_output: Vec<Vec<f64>> = cur
            .iter()
            .zip(&dropout_mask)
            .map(|(h, m)| h.iter().zip(m).map(|(a, b)| a * b).collect())
            .collect();
        let logits = pre_output.iter().map(|h| self.output.forward(h)).collect();
        (
            logits,
            HeadCache {
                inputs: pooled.to_vec(),
                dense_out,
                normalized,
                inv_std,
                dropout_mask,
                pre_output,
            },
        )
    }

    /// Backward through a training-mode pass; returns parameter gradients and
    /// dL/d(pooled) per sample.
    pub fn backward(&self, cache: &HeadCache, dlogits: &[Vec<f64>]) -> (HeadGrads, Vec<Vec<f64>>) {
        let n = dlogits.len();
        let mut out_grads = DenseGrads::zeros(&self.output);
        let mut d: Vec<Vec<f64>> = dlogits
            .iter()
            .zip(&cache.pre_output)
            .map(|(dy, x)| self.output.backward(x, dy, &mut out_grads))
            .collect();
        for (di, mask) in d.iter_mut().zip(&cache.dropout_mask) {
            di.iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
        }

        let bn_grads = self.bn.as_ref().map(|bn| {
            let width = bn.gamma.len();
            let mut dgamma = vec![0.0; width];
            let mut dbeta = vec![0.0; width];
            for (dy, xh) in d.iter().zip(&cache.normalized) {
                for j in 0..width {
                    dgamma[j] += dy[j] * xh[j];
                    dbeta[j] += dy[j];
                }
            }
            // dx = inv_std / n · (n·dx̂ − Σdx̂ − x̂·Σ(dx̂·x̂)), with dx̂ = dy·γ.
            let mut sum_dxh = vec![0.0; width];
            let mut sum_dxh_xh = vec![0.0; width];
            for (dy, xh) in d.iter().zip(&cache.normalized) {
                for j in 0..width {
                    let dxh = dy[j] * bn.gamma[j];
                    sum_dxh[j] += dxh;
                    sum_dxh_xh[j] += dxh * xh[j];
                }
            }
            for (dy, xh) in d.iter_mut().zip(&cache.normalized) {
                for j in 0..width {
                    let dxh = dy[j] * bn.gamma[j];
                    dy[j] = cache.inv_std[j] / n as f64
                        * (n as f64 * dxh - sum_dxh[j] - xh[j] * sum_dxh_xh[j]);
                }
            }
            (dgamma, dbeta)
        });

        let mut dense_grads: Vec<DenseGrads> = self.dense.iter().map(DenseGrads::zeros).collect();
        for li in (0..self.dense.len()).rev() {
            let layer = &self.dense[li];
            let outs = &cache.dense_out[li];
            let ins: &[Vec<f64>] = if li == 0 { &cache.inputs } else { &cache.dense_out[li - 1] };
            d = d
                .iter()
                .zip(outs)
                .zip(ins)
                .map(|((dy, out), x)| {
                    let masked: Vec<f64> = dy.iter().zip(out).map(|(g, o)| if *o > 0.0 { *g } else { 0.0 }).collect();
                    layer.backward(x, &masked, &mut dense_grads[li])
                })
                .collect();
        }
        (
            HeadGrads {
                dense: dense_grads,
                bn: bn_grads,
                output: out_grads,
            },
            d,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn head(units: Vec<usize>, bn: bool) -> Head {
        let cfg = HeadConfig {
            dense_units: units,
            dropout_rate: 0.3,
            use_batch_norm: bn,
            num_classes: 4,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut h = Head::init(&cfg, 6, &mut rng).unwrap();
        if let Some(bn) = &mut h.bn {
            for j in 0..bn.gamma.len() {
                bn.gamma[j] = 0.5 + 0.1 * j as f64;
                bn.beta[j] = 0.05 * j as f64;
                bn.running_mean[j] = 0.2;
                bn.running_var[j] = 1.5;
            }
        }
        h
    }

    #[test]
    fn config_validation() {
        assert!(HeadConfig::new(20).validate().is_ok());
        let mut c = HeadConfig::new(20);
        c.dense_units = vec![256, 128, 64];
        assert!(c.validate().is_err());
        c.dense_units = vec![128];
        c.dropout_rate = 1.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn eval_input_grad_matches_finite_differences() {
        for (units, bn) in [(vec![8], true), (vec![8, 5], true), (vec![7], false)] {
            let h = head(units, bn);
            let x = vec![0.3, -0.2, 1.1, 0.7, -0.9, 0.4];
            for target in 0..4 {
                let g = h.logit_input_grad(&x, target);
                for i in 0..x.len() {
                    let eps = 1e-6;
                    let mut xp = x.clone();
                    xp[i] += eps;
                    let mut xm = x.clone();
                    xm[i] -= eps;
                    let fd = (h.logits(&xp)[target] - h.logits(&xm)[target]) / (2.0 * eps);
                    assert!((fd - g[i]).abs() < 1e-6, "{fd} vs {}", g[i]);
                }
            }
        }
    }

    /// Training-mode backward against finite differences of the batch loss
    /// Σ upstream·logits, with the dropout mask held fixed by reseeding.
    #[test]
    fn train_backward_matches_finite_differences() {
        let base = head(vec![6, 5], true);
        let batch: Vec<Vec<f64>> = (0..4)
            .map(|s| (0..6).map(|i| ((s * 7 + i * 3) % 11) as f64 / 5.0 - 1.0).collect())
            .collect();
        let upstream: Vec<Vec<f64>> = (0..4)
            .map(|s| (0..4).map(|k| ((s + 2 * k) % 5) as f64 / 4.0 - 0.5).collect())
            .collect();
        let objective = |h: &Head, xs: &[Vec<f64>]| -> f64 {
            let mut h = h.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let (logits, _) = h.forward_train(xs, &mut rng);
            logits.iter().zip(&upstream).flat_map(|(l, u)| l.iter().zip(u).map(|(a, b)| a * b)).sum()
        };
        let mut h = base.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (_, cache) = h.forward_train(&batch, &mut rng);
        let (grads, dx) = base.backward(&cache, &upstream);
        let eps = 1e-6;
        for i in 0..base.dense[0].weight.len() {
            let mut p = base.clone();
            p.dense[0].weight[i] += eps;
            let mut m = base.clone();
            m.dense[0].weight[i] -= eps;
            let fd = (objective(&p, &batch) - objective(&m, &batch)) / (2.0 * eps);
            assert!((fd - grads.dense[0].weight[i]).abs() < 1e-5, "w{i}: {fd} vs {}", grads.dense[0].weight[i]);
        }
        let (dg, _) = grads.bn.as_ref().unwrap();
        for j in 0..dg.len() {
            let mut p = base.clone();
            p.bn.as_mut().unwrap().gamma[j] += eps;
            let mut m = base.clone();
            m.bn.as_mut().unwrap().gamma[j] -= eps;
            let fd = (objective(&p, &batch) - objective(&m, &batch)) / (2.0 * eps);
            assert!((fd - dg[j]).abs() < 1e-5);
        }
        for s in 0..batch.len() {
            for i in 0..6 {
                let mut xp = batch.clone();
                xp[s][i] += eps;
                let mut xm = batch.clone();
                xm[s][i] -= eps;
                let fd = (objective(&base, &xp) - objective(&base, &xm)) / (2.0 * eps);
                assert!((fd - dx[s][i]).abs() < 1e-5, "x[{s}][{i}]: {fd} vs {}", dx[s][i]);
            }
        }
    }
}
