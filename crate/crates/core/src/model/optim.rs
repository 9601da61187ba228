use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::classifier::{ClassifierModel, Gradients};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Adam with bias correction. Moment buffers are created lazily per
/// parameter tensor, so changing the trainable stage keeps existing state.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub learning_rate: f64,
    step: u64,
    moments: BTreeMap<usize, Moments>,
}

impl Adam {
    pub fn new(learning_rate: f64, config: AdamConfig) -> Self {
        Self {
            config,
            learning_rate,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every trainable tensor of `model` that has a
    /// gradient. Frozen backbone layers are never touched.
    pub fn step(&mut self, model: &mut ClassifierModel, grads: &Gradients) {
        self.step += 1;
        let t = self.step as i32;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let lr_t = self.learning_rate * (1.0 - beta2.powi(t)).sqrt() / (1.0 - beta1.powi(t));
        let moments = &mut self.moments;
        model.visit_trainable(grads, |slot, param, grad| {
            let mo = moments.entry(slot).or_insert_with(|| Moments {
                m: vec![0.0; param.len()],
                v: vec![0.0; param.len()],
            });
            for i in 0..param.len() {
                let g = grad[i];
                mo.m[i] = beta1 * mo.m[i] + (1.0 - beta1) * g;
                mo.v[i] = beta2 * mo.v[i] + (1.0 - beta2) * g * g;
                param[i] -= lr_t * mo.m[i] / (mo.v[i].sqrt() + epsilon);
            }
        });
    }
}
