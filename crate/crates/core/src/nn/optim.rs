use std::collections::BTreeMap;

use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, Zip};
use serde::{Deserialize, Serialize};

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// L2 penalty folded into the gradient (coupled weight decay).
    pub weight_decay: f64,
    /// Starting learning rate of the linear warm-up.
    pub warmup_floor_lr: f64,
    /// Fraction of total steps spent warming up.
    pub warmup_fraction: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            warmup_floor_lr: 1e-5,
            warmup_fraction: 0.05,
        }
    }
}

/// Linear warm-up from a floor learning rate to the peak, then constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WarmupSchedule {
    pub floor: f64,
    pub peak: f64,
    pub warmup_steps: usize,
}

impl WarmupSchedule {
    pub fn new(config: &AdamConfig, total_steps: usize) -> Self {
        let warmup_steps = (config.warmup_fraction * total_steps as f64).ceil() as usize;
        Self {
            floor: config.warmup_floor_lr,
            peak: config.lr,
            warmup_steps,
        }
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            self.peak
        } else {
            self.floor + (self.peak - self.floor) * step as f64 / self.warmup_steps as f64
        }
    }
}

/// Adam keyed by parameter name, so frozen tensors never acquire state.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    config: AdamConfig,
    step: i32,
    moments: BTreeMap<String, (ArrayD<T>, ArrayD<T>)>,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step as usize
    }

    /// Applies one update to every `(name, param)` using the gradient with the same name.
    pub fn step<'a>(
        &mut self,
        lr: f64,
        params: Vec<(String, ArrayViewMutD<'a, T>)>,
        grads: &BTreeMap<String, ArrayViewD<'_, T>>,
    ) {
        self.step += 1;
        let c = &self.config;
        let b1 = T::lit(c.beta1);
        let b2 = T::lit(c.beta2);
        let one = T::one();
        let wd = T::lit(c.weight_decay);
        let eps = T::lit(c.eps);
        let bc1 = T::lit(1.0 - c.beta1.powi(self.step));
        let bc2 = T::lit(1.0 - c.beta2.powi(self.step));
        let lr = T::lit(lr);
        for (name, mut param) in params {
            let grad = grads
                .get(&name)
                .unwrap_or_else(|| panic!("no gradient for trainable parameter {name}"));
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (ArrayD::zeros(param.raw_dim()), ArrayD::zeros(param.raw_dim())));
            Zip::from(&mut param)
                .and(grad)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    let g = g + wd * *p;
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}
