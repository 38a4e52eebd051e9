//! Adam optimizer over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autograd::Gradients;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First and second moment estimates of one parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Adam {
    config: AdamConfig,
    steps: u64,
    moments: BTreeMap<String, Moments>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, steps: 0, moments: BTreeMap::new() }
    }

    /// Rebuilds an optimizer from saved state.
    pub fn from_state(config: AdamConfig, steps: u64, moments: BTreeMap<String, Moments>) -> Self {
        Self { config, steps, moments }
    }

    pub fn config(&self) -> AdamConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn moments(&self) -> &BTreeMap<String, Moments> {
        &self.moments
    }

    /// One update of every parameter that received a gradient. Parameters
    /// are replaced by fresh leaves; their old ids become stale.
    pub fn step<'a>(&mut self, lr: f64, params: impl IntoIterator<Item = (String, &'a mut Tensor)>, grads: &Gradients) {
        self.steps += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for (name, p) in params {
            let Some(g) = grads.get(p) else { continue };
            let n = p.numel();
            let st = self
                .moments
                .entry(name)
                .or_insert_with(|| Moments { m: vec![0.0; n], v: vec![0.0; n] });
            assert_eq!(st.m.len(), n, "optimizer state does not match parameter size");
            let mut next = p.to_vec();
            for (((w, &gi), m), v) in next.iter_mut().zip(g.data()).zip(&mut st.m).zip(&mut st.v) {
                *m = beta1 * *m + (1.0 - beta1) * gi;
                *v = beta2 * *v + (1.0 - beta2) * gi * gi;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            p.replace_data(next);
        }
    }
}
