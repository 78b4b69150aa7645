//! Adam over named parameters.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::params::Parameterized;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub first: BTreeMap<String, Tensor>,
    pub second: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            ..Default::default()
        }
    }

    /// Advances the step counter. Call once per optimizer step, before the
    /// [`Adam::update`] calls of that step.
    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to every parameter of `params` whose name starts with
    /// `prefix`, reading gradients from the same-shaped `grads`.
    pub fn update<P: Parameterized>(&mut self, prefix: &str, params: &mut P, grads: &P, lr: f64) {
        self.update_where(prefix, params, grads, lr, |_| true);
    }

    /// [`Adam::update`] restricted to the parameters whose name satisfies
    /// `keep`; the others and their moments are left untouched.
    pub fn update_where<P: Parameterized>(
        &mut self,
        prefix: &str,
        params: &mut P,
        grads: &P,
        lr: f64,
        keep: impl Fn(&str) -> bool,
    ) {
        let grads: BTreeMap<String, &Tensor> = grads.named().into_iter().collect();
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step.max(1) as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut("", &mut |name, p| {
            if !keep(&name) {
                return;
            }
            let g = grads[&name];
            let key = crate::params::join(prefix, &name);
            let m = first.entry(key.clone()).or_insert_with(|| Tensor::zeros_like(p));
            let v = second.entry(key).or_insert_with(|| Tensor::zeros_like(p));
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mv = beta1 * *mv + (1.0 - beta1) * gv;
                *vv = beta2 * *vv + (1.0 - beta2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv -= lr * mhat / (vhat.sqrt() + eps);
            }
        });
    }
}
