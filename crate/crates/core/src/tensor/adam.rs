use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{round_to_f32, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Round updated values to fp32-representable numbers.
    pub fp32_state: bool,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            fp32_state: true,
        }
    }
}

/// Bias-corrected Adam over named tensors that may live in several stores.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn steps_taken(&self) -> i32 {
        self.t
    }

    /// One update of every gradient whose name lives in one of `stores`.
    pub fn step(&mut self, stores: &mut [&mut ParamStore], grads: &BTreeMap<String, Tensor>) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        for (name, g) in grads {
            let Some(p) = stores.iter_mut().find_map(|s| s.get_mut(name)) else {
                continue;
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.raw_dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                    *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                    let upd = c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.eps);
                    *p -= upd;
                    if c.fp32_state {
                        *p = round_to_f32(*p);
                    }
                });
        }
    }
}
