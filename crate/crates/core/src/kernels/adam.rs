use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use super::ParamSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adaptive-moment optimizer with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Updates `params` in place from `grads`, which must share its layout.
    pub fn step<P: ParamSet>(&mut self, params: &mut P, grads: &P) {
        let mut g: Vec<&Tensor> = Vec::new();
        grads.visit("", &mut |_, t| g.push(t));
        if self.m.is_empty() {
            self.m = g.iter().map(|t| t.zeros_like()).collect();
            self.v = g.iter().map(|t| t.zeros_like()).collect();
        }
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let mut idx = 0;
        let (m, v) = (&mut self.m, &mut self.v);
        params.visit_mut("", &mut |_, p| {
            let gd = g[idx].data();
            let md = m[idx].data_mut();
            let vd = v[idx].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                md[j] = beta1 * md[j] + (1.0 - beta1) * gd[j];
                vd[j] = beta2 * vd[j] + (1.0 - beta2) * gd[j] * gd[j];
                let mh = md[j] / bc1;
                let vh = vd[j] / bc2;
                *w -= lr * mh / (vh.sqrt() + eps);
            }
            idx += 1;
        });
    }
}
