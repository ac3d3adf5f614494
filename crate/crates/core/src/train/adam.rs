//! Adam optimizer with bias correction over a parameter set.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::params::{GradStore, ParamSet};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

pub struct Adam {
    cfg: AdamConfig,
    /// First and second moment estimates, aligned with parameter ids.
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(params: &ParamSet, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        let v = params.iter().map(|(_, _, t)| Tensor::zeros(t.rows(), t.cols())).collect();
        Adam { cfg, m, v, t: 0 }
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &GradStore) {
        self.t += 1;
        let b1 = self.cfg.beta1;
        let b2 = self.cfg.beta2;
        let m_corr = 1.0 - b1.powi(self.t as i32);
        let v_corr = 1.0 - b2.powi(self.t as i32);
        let ids: Vec<_> = params.ids().collect();
        for (slot, id) in ids.into_iter().enumerate() {
            let g = grads.get(id);
            let theta = params.get_mut(id);
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            for r in 0..theta.rows() {
                for c in 0..theta.cols() {
                    let grad = g.get(r, c);
                    let mi = b1 * m.get(r, c) + (1.0 - b1) * grad;
                    let vi = b2 * v.get(r, c) + (1.0 - b2) * grad * grad;
                    m.set(r, c, mi);
                    v.set(r, c, vi);
                    let m_hat = mi / m_corr;
                    let v_hat = vi / v_corr;
                    let updated = theta.get(r, c) - self.cfg.lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
                    theta.set(r, c, updated);
                }
            }
        }
    }
}
