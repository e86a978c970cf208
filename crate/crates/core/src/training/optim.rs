use serde::{Deserialize, Serialize};

use crate::autodiff::ParamSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Classic L2: `λ·θ` is added to the gradient before the moment updates.
    pub l2: f64,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-6, l2: 1e-6, clip_norm: None }
    }
}

/// Adam with bias correction over the trainable entries of a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &ParamSet) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|(_, p)| Tensor::zeros(p.value().shape())).collect();
        Self { config, m: zeros.clone(), v: zeros, t: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// Applies one update from the accumulated gradients. Returns the global
    /// gradient norm before clipping (L2 term excluded).
    pub fn step(&mut self, params: &mut ParamSet) -> f64 {
        let c = self.config;
        let ids: Vec<_> = params.ids().filter(|&id| params.get(id).trainable()).collect();
        let norm = ids.iter().map(|&id| params.grad(id).data().iter().map(|g| g * g).sum::<f64>()).sum::<f64>().sqrt();
        let scale = match c.clip_norm {
            Some(max) if norm > max => max / norm,
            _ => 1.0,
        };
        self.t += 1;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for id in ids {
            let i = id.index();
            let (theta, grad) = params.value_and_grad_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((th, &g), m), v) in theta.data_mut().iter_mut().zip(grad.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g * scale + c.l2 * *th;
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *th -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
        norm
    }
}
