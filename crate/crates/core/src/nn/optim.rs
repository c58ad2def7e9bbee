use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Gradients, NnError, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Rescale the gradient of the managed parameters to at most this L2 norm.
    pub clip_norm: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 3e-4, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: None }
    }
}

impl AdamConfig {
    pub fn with_lr(mut self, lr: f64) -> Self {
        self.lr = lr;
        self
    }
}

/// Adaptive-moment optimizer over a subset of a parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    params: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(store: &ParamStore, params: Vec<ParamId>, config: AdamConfig) -> Self {
        let m: Vec<Tensor> = params.iter().map(|id| Tensor::zeros(&store.get(*id).shape)).collect();
        Self { config, v: m.clone(), m, params, steps: 0 }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn params(&self) -> &[ParamId] {
        &self.params
    }

    /// One descent step: `p -= lr * m_hat / (sqrt(v_hat) + eps)`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NnError> {
        for id in &self.params {
            let (p, g) = (store.get(*id), grads.get(*id));
            if p.shape != g.shape {
                return Err(NnError::ShapeMismatch { op: "adam", expected: p.len(), got: g.len() });
            }
        }
        let scale = match self.config.clip_norm {
            Some(max) => {
                let n = grads.norm(&self.params);
                if n > max { max / n } else { 1.0 }
            }
            None => 1.0,
        };
        self.steps += 1;
        let c = self.config;
        let t = self.steps as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, f64::from(t));
        let bc2 = 1.0 - libm::pow(c.beta2, f64::from(t));
        for (k, id) in self.params.iter().enumerate() {
            let g = &grads.get(*id).data;
            let (m, v) = (&mut self.m[k].data, &mut self.v[k].data);
            let p = &mut store.get_mut(*id).data;
            for i in 0..p.len() {
                let gi = g[i] * scale;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * gi;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * gi * gi;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                p[i] -= c.lr * mh / (libm::sqrt(vh) + c.eps);
            }
        }
        Ok(())
    }
}
