use serde::{Deserialize, Serialize};

use super::{Gradients, ParamStore, Tensor};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Threshold on the global gradient norm.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
        }
    }
}

/// Adam with bias correction and global-norm gradient clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Adam {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Result<Self> {
        if !(config.clip_norm > 0.0) || !(config.lr > 0.0) {
            return Err(Error::InvalidArgument(
                "Adam needs a positive learning rate and clip norm".into(),
            ));
        }
        let zeros: Vec<Tensor> = store.iter().map(|(_, _, t)| Tensor::zeros(t.shape())).collect();
        Ok(Adam {
            config,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        })
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, i: usize) -> &Tensor {
        &self.first[i]
    }

    pub fn second_moment(&self, i: usize) -> &Tensor {
        &self.second[i]
    }

    /// Clips, updates moments and parameters. Returns the pre-clip global norm.
    ///
    /// Parameters without a gradient are left untouched, moments included.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<f64> {
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let clip = if norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
            ..
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            let p = store.get_mut(id).data_mut();
            for (((p, m), v), &g) in p.iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let g = g * clip;
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(norm)
    }
}
