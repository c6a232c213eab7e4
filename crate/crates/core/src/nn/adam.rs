use serde::{Deserialize, Serialize};

use super::{Gradients, ModelParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Step decay: lr is multiplied by `decay_factor` every `decay_every` epochs.
    pub decay_factor: f64,
    pub decay_every: usize,
    pub decay_enabled: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_factor: 0.9,
            decay_every: 10,
            decay_enabled: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
    pub epoch: usize,
}

impl AdamState {
    pub fn new(config: AdamConfig, params: &ModelParams) -> Self {
        let zeros: Vec<Tensor> = params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
            epoch: 0,
        }
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn effective_lr(&self) -> f64 {
        let c = &self.config;
        if c.decay_enabled && c.decay_every > 0 {
            c.lr * c.decay_factor.powi((self.epoch / c.decay_every) as i32)
        } else {
            c.lr
        }
    }

    /// One bias-corrected Adam update. Fails without touching `params` if any
    /// gradient is non-finite.
    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) -> Result<()> {
        if grads.params.len() != params.tensors.len()
            || grads
                .params
                .iter()
                .zip(&params.tensors)
                .any(|(g, p)| g.shape() != p.shape())
        {
            return Err(Error::Shape("gradients do not match parameters".into()));
        }
        if let Some(i) = grads.params.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of parameter tensor {i}")));
        }
        self.step += 1;
        let c = &self.config;
        let lr = self.effective_lr();
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .tensors
            .iter_mut()
            .zip(&grads.params)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((pi, &gi), mi), vi) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gi;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}
