//! Adam optimizer with bias correction.

use crate::error::{Error, Result};
use crate::nn::params::{Grads, Params};
use crate::nn::tensor::Tensor;

#[derive(Copy, Clone, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

/// First/second moment buffers per parameter plus the step count.
pub struct AdamState {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &Params, cfg: AdamConfig) -> Self {
        let m = params.iter().map(|p| Tensor::zeros(&p.value.shape)).collect();
        let v = params.iter().map(|p| Tensor::zeros(&p.value.shape)).collect();
        Self { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update. Parameters without a gradient slot are left untouched.
    /// Non-finite gradients abort with the offending parameter's name.
    pub fn step(&mut self, params: &mut Params, grads: &Grads) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for idx in 0..params.len() {
            let Some(g) = grads.get(idx) else { continue };
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of parameter {:?} is not finite at step {}",
                    params.at(idx).name, self.step
                )));
            }
            let m = &mut self.m[idx].data;
            let v = &mut self.v[idx].data;
            let p = &mut params.at_mut(idx).value.data;
            for i in 0..p.len() {
                let gi = g.data[i];
                m[i] = self.cfg.beta1 * m[i] + (1.0 - self.cfg.beta1) * gi;
                v[i] = self.cfg.beta2 * v[i] + (1.0 - self.cfg.beta2) * gi * gi;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                p[i] -= self.cfg.lr * mhat / (vhat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
