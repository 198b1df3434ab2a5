//! Adam with L2 weight decay and step-decay learning-rate milestones.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::graph::Params;
use crate::tensor::Tensor;
use crate::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Added to the gradient as `weight_decay * w` before the moment updates.
    pub weight_decay: f64,
    /// Steps at which the learning rate is multiplied by `decay_factor`.
    pub milestones: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 5e-4,
            milestones: Vec::new(),
            decay_factor: 0.1,
        }
    }
}

impl AdamConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        let passed = self.milestones.iter().filter(|&&m| step >= m).count();
        self.lr * libm::pow(self.decay_factor, passed as f64)
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    config: AdamConfig,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &Params) -> Self {
        let zeros: Vec<Tensor> = params.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    /// One update. `grads[i]` belongs to the i-th parameter; `None` means
    /// the parameter did not influence the loss (decay still applies).
    pub fn update(&mut self, params: &mut Params, grads: &[Option<&Tensor>]) -> Result<(), Error> {
        if grads.len() != params.len() {
            return Err(Error::invalid("one gradient slot per parameter expected"));
        }
        let c = &self.config;
        let lr = c.lr_at(self.step);
        self.step += 1;
        let bc1 = 1.0 - libm::pow(c.beta1, self.step as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, self.step as f64);
        for (i, w) in params.values_mut().iter_mut().enumerate() {
            if let Some(g) = grads[i] {
                if g.shape() != w.shape() {
                    return Err(Error::invalid("gradient shape differs from parameter shape"));
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].map(|t| t.data());
            for (j, wj) in w.data_mut().iter_mut().enumerate() {
                let gj = g.map_or(0.0, |g| g[j]) + c.weight_decay * *wj;
                m[j] = c.beta1 * m[j] + (1.0 - c.beta1) * gj;
                v[j] = c.beta2 * v[j] + (1.0 - c.beta2) * gj * gj;
                *wj -= lr * (m[j] / bc1) / (libm::sqrt(v[j] / bc2) + c.eps);
            }
        }
        Ok(())
    }
}
