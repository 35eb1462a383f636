use super::params::{Grads, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments for one parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &ParamStore, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor> = params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.rows, t.cols))
            .collect();
        Self {
            config,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients abort the step
    /// before anything is modified.
    pub fn step(&mut self, params: &mut ParamStore, grads: &Grads) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(Error::invalid("gradients do not match the parameter store"));
        }
        for (id, g) in params.ids().zip(grads.iter()) {
            if g.shape() != params.get(id).shape() {
                return Err(Error::invalid(format!(
                    "gradient for `{}` has shape {:?}",
                    params.name(id),
                    g.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite(params.name(id).to_owned()));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (i, (id, g)) in params.ids().zip(grads.iter()).enumerate() {
            let p = params.get_mut(id);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..g.data.len() {
                let gj = g.data[j];
                m.data[j] = beta1 * m.data[j] + (1.0 - beta1) * gj;
                v.data[j] = beta2 * v.data[j] + (1.0 - beta2) * gj * gj;
                let mhat = m.data[j] / bc1;
                let vhat = v.data[j] / bc2;
                p.data[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
