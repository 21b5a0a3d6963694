//! AdamW with decoupled weight decay, and the step-halving learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// Optimizer state: moment estimates per parameter, kept in f64.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub step_count: u64,
    pub first_moment: Vec<Vec<f64>>,
    pub second_moment: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new<T: Scalar>(config: AdamWConfig, params: &ParamStore<T>) -> Self {
        Self {
            config,
            step_count: 0,
            first_moment: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            second_moment: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    /// One update at the configured learning rate.
    pub fn step<T: Scalar>(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        let lr = self.config.lr;
        self.step_with_lr(params, lr)
    }

    /// One update at learning rate `lr`; consumes every parameter gradient.
    pub fn step_with_lr<T: Scalar>(&mut self, params: &mut ParamStore<T>, lr: f64) -> Result<()> {
        if params.len() != self.first_moment.len() {
            return Err(Error::Optimizer(format!(
                "state tracks {} parameters, store has {}",
                self.first_moment.len(),
                params.len()
            )));
        }
        if let Some(p) = params.iter().find(|p| p.grad.is_none()) {
            return Err(Error::Optimizer(format!("missing gradient for parameter `{}`", p.name)));
        }
        let AdamWConfig {
            beta1,
            beta2,
            eps,
            weight_decay,
            ..
        } = self.config;
        self.step_count += 1;
        let t = self.step_count as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let decay = 1.0 - lr * weight_decay;
        for ((p, m), v) in params
            .iter_mut()
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            let grad = p.grad.take().expect("checked above");
            if grad.numel() != m.len() || p.value.numel() != m.len() {
                return Err(Error::Optimizer(format!("shape drift in parameter `{}`", p.name)));
            }
            for (((w, &g), m), v) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                let g = g.as_f64();
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let decayed = w.as_f64() * decay;
                *w = T::of(decayed - lr * m_hat / (v_hat.sqrt() + eps));
            }
        }
        Ok(())
    }
}

/// `base_lr / 2^k` where `k` counts the halving steps already reached.
pub fn lr_at(step: u64, base_lr: f64, halving_steps: &[u64]) -> f64 {
    let k = halving_steps.iter().filter(|&&s| s <= step).count();
    base_lr / f64::powi(2.0, k as i32)
}
