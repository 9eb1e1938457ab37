//! AdamW with decoupled weight decay.

use crate::error::{Error, Result};
use crate::nn::{GradientBundle, ParamTensors};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: AdamWConfig,
    pub step: u64,
    first_moment: Vec<Tensor>,
    second_moment: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new<P: ParamTensors + ?Sized>(params: &P, config: AdamWConfig) -> Self {
        let zeros = || params.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            step: 0,
            first_moment: zeros(),
            second_moment: zeros(),
        }
    }

    /// One AdamW step minimizing the loss whose gradient is `grads`.
    ///
    /// Non-finite gradients leave both the parameters and the state untouched.
    pub fn step<P: ParamTensors + ?Sized>(&mut self, params: &mut P, grads: &GradientBundle) -> Result<()> {
        if !grads.is_congruent(params) || self.first_moment.len() != grads.tensors.len() {
            return Err(Error::invalid("gradient bundle not congruent with parameters"));
        }
        if let Some((t, i)) = grads.first_non_finite() {
            return Err(Error::NonFinite {
                context: format!("gradient tensor {t}"),
                index: i,
            });
        }
        let AdamWConfig {
            lr,
            weight_decay,
            beta1,
            beta2,
            eps,
        } = self.config;
        self.step += 1;
        let bias1 = 1.0 - beta1.powi(self.step as i32);
        let bias2 = 1.0 - beta2.powi(self.step as i32);
        let decay = 1.0 - lr * weight_decay;
        for (k, p) in params.tensors_mut().iter_mut().enumerate() {
            let g = grads.tensors[k].data();
            let m = self.first_moment[k].data_mut();
            let v = self.second_moment[k].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                *w = *w * decay - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
