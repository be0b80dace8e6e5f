use serde::{Deserialize, Serialize};

use super::{Gradients, NdError, ParamStore, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    /// Rescales the whole gradient to at most this global L2 norm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_grad_norm: Option<f64>,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
            max_grad_norm: None,
        }
    }

    pub fn clipped(mut self, max_grad_norm: Option<f64>) -> Self {
        self.max_grad_norm = max_grad_norm;
        self
    }

    pub fn validate(&self) -> Result<(), NdError> {
        let ok = self.lr >= 0.0
            && self.eps > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && self.beta1 > 0.0
            && (0.0..1.0).contains(&self.beta2)
            && self.beta2 > 0.0
            && self.max_grad_norm.is_none_or(|c| c > 0.0);
        if ok {
            Ok(())
        } else {
            Err(NdError::Contract(format!("invalid Adam config {self:?}")))
        }
    }
}

/// Bias-corrected Adam with one moment pair per parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> Self {
        let zeros = || -> Vec<Tensor> { store.iter().map(|(_, _, v)| Tensor::zeros(v.rows(), v.cols())).collect() };
        Self {
            config,
            first: zeros(),
            second: zeros(),
            step: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, index: usize) -> &Tensor {
        &self.first[index]
    }

    pub fn second_moment(&self, index: usize) -> &Tensor {
        &self.second[index]
    }

    /// Applies one update. Non-finite gradients abort without touching `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) -> Result<(), NdError> {
        if store.len() != self.first.len() {
            return Err(NdError::Shape(format!(
                "optimizer tracks {} tensors, store has {}",
                self.first.len(),
                store.len()
            )));
        }
        if !grads.is_finite() {
            return Err(NdError::PoisonedState(format!(
                "non-finite gradient at optimizer step {}",
                self.step + 1
            )));
        }
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps, max_grad_norm } = self.config;
        let scale = match max_grad_norm {
            Some(c) => {
                let norm = grads.global_norm();
                if norm > c { c / norm } else { 1.0 }
            }
            None => 1.0,
        };
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            let i = id.index();
            let m = self.first[i].data_mut();
            let v = self.second[i].data_mut();
            match grads.get(id) {
                Some(g) => {
                    for ((mk, vk), gk) in m.iter_mut().zip(v.iter_mut()).zip(g.data()) {
                        let gk = gk * scale;
                        *mk = beta1 * *mk + (1.0 - beta1) * gk;
                        *vk = beta2 * *vk + (1.0 - beta2) * gk * gk;
                    }
                }
                None => {
                    for (mk, vk) in m.iter_mut().zip(v.iter_mut()) {
                        *mk *= beta1;
                        *vk *= beta2;
                    }
                }
            }
            if lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id).data_mut();
            for ((pk, mk), vk) in p.iter_mut().zip(m.iter()).zip(v.iter()) {
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                *pk -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
