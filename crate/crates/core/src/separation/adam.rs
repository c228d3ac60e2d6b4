use crate::error::{Error, Result};
use crate::layers::{ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates for every trainable parameter.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    ids: Vec<ParamId>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(store: &ParamStore, config: AdamConfig) -> Self {
        let ids = store.trainable_ids();
        let zeros: Vec<Tensor> = ids.iter().map(|&id| Tensor::zeros(store.get(id).shape())).collect();
        AdamState {
            config,
            step: 0,
            ids,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One bias-corrected update. `grads` must list the trainable parameters
    /// in store order, as [`crate::layers::Forward::param_grads`] returns them.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(ParamId, Tensor)], lr: f64) -> Result<()> {
        if grads.len() != self.ids.len() || grads.iter().zip(&self.ids).any(|((a, _), b)| a != b) {
            return Err(Error::invalid(
                "gradients do not line up with the optimizer's parameters",
            ));
        }
        for (id, g) in grads {
            if !g.is_finite() {
                return Err(Error::NonFinite(format!(
                    "gradient of '{}' at step {}",
                    store.entry(*id).name,
                    self.step + 1
                )));
            }
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (id, g)) in grads.iter().enumerate() {
            let p = store.get_mut(*id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (((p, g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
