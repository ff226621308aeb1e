//! Bias-corrected Adam.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::math;
use crate::nn::{ParamKind, ParamStore};
use crate::tensor::{Result, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 4e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every trainable parameter, keyed by parameter name.
/// Moments are held at `f32` precision, like the parameters themselves.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    pub moments: Vec<(String, Tensor, Tensor)>,
}

impl AdamState {
    pub fn new(config: AdamConfig, store: &ParamStore) -> AdamState {
        let moments = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(_, p)| (p.name.clone(), Tensor::zeros(p.value.shape()), Tensor::zeros(p.value.shape())))
            .collect();
        AdamState {
            config,
            step: 0,
            moments,
        }
    }

    /// Apply one update from the gradients held in `store`. A missing or
    /// non-finite gradient aborts before any parameter changes.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let ids: Vec<_> = store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Trainable)
            .map(|(id, _)| id)
            .collect();
        if ids.len() != self.moments.len() {
            return Err(TensorError::Invalid("optimizer state does not match the parameter set".into()));
        }
        for (&id, (name, m, _)) in ids.iter().zip(&self.moments) {
            let p = store.get(id);
            if &p.name != name || p.value.shape() != m.shape() {
                return Err(TensorError::Invalid(alloc::format!("optimizer state for '{name}' does not match '{}'", p.name)));
            }
            match &p.grad {
                None => return Err(TensorError::Invalid(alloc::format!("no gradient for '{}'", p.name))),
                Some(g) if !g.all_finite() => {
                    return Err(TensorError::NonFinite {
                        op: alloc::format!("gradient of {}", p.name),
                    })
                }
                Some(_) => {}
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - math::powi(c.beta1, t);
        let bc2 = 1.0 - math::powi(c.beta2, t);
        for (&id, (_, m, v)) in ids.iter().zip(self.moments.iter_mut()) {
            let p = store.get_mut(id);
            let g = p.grad.as_ref().expect("checked above").data();
            let (m, v) = (m.data_mut(), v.data_mut());
            for (k, w) in p.value.data_mut().iter_mut().enumerate() {
                let mk = c.beta1 * m[k] + (1.0 - c.beta1) * g[k];
                let vk = c.beta2 * v[k] + (1.0 - c.beta2) * g[k] * g[k];
                let mhat = mk / bc1;
                let vhat = vk / bc2;
                *w = math::to_f32_precision(*w - c.lr * mhat / (math::sqrt(vhat) + c.eps));
                m[k] = math::to_f32_precision(mk);
                v[k] = math::to_f32_precision(vk);
            }
        }
        Ok(())
    }
}
