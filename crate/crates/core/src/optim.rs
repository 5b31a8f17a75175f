//! Adam optimizer.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape, Result};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    /// lr 2e-4, beta1 0.5, beta2 0.999.
    fn default() -> Self {
        Self { learning_rate: 2e-4, beta1: 0.5, beta2: 0.999, epsilon: 1e-8 }
    }
}

/// Adam state for one [`ParamStore`]; moments are indexed like the store.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Tensor<S>>,
    pub second_moment: Vec<Tensor<S>>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(store: &ParamStore<S>, config: AdamConfig) -> Self {
        let zeros: Vec<Tensor<S>> = store.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
        Self { config, step: 0, first_moment: zeros.clone(), second_moment: zeros }
    }

    /// One update of every trainable parameter that received a gradient.
    pub fn update(&mut self, store: &mut ParamStore<S>, grads: &[Option<Tensor<S>>]) -> Result<()> {
        if grads.len() != store.len() || self.first_moment.len() != store.len() {
            return Err(shape("optimizer state does not match parameter store"));
        }
        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let bc1 = 1.0 - libm::pow(c.beta1, t as f64);
        let bc2 = 1.0 - libm::pow(c.beta2, t as f64);
        let (b1, b2) = (S::from_f64_lossy(c.beta1), S::from_f64_lossy(c.beta2));
        let step_size = S::from_f64_lossy(c.learning_rate * libm::sqrt(bc2) / bc1);
        let eps = S::from_f64_lossy(c.epsilon * libm::sqrt(bc2));
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = store.get_mut(i);
            if !p.trainable {
                continue;
            }
            if g.shape() != p.value.shape() {
                return Err(shape(alloc::format!("gradient shape mismatch for {}", p.name)));
            }
            let m = self.first_moment[i].data_mut();
            let v = self.second_moment[i].data_mut();
            for (((w, &gv), mv), vv) in p.value.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + (S::one() - b1) * gv;
                *vv = b2 * *vv + (S::one() - b2) * gv * gv;
                *w -= step_size * *mv / (vv.sqrt() + eps);
            }
        }
        Ok(())
    }
}
