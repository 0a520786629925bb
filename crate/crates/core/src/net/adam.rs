use ndarray::Zip;
use serde::{Deserialize, Serialize};

use super::ParamSet;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam moments mirroring a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: ParamSet,
    v: ParamSet,
}

impl AdamState {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            step: 0,
            m: ParamSet::zeros(),
            v: ParamSet::zeros(),
        }
    }

    /// One bias-corrected Adam update. Non-finite gradients abort before any
    /// state is touched.
    pub fn step(&mut self, params: &mut ParamSet, grads: &ParamSet) -> Result<()> {
        self.step_scaled(params, grads, |_| 1.0)
    }

    /// As [`AdamState::step`], with the learning rate of each tensor multiplied
    /// by `lr_scale(tensor name)`.
    pub fn step_scaled(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        lr_scale: impl Fn(&str) -> f64,
    ) -> Result<()> {
        if let Some(name) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let ps = params.tensors_mut();
        let ms = self.m.tensors_mut();
        let vs = self.v.tensors_mut();
        for (((name, p), (_, m)), ((_, v), (_, g))) in ps
            .into_iter()
            .zip(ms)
            .zip(vs.into_iter().zip(grads.tensors()))
        {
            let lr = lr * lr_scale(name);
            Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
        if let Some(name) = params.first_non_finite() {
            return Err(Error::NonFinite(format!("parameter {name} after update")));
        }
        Ok(())
    }
}
