//! AdamW with global-norm gradient clipping.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled decay, applied to weight matrices only.
    pub weight_decay: f64,
    /// Global gradient norm limit; `0` disables clipping.
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 0.01, clip_norm: 1.0 }
    }
}

impl OptimConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && self.clip_norm >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

fn decays(name: &str) -> bool {
    name.ends_with(".w")
}

pub struct AdamW {
    pub cfg: OptimConfig,
    step: u64,
    moments: HashMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(cfg: OptimConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, step: 0, moments: HashMap::new() })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Clips the accumulated gradients, applies one update and returns the
    /// gradient norm before clipping.
    pub fn step(&mut self, params: &mut ParamStore) -> Result<f64> {
        let norm = params.grad_norm();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient".into()));
        }
        if self.cfg.clip_norm > 0.0 && norm > self.cfg.clip_norm {
            params.scale_grads(self.cfg.clip_norm / norm);
        }
        self.step += 1;
        let c = &self.cfg;
        let bias1 = 1.0 - c.beta1.powi(self.step as i32);
        let bias2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p, g) in params.params_and_grads_mut() {
            let (m, v) = self
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (Tensor::zeros(p.shape()), Tensor::zeros(p.shape())));
            let decay = if decays(name) { c.lr * c.weight_decay } else { 0.0 };
            let it = p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()));
            for ((w, &gr), (mi, vi)) in it {
                *mi = c.beta1 * *mi + (1.0 - c.beta1) * gr;
                *vi = c.beta2 * *vi + (1.0 - c.beta2) * gr * gr;
                let update = (*mi / bias1) / ((*vi / bias2).sqrt() + c.eps);
                *w -= c.lr * update + decay * *w;
            }
        }
        Ok(norm)
    }
}
