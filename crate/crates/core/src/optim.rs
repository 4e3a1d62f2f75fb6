//! AdamW with a constant learning rate and global-norm gradient clipping.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{Device, Tensor, Var};

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamW {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub steps: u64,
    first: BTreeMap<String, Tensor>,
    second: BTreeMap<String, Tensor>,
}

/// What one optimizer step saw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepStats {
    pub grad_norm: f64,
    pub clip_scale: f64,
}

impl AdamW {
    pub fn new(learning_rate: f64, weight_decay: f64, grad_clip: Option<f64>) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            grad_clip,
            steps: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    /// Update every variable in `params` that received a gradient.
    pub fn step(&mut self, params: &[(String, Var)], grads: &GradStore) -> Result<StepStats> {
        let present: Vec<(&String, &Var, &Tensor)> =
            params.iter().filter_map(|(n, v)| grads.get(v.as_tensor()).map(|g| (n, v, g))).collect();
        let mut sq = 0.0;
        for (_, _, g) in &present {
            sq += g.sqr()?.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite { step: self.steps, detail: format!("gradient norm {grad_norm}") });
        }
        let clip_scale = match self.grad_clip {
            Some(c) if grad_norm > c => c / grad_norm,
            _ => 1.0,
        };
        self.steps += 1;
        let t = self.steps as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, var, g) in present {
            let g = (g * clip_scale)?;
            let m = match self.first.get(name) {
                Some(m) => ((m * self.beta1)? + (&g * (1.0 - self.beta1))?)?,
                None => (&g * (1.0 - self.beta1))?,
            };
            let v = match self.second.get(name) {
                Some(v) => ((v * self.beta2)? + (g.sqr()? * (1.0 - self.beta2))?)?,
                None => (g.sqr()? * (1.0 - self.beta2))?,
            };
            let update = ((&m / bc1)? / ((&v / bc2)?.sqrt()? + self.eps)?)?;
            let w = var.as_tensor();
            let decayed = (w * (1.0 - self.learning_rate * self.weight_decay))?;
            var.set(&(decayed - (update * self.learning_rate)?)?)?;
            self.first.insert(name.clone(), m);
            self.second.insert(name.clone(), v);
        }
        Ok(StepStats { grad_norm, clip_scale })
    }

    /// Moment buffers under `m/<name>` and `v/<name>`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut all = BTreeMap::new();
        for (k, v) in &self.first {
            all.insert(format!("m/{k}"), v.clone());
        }
        for (k, v) in &self.second {
            all.insert(format!("v/{k}"), v.clone());
        }
        crate::params::save_tensors(&all, path)
    }

    pub fn load_moments(&mut self, path: impl AsRef<Path>, steps: u64) -> Result<()> {
        let all = candle_core::safetensors::load(path, &Device::Cpu)?;
        self.first.clear();
        self.second.clear();
        for (k, v) in all {
            if let Some(n) = k.strip_prefix("m/") {
                self.first.insert(n.to_string(), v);
            } else if let Some(n) = k.strip_prefix("v/") {
                self.second.insert(n.to_string(), v);
            }
        }
        self.steps = steps;
        Ok(())
    }
}
