//! Linear-interpolant flow matching: `x_t = (1−t)·x + t·ε`, velocity `ν = x − ε`.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A noised batch together with everything needed to rebuild it.
#[derive(Debug, Clone)]
pub struct NoisyState {
    pub x_t: Tensor,
    pub t: Vec<f64>,
    pub epsilon: Tensor,
}

/// Per-term losses of one training step, as host scalars.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fm: f64,
    pub lpips: f64,
    pub repa: f64,
    pub kl: f64,
    pub total: f64,
}

/// Weights of the auxiliary terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub lpips: f64,
    pub repa: f64,
    pub kl: f64,
}

impl LossBreakdown {
    pub fn compose(fm: f64, lpips: f64, repa: f64, kl: f64, w: LossWeights) -> Self {
        let total = fm + w.lpips * lpips + w.repa * repa + w.kl * kl;
        Self { fm, lpips, repa, kl, total }
    }

    pub fn is_finite(&self) -> bool {
        [self.fm, self.lpips, self.repa, self.kl, self.total].iter().all(|v| v.is_finite())
    }
}

/// Interpolation path with an optional noise floor `σ_min`:
/// `x_t = (1 − (1−σ)t)·x + t·ε`, `ν = (1−σ)·x − ε`. With `σ_min = 0` this is
/// the plain linear interpolant.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct FlowPath {
    pub sigma_min: f64,
}

/// Broadcastable (B, 1, 1, 1) column of per-sample times; a single entry is shared.
pub fn time_column(t: &[f64], batch: usize, dtype: DType) -> Result<Tensor> {
    let v: Vec<f64> = match t.len() {
        1 => vec![t[0]; batch],
        n if n == batch => t.to_vec(),
        n => return Err(Error::Shape(format!("{n} timesteps for a batch of {batch}"))),
    };
    Ok(Tensor::from_vec(v, (batch, 1, 1, 1), &Device::Cpu)?.to_dtype(dtype)?)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Shape(format!("shape mismatch {:?} vs {:?}", a.dims(), b.dims())));
    }
    Ok(())
}

fn batch_of(x: &Tensor) -> Result<usize> {
    Ok(x.dims().first().copied().unwrap_or(1))
}

impl FlowPath {
    pub fn interpolate(&self, x: &Tensor, epsilon: &Tensor, t: &[f64]) -> Result<Tensor> {
        same_shape(x, epsilon)?;
        if t.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!("timesteps must lie in [0, 1], got {t:?}")));
        }
        let col = time_column(t, batch_of(x)?, x.dtype())?;
        let keep = ((&col * -(1.0 - self.sigma_min))? + 1.0)?;
        Ok((x.broadcast_mul(&keep)? + epsilon.broadcast_mul(&col)?)?)
    }

    pub fn velocity_target(&self, x: &Tensor, epsilon: &Tensor) -> Result<Tensor> {
        same_shape(x, epsilon)?;
        Ok(((x * (1.0 - self.sigma_min))? - epsilon)?)
    }

    pub fn noisy_state(&self, x: &Tensor, epsilon: &Tensor, t: Vec<f64>) -> Result<NoisyState> {
        let x_t = self.interpolate(x, epsilon, &t)?;
        Ok(NoisyState { x_t, t, epsilon: epsilon.clone() })
    }
}

pub fn interpolate(x: &Tensor, epsilon: &Tensor, t: &[f64]) -> Result<Tensor> {
    FlowPath::default().interpolate(x, epsilon, t)
}

pub fn velocity_target(x: &Tensor, epsilon: &Tensor) -> Result<Tensor> {
    FlowPath::default().velocity_target(x, epsilon)
}

/// Logit-normal draw `sigmoid(m + s·n)`.
pub fn sample_timestep(rng: &mut impl Rng, m: f64, s: f64) -> f64 {
    let n: f64 = StandardNormal.sample(rng);
    logit_normal(n, m, s)
}

pub fn logit_normal(n: f64, m: f64, s: f64) -> f64 {
    1.0 / (1.0 + (-(m + s * n)).exp())
}

pub fn sample_timesteps(rng: &mut impl Rng, count: usize, m: f64, s: f64) -> Result<Vec<f64>> {
    if !(s > 0.0) {
        return Err(Error::InvalidArgument(format!("logit-normal scale must be positive, got {s}")));
    }
    Ok((0..count).map(|_| sample_timestep(rng, m, s)).collect())
}

/// Mean squared error between `ν̂` and a velocity target.
pub fn fm_loss_against(nu_hat: &Tensor, target: &Tensor) -> Result<Tensor> {
    same_shape(nu_hat, target)?;
    Ok((nu_hat - target)?.sqr()?.mean_all()?)
}

pub fn fm_loss(nu_hat: &Tensor, x: &Tensor, epsilon: &Tensor) -> Result<Tensor> {
    fm_loss_against(nu_hat, &velocity_target(x, epsilon)?)
}

/// `x̂0 = x_t + t·ν̂`.
pub fn one_step_prediction(x_t: &Tensor, t: &[f64], nu_hat: &Tensor) -> Result<Tensor> {
    same_shape(x_t, nu_hat)?;
    let col = time_column(t, batch_of(x_t)?, x_t.dtype())?;
    Ok((x_t + nu_hat.broadcast_mul(&col)?)?)
}

/// `ν − (λ·t/2)·∇L`, the regression target whose plain FM loss has the same
/// gradient in `ν̂` as FM plus `λ·L(x̂0)`.
pub fn shifted_target(nu: &Tensor, t: &[f64], lambda: f64, grad_l: &Tensor) -> Result<Tensor> {
    same_shape(nu, grad_l)?;
    let col = (time_column(t, batch_of(nu)?, nu.dtype())? * (lambda / 2.0))?;
    Ok((nu - grad_l.broadcast_mul(&col)?)?)
}
