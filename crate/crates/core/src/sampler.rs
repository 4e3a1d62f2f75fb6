//! Euler integration of a learned velocity field along a power-law time schedule.

use std::io::Write;
use std::path::Path;

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::decoder::Decoder;
use crate::error::{Error, Result};
use crate::flow::one_step_prediction;

/// Descending times `t_i = ((N−i+1)/N)^ρ`, `i = 1..N`; integration ends at an implicit `t = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSchedule {
    pub timesteps: Vec<f64>,
    pub n_steps: usize,
    pub rho: f64,
}

impl SampleSchedule {
    /// Consecutive `(t, t_next)` pairs, ending at exactly 0.
    pub fn pairs(&self) -> Vec<(f64, f64)> {
        let mut out = Vec::with_capacity(self.n_steps);
        for (i, &t) in self.timesteps.iter().enumerate() {
            out.push((t, self.timesteps.get(i + 1).copied().unwrap_or(0.0)));
        }
        out
    }
}

pub fn make_schedule(n_steps: usize, rho: f64) -> Result<SampleSchedule> {
    if n_steps < 1 {
        return Err(Error::InvalidArgument("schedule needs at least one step".into()));
    }
    if !(rho >= 1.0) || !rho.is_finite() {
        return Err(Error::InvalidArgument(format!("schedule exponent must be ≥ 1, got {rho}")));
    }
    let n = n_steps as f64;
    let timesteps = (1..=n_steps).map(|i| ((n - i as f64 + 1.0) / n).powf(rho)).collect();
    Ok(SampleSchedule { timesteps, n_steps, rho })
}

/// `x_next = x_t + (t − t_next)·ν̂`.
pub fn euler_step(x_t: &Tensor, t: f64, t_next: f64, nu_hat: &Tensor) -> Result<Tensor> {
    if !(0.0 <= t_next && t_next < t && t <= 1.0) {
        return Err(Error::InvalidArgument(format!("Euler step needs 0 ≤ t_next < t ≤ 1, got t={t}, t_next={t_next}")));
    }
    if x_t.dims() != nu_hat.dims() {
        return Err(Error::Shape(format!("state {:?} vs velocity {:?}", x_t.dims(), nu_hat.dims())));
    }
    Ok((x_t + (nu_hat * (t - t_next))?)?)
}

/// Anything that predicts `ν̂ = D(x_t | t, z)`.
pub trait VelocityField {
    fn velocity(&self, x_t: &Tensor, t: f64, z: &Tensor) -> Result<Tensor>;
}

impl VelocityField for Decoder {
    fn velocity(&self, x_t: &Tensor, t: f64, z: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x_t, &[t], z)?.velocity)
    }
}

/// The exact field for a known endpoint pair: always returns `x* − ε`.
#[derive(Debug, Clone)]
pub struct AnalyticField {
    pub target: Tensor,
    pub epsilon: Tensor,
}

impl VelocityField for AnalyticField {
    fn velocity(&self, x_t: &Tensor, _t: f64, _z: &Tensor) -> Result<Tensor> {
        if x_t.dims() != self.target.dims() {
            return Err(Error::Shape(format!("analytic field built for {:?}, got {:?}", self.target.dims(), x_t.dims())));
        }
        Ok((&self.target - &self.epsilon)?)
    }
}

pub fn sample(field: &dyn VelocityField, epsilon: &Tensor, z: &Tensor, schedule: &SampleSchedule) -> Result<Tensor> {
    let mut x = epsilon.clone();
    for (t, t_next) in schedule.pairs() {
        let nu = field.velocity(&x, t, z)?;
        x = euler_step(&x, t, t_next, &nu)?;
    }
    Ok(x)
}

/// `ε + D(ε | 1, z)`.
pub fn single_step(field: &dyn VelocityField, epsilon: &Tensor, z: &Tensor) -> Result<Tensor> {
    let nu = field.velocity(epsilon, 1.0, z)?;
    one_step_prediction(epsilon, &[1.0], &nu)
}

/// One row of a step/ρ sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "N")]
    pub n: usize,
    pub rho: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub perceptual: f64,
    pub frechet: f64,
}

pub const SWEEP_HEADER: &str = "N,rho,psnr,ssim,perceptual,frechet";

pub fn write_sweep_csv(rows: &[SweepRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{},{}", r.n, r.rho, r.psnr, r.ssim, r.perceptual, r.frechet)?;
    }
    Ok(())
}
