//! Independent reference implementations shared by the integration tests and
//! the acceptance runner. Each one is written for clarity, not speed.

#![allow(dead_code)]

use candle_core::{DType, Device, Tensor, Var};
use diffdec_core::flow::{one_step_prediction, shifted_target};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn f64_tensor(v: Vec<f64>, shape: &[usize]) -> Tensor {
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

pub fn host(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    host(a).iter().zip(host(b)).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max)
}

/// `((N−i+1)/N)^ρ` from integer numerators.
pub fn schedule_oracle(n: usize, rho: f64) -> Vec<f64> {
    (1..=n).map(|i| ((n - i + 1) as f64 / n as f64).powf(rho)).collect()
}

/// KL(N(μ, σ²) ‖ N(0, 1)) by composite Simpson quadrature of p·log(p/q)
/// over μ ± 14σ, written in terms of the standardized variable.
pub fn kl_quadrature(mu: f64, log_var: f64) -> f64 {
    let sigma = (0.5 * log_var).exp();
    let steps = 4000;
    let (a, b) = (-14.0, 14.0);
    let h = (b - a) / steps as f64;
    let integrand = |u: f64| {
        let x = mu + sigma * u;
        let log_p = -0.5 * u * u - sigma.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln();
        let log_q = -0.5 * x * x - 0.5 * (2.0 * std::f64::consts::PI).ln();
        // density in u is φ(u); p(x)dx = φ(u)du
        let phi = (-0.5 * u * u).exp() / (2.0 * std::f64::consts::PI).sqrt();
        phi * (log_p - log_q)
    };
    let mut s = integrand(a) + integrand(b);
    for i in 1..steps {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * integrand(a + i as f64 * h);
    }
    s * h / 3.0
}

/// Per-dimension closed form for diagonal covariances.
pub fn frechet_diagonal(mu_a: &[f64], var_a: &[f64], mu_b: &[f64], var_b: &[f64]) -> f64 {
    (0..mu_a.len())
        .map(|i| (mu_a[i] - mu_b[i]).powi(2) + (var_a[i].sqrt() - var_b[i].sqrt()).powi(2))
        .sum()
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

/// Density and coverage with full sorts and explicit loops.
pub fn density_coverage_brute(real: &[Vec<f64>], fake: &[Vec<f64>], k: usize) -> (f64, f64) {
    let radius: Vec<f64> = (0..real.len())
        .map(|i| {
            let mut d: Vec<f64> = (0..real.len()).filter(|&j| j != i).map(|j| euclid(&real[i], &real[j])).collect();
            d.sort_by(|a, b| a.partial_cmp(b).unwrap());
            d[k - 1]
        })
        .collect();
    let mut density = 0.0;
    for f in fake {
        for (i, r) in real.iter().enumerate() {
            if euclid(f, r) <= radius[i] {
                density += 1.0;
            }
        }
    }
    density /= (k * fake.len()) as f64;
    let mut covered = 0.0;
    for (i, r) in real.iter().enumerate() {
        let nearest = fake.iter().map(|f| euclid(f, r)).fold(f64::INFINITY, f64::min);
        if nearest <= radius[i] {
            covered += 1.0;
        }
    }
    (density, covered / real.len() as f64)
}

pub fn psnr_loop(a: &[f64], b: &[f64], peak: f64) -> f64 {
    let mut sse = 0.0;
    for i in 0..a.len() {
        sse += (a[i] - b[i]) * (a[i] - b[i]);
    }
    let mse = sse / a.len() as f64;
    if mse < peak * peak * 1e-10 {
        100.0
    } else {
        (10.0 * (peak * peak / mse).log10()).min(100.0)
    }
}

/// Mean SSIM over every 7×7 window of every plane, recomputing each window from scratch.
pub fn ssim_loop(a: &[f64], b: &[f64], planes: usize, h: usize, w: usize, peak: f64) -> f64 {
    let k = 7;
    let c1 = (0.01 * peak).powi(2);
    let c2 = (0.03 * peak).powi(2);
    let n = (k * k) as f64;
    let mut total = 0.0;
    let mut count = 0.0;
    for p in 0..planes {
        let at = |y: usize, x: usize| a[p * h * w + y * w + x];
        let bt = |y: usize, x: usize| b[p * h * w + y * w + x];
        for y0 in 0..=h - k {
            for x0 in 0..=w - k {
                let (mut ma, mut mb) = (0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        ma += at(y, x);
                        mb += bt(y, x);
                    }
                }
                ma /= n;
                mb /= n;
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + k {
                    for x in x0..x0 + k {
                        va += (at(y, x) - ma).powi(2);
                        vb += (bt(y, x) - mb).powi(2);
                        cov += (at(y, x) - ma) * (bt(y, x) - mb);
                    }
                }
                va /= n;
                vb /= n;
                cov /= n;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1.0;
            }
        }
    }
    total / count
}

/// Smooth nonlinear surrogate for a perceptual loss: Σ log(1 + (a−b)²).
pub fn surrogate(a: &Tensor, b: &Tensor) -> Tensor {
    ((a - b).unwrap().sqr().unwrap() + 1.0).unwrap().log().unwrap().sum_all().unwrap()
}

/// Largest relative difference between the two sides of the shifted-target
/// identity for one random toy instance (batch 2, one pixel each).
pub fn shifted_identity_error(rng: &mut ChaCha8Rng, lambda: f64, t: f64) -> f64 {
    let shape = [2usize, 1, 1, 2];
    let x = f64_tensor(normal_vec(rng, 4), &shape);
    let eps = f64_tensor(normal_vec(rng, 4), &shape);
    let nu_hat_v = normal_vec(rng, 4);
    let x_t = ((&x * (1.0 - t)).unwrap() + (&eps * t).unwrap()).unwrap();
    let nu = (&x - &eps).unwrap();

    let nu_hat = Var::from_tensor(&f64_tensor(nu_hat_v.clone(), &shape)).unwrap();
    let x0_hat = one_step_prediction(&x_t, &[t], nu_hat.as_tensor()).unwrap();
    let lhs_loss = ((nu_hat.as_tensor() - &nu).unwrap().sqr().unwrap().sum_all().unwrap()
        + (surrogate(&x0_hat, &x) * lambda).unwrap())
    .unwrap();
    let lhs = lhs_loss.backward().unwrap().get(nu_hat.as_tensor()).unwrap().clone();

    // ∇L with respect to x̂0 at the current prediction, then held constant.
    let x0_var = Var::from_tensor(&x0_hat.detach()).unwrap();
    let grad_l = surrogate(x0_var.as_tensor(), &x).backward().unwrap().get(x0_var.as_tensor()).unwrap().clone();
    let target = shifted_target(&nu, &[t], lambda, &grad_l).unwrap();
    let nu_hat2 = Var::from_tensor(&f64_tensor(nu_hat_v, &shape)).unwrap();
    let rhs_loss = (nu_hat2.as_tensor() - &target).unwrap().sqr().unwrap().sum_all().unwrap();
    let rhs = rhs_loss.backward().unwrap().get(nu_hat2.as_tensor()).unwrap().clone();

    let scale = host(&lhs).iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-300);
    max_abs_diff(&lhs, &rhs) / scale
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    rng.random_range(lo..hi)
}
