//! WebAssembly bindings for the browser demo. Each export returns a JSON
//! string that the page parses; the plain Rust functions behind them are
//! what the tests exercise.

use diffdec_core::metrics::density_coverage;
use diffdec_core::rng::stream;
use diffdec_core::sampler::make_schedule;
use diffdec_core::tradeoff::{draw_samples, histogram, histogram_kl, HIGH, LOW};
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct ScheduleCurve {
    pub rho: f64,
    pub timesteps: Vec<f64>,
}

/// `t_i` for every requested exponent at a fixed step count.
pub fn schedule_curves(n_steps: usize, rhos: &[f64]) -> Result<Vec<ScheduleCurve>, String> {
    rhos.iter()
        .map(|&rho| {
            let s = make_schedule(n_steps, rho).map_err(|e| e.to_string())?;
            Ok(ScheduleCurve { rho, timesteps: s.timesteps })
        })
        .collect()
}

#[derive(Debug, Serialize)]
pub struct TradeoffView {
    pub low: f64,
    pub high: f64,
    pub data: Vec<f64>,
    pub deterministic: Vec<f64>,
    pub generative: Vec<f64>,
    pub mse_deterministic: f64,
    pub mse_generative: f64,
    pub kl_generative: f64,
}

/// Normalized histograms of data and both decoders' outputs.
pub fn tradeoff_view(n: usize, seed: u64) -> TradeoffView {
    let s = draw_samples(n.max(1), &mut stream(seed));
    let norm = |v: &[f64]| -> Vec<f64> { histogram(v).iter().map(|c| c / v.len() as f64).collect() };
    let mse = |y: &[f64]| s.x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / s.x.len() as f64;
    TradeoffView {
        low: LOW,
        high: HIGH,
        data: norm(&s.x),
        deterministic: norm(&s.deterministic),
        generative: norm(&s.generative),
        mse_deterministic: mse(&s.deterministic),
        mse_generative: mse(&s.generative),
        kl_generative: histogram_kl(&s.x, &s.generative),
    }
}

#[derive(Debug, Serialize)]
pub struct CoverageView {
    pub real: Vec<[f64; 2]>,
    pub fake: Vec<[f64; 2]>,
    pub density: f64,
    pub coverage: f64,
}

/// Real points from N(0, I) and fake points from N(shift, spread² I) in 2D.
pub fn coverage_view(n_real: usize, n_fake: usize, shift: f64, spread: f64, k: usize, seed: u64) -> Result<CoverageView, String> {
    let mut rng = stream(seed);
    let mut point = |m: f64, s: f64| -> [f64; 2] {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        [m + s * a, s * b]
    };
    let real: Vec<[f64; 2]> = (0..n_real).map(|_| point(0.0, 1.0)).collect();
    let fake: Vec<[f64; 2]> = (0..n_fake).map(|_| point(shift, spread)).collect();
    let rows = |p: &[[f64; 2]]| p.iter().map(|v| v.to_vec()).collect::<Vec<_>>();
    let (density, coverage) = density_coverage(&rows(&real), &rows(&fake), k).map_err(|e| e.to_string())?;
    Ok(CoverageView { real, fake, density, coverage })
}

fn to_json<T: Serialize>(v: &T) -> Result<String, JsValue> {
    serde_json::to_string(v).map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn schedules(n_steps: usize, rhos: Vec<f64>) -> Result<String, JsValue> {
    to_json(&schedule_curves(n_steps, &rhos).map_err(|e| JsValue::from_str(&e))?)
}

#[wasm_bindgen]
pub fn tradeoff(n: usize, seed: u32) -> Result<String, JsValue> {
    to_json(&tradeoff_view(n, seed.into()))
}

#[wasm_bindgen]
pub fn coverage(n_real: usize, n_fake: usize, shift: f64, spread: f64, k: usize, seed: u32) -> Result<String, JsValue> {
    to_json(&coverage_view(n_real, n_fake, shift, spread, k, seed.into()).map_err(|e| JsValue::from_str(&e))?)
}
