//! Exponential moving average of model weights.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{Error, Result};
use crate::params::{hash_tensors, ParamStore};

#[derive(Debug, Clone)]
pub struct EmaState {
    pub shadow: BTreeMap<String, Tensor>,
    pub decay: f64,
    pub start_step: u64,
}

impl EmaState {
    pub fn new(live: &ParamStore, decay: f64, start_step: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self { shadow: live.snapshot()?, decay, start_step })
    }

    /// Track the live weights after optimizer step `step`: copy them verbatim
    /// before `start_step`, average afterwards.
    pub fn observe(&mut self, step: u64, live: &ParamStore) -> Result<()> {
        if step < self.start_step {
            self.shadow = live.snapshot()?;
            Ok(())
        } else {
            ema_update(self, live)
        }
    }

    pub fn hash(&self) -> Result<String> {
        hash_tensors(self.shadow.iter().map(|(k, v)| (k.as_str(), v)))
    }

    /// A parameter store holding the averaged weights.
    pub fn to_store(&self, like: &ParamStore) -> Result<ParamStore> {
        let store = like.deep_clone()?;
        store.assign_from(&self.shadow)?;
        Ok(store)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::params::save_tensors(&self.shadow, path)
    }

    pub fn load(path: impl AsRef<Path>, decay: f64, start_step: u64) -> Result<Self> {
        let shadow: BTreeMap<String, Tensor> = candle_core::safetensors::load(path, &Device::Cpu)?.into_iter().collect();
        Ok(Self { shadow, decay, start_step })
    }
}

/// `shadow ← d·shadow + (1−d)·live`, elementwise.
pub fn ema_update(state: &mut EmaState, live: &ParamStore) -> Result<()> {
    if state.shadow.len() != live.len() {
        return Err(Error::Shape(format!("EMA holds {} tensors, live model {}", state.shadow.len(), live.len())));
    }
    let d = state.decay;
    for (name, var) in live.iter() {
        let s = state
            .shadow
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("EMA has no entry for {name}")))?;
        if s.dims() != var.dims() {
            return Err(Error::Shape(format!("EMA entry {name} is {:?}, live is {:?}", s.dims(), var.dims())));
        }
        *s = ((&*s * d)? + (var.as_tensor() * (1.0 - d))?)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Init;
    use candle_core::DType;

    fn store_with(value: f64) -> ParamStore {
        let mut s = ParamStore::new(DType::F64, 0);
        s.get_or_init("w", &[3], Init::Zeros).unwrap();
        s.get("w").unwrap().set(&Tensor::full(value, 3, &Device::Cpu).unwrap()).unwrap();
        s
    }

    fn shadow_value(e: &EmaState) -> f64 {
        e.shadow["w"].to_vec1::<f64>().unwrap()[0]
    }

    #[test]
    fn geometric_closed_form() {
        let s0 = store_with(2.0);
        let mut ema = EmaState::new(&s0, 0.9, 0).unwrap();
        let live = store_with(-1.0);
        for k in 1..=25 {
            ema.observe(k, &live).unwrap();
            let expect = -1.0 + 0.9f64.powi(k as i32) * (2.0 - -1.0);
            assert!((shadow_value(&ema) - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn decay_limits() {
        let s0 = store_with(2.0);
        let live = store_with(5.0);
        let mut ema = EmaState::new(&s0, 0.0, 0).unwrap();
        ema.observe(0, &live).unwrap();
        assert_eq!(shadow_value(&ema), 5.0);
        let mut ema = EmaState::new(&s0, 1.0, 0).unwrap();
        for k in 0..5 {
            ema.observe(k, &live).unwrap();
        }
        assert_eq!(shadow_value(&ema), 2.0);
    }

    #[test]
    fn copies_before_start_step() {
        let s0 = store_with(2.0);
        let mut ema = EmaState::new(&s0, 0.999, 10).unwrap();
        ema.observe(3, &store_with(7.0)).unwrap();
        assert_eq!(shadow_value(&ema), 7.0);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let s0 = store_with(2.0);
        let mut ema = EmaState::new(&s0, 0.5, 0).unwrap();
        let mut other = ParamStore::new(DType::F64, 0);
        other.get_or_init("w", &[4], Init::Zeros).unwrap();
        assert!(ema.observe(0, &other).is_err());
    }
}
