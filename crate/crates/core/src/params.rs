//! Named parameter store backing every trainable network in the crate.
//!
//! Parameters are candle `Var`s keyed by slash-separated paths such as
//! `decoder/level0/block1/conv1/weight`. Initialization draws from a seeded
//! ChaCha stream in construction order, so a given seed always yields the
//! same weights.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given standard deviation.
    Normal(f64),
}

pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

/// Raw little-endian bytes of a tensor's values in its own dtype.
pub fn tensor_bytes(t: &Tensor) -> Result<Vec<u8>> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F32 => flat.to_vec1::<f32>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        DType::F64 => flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        other => return Err(Error::InvalidArgument(format!("unsupported dtype {other:?}"))),
    })
}

/// Write named tensors as a safetensors archive.
pub fn save_tensors(tensors: &BTreeMap<String, Tensor>, path: impl AsRef<Path>) -> Result<()> {
    let map: std::collections::HashMap<&str, Tensor> = tensors.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    candle_core::safetensors::save(&map, path)?;
    Ok(())
}

/// SHA-256 over (name, shape, bytes) of every entry, in key order.
pub fn hash_tensors<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Result<String> {
    let mut h = Sha256::new();
    for (name, t) in entries {
        h.update(name.as_bytes());
        h.update([0u8]);
        for d in t.dims() {
            h.update((*d as u64).to_le_bytes());
        }
        h.update(tensor_bytes(t)?);
    }
    Ok(hex::encode(h.finalize()))
}

impl ParamStore {
    pub fn new(dtype: DType, seed: u64) -> Self {
        Self { vars: BTreeMap::new(), dtype, rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    /// Returns the existing parameter under `name`, or creates it.
    pub fn get_or_init(&mut self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::Shape(format!("parameter `{name}` has shape {:?}, expected {shape:?}", v.dims())));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let values: Vec<f64> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
        };
        let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Parameters whose name starts with `prefix`.
    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<(String, Var)> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn param_count(&self, prefix: &str) -> usize {
        self.vars.iter().filter(|(k, _)| k.starts_with(prefix)).map(|(_, v)| v.elem_count()).sum()
    }

    pub fn hash(&self) -> Result<String> {
        self.hash_prefix("")
    }

    pub fn hash_prefix(&self, prefix: &str) -> Result<String> {
        hash_tensors(
            self.vars
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.as_str(), v.as_tensor())),
        )
    }

    /// Deep copy of the current values.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Tensor>> {
        self.vars.iter().map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?))).collect()
    }

    /// A store with independent storage holding the same values.
    pub fn deep_clone(&self) -> Result<ParamStore> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamStore { vars, dtype: self.dtype, rng: self.rng.clone() })
    }

    /// Overwrite every parameter present in `values`; missing keys are left untouched.
    pub fn assign_from(&self, values: &BTreeMap<String, Tensor>) -> Result<()> {
        for (k, t) in values {
            if let Some(v) = self.vars.get(k) {
                if v.dims() != t.dims() {
                    return Err(Error::Shape(format!("`{k}`: stored {:?} vs incoming {:?}", v.dims(), t.dims())));
                }
                v.set(&t.to_dtype(self.dtype)?)?;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let map: std::collections::HashMap<String, Tensor> =
            self.vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
        candle_core::safetensors::save(&map, path)?;
        Ok(())
    }

    /// Load a named-weight archive. Networks built on the returned store pick
    /// up the stored values instead of initializing.
    pub fn load(path: impl AsRef<Path>, dtype: DType) -> Result<ParamStore> {
        let map = candle_core::safetensors::load(path, &Device::Cpu)?;
        let mut vars = BTreeMap::new();
        for (k, t) in map {
            vars.insert(k, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(ParamStore { vars, dtype, rng: ChaCha8Rng::seed_from_u64(0) })
    }

    /// Copy entries from another store under a key mapping, e.g. to import an
    /// encoder trained elsewhere. Returns how many entries were copied.
    pub fn import(&mut self, other: &ParamStore, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (k, v) in other.vars.iter().filter(|(k, _)| k.starts_with(from_prefix)) {
            let key = format!("{to_prefix}{}", &k[from_prefix.len()..]);
            let t = v.as_tensor().to_dtype(self.dtype)?.copy()?;
            match self.vars.get(&key) {
                Some(existing) => existing.set(&t)?,
                None => {
                    self.vars.insert(key, Var::from_tensor(&t)?);
                }
            }
            n += 1;
        }
        Ok(n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_seed_deterministic() {
        let mut a = ParamStore::new(DType::F32, 3);
        let mut b = ParamStore::new(DType::F32, 3);
        let mut c = ParamStore::new(DType::F32, 4);
        for s in [&mut a, &mut b, &mut c] {
            s.get_or_init("x/w", &[4, 5], Init::Normal(0.1)).unwrap();
            s.get_or_init("x/b", &[5], Init::Zeros).unwrap();
        }
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), c.hash().unwrap());
    }

    #[test]
    fn existing_parameter_is_reused_and_shape_checked() {
        let mut s = ParamStore::new(DType::F64, 0);
        let w = s.get_or_init("w", &[2, 2], Init::Ones).unwrap();
        let again = s.get_or_init("w", &[2, 2], Init::Zeros).unwrap();
        assert_eq!(w.to_vec2::<f64>().unwrap(), again.to_vec2::<f64>().unwrap());
        assert!(s.get_or_init("w", &[4], Init::Zeros).is_err());
    }

    #[test]
    fn deep_clone_is_independent() {
        let mut s = ParamStore::new(DType::F32, 0);
        s.get_or_init("w", &[3], Init::Ones).unwrap();
        let copy = s.deep_clone().unwrap();
        s.get("w").unwrap().set(&Tensor::zeros(3, DType::F32, &Device::Cpu).unwrap()).unwrap();
        assert_eq!(copy.get("w").unwrap().as_tensor().to_vec1::<f32>().unwrap(), vec![1.0; 3]);
        assert_ne!(copy.hash().unwrap(), s.hash().unwrap());
    }

    #[test]
    fn save_load_preserves_hash() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = ParamStore::new(DType::F32, 9);
        s.get_or_init("encoder/a/weight", &[3, 2], Init::Normal(1.0)).unwrap();
        s.get_or_init("decoder/b/bias", &[7], Init::Normal(1.0)).unwrap();
        let p = dir.path().join("w.safetensors");
        s.save(&p).unwrap();
        let back = ParamStore::load(&p, DType::F32).unwrap();
        assert_eq!(back.hash().unwrap(), s.hash().unwrap());
        assert_eq!(back.hash_prefix("encoder/").unwrap(), s.hash_prefix("encoder/").unwrap());
    }
}
