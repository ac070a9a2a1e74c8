use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Named trainable parameters, ordered by name.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?.contiguous()?)?);
        }
        Ok(ParamStore { vars })
    }

    pub fn load(path: &Path, dtype: DType, device: &Device) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, device).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Self::from_tensors(tensors, dtype)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn remove(&mut self, name: &str) -> Option<Var> {
        self.vars.remove(name)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    /// Tensor handle sharing storage with the variable, with a shape check.
    pub fn tensor(&self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let var = self
            .vars
            .get(name)
            .ok_or_else(|| Error::InvalidInput(format!("missing parameter {name}")))?;
        if var.dims() != shape {
            return Err(Error::InvalidInput(format!(
                "parameter {name} has shape {:?}, expected {shape:?}",
                var.dims()
            )));
        }
        Ok(var.as_tensor().clone())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn len(&self) -> usize {
        self.vars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies every variable into fresh storage.
    pub fn deep_clone(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(ParamStore { vars })
    }

    /// Bitwise equality of names, shapes and values.
    pub fn identical(&self, other: &ParamStore) -> Result<bool> {
        if self.vars.len() != other.vars.len() {
            return Ok(false);
        }
        for ((ka, va), (kb, vb)) in self.vars.iter().zip(other.vars.iter()) {
            if ka != kb || va.dims() != vb.dims() {
                return Ok(false);
            }
            let a: Vec<f32> = va.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            let b: Vec<f32> = vb.flatten_all()?.to_dtype(DType::F32)?.to_vec1()?;
            if a.iter().zip(&b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Ok(false);
            }
        }
        Ok(true)
    }
}

/// Seeded parameter initializer. Parameters already present in the store
/// (e.g. loaded from a pretrained file) are left untouched.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub dtype: DType,
    pub device: Device,
}

impl Init<'_> {
    fn put(&mut self, name: &str, shape: &[usize], values: Vec<f32>) -> Result<()> {
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        self.store.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> Result<()> {
        if self.store.contains(name) {
            return Ok(());
        }
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut *self.rng);
                (z * std) as f32
            })
            .collect();
        self.put(name, shape, values)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<()> {
        if self.store.contains(name) {
            return Ok(());
        }
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..bound) as f32)
            .collect();
        self.put(name, shape, values)
    }

    pub fn ones(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        if self.store.contains(name) {
            return Ok(());
        }
        let n = shape.iter().product();
        self.put(name, shape, vec![1.0; n])
    }
}
