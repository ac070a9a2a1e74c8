use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::backbone::ParamStore;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWParams {
    fn default() -> Self {
        AdamWParams {
            lr: 2e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

/// Adam with decoupled weight decay. Moment buffers are keyed by parameter
/// name so they can be checkpointed alongside the weights. Parameters that
/// receive no gradient in a step are left untouched, weight decay included.
#[derive(Debug)]
pub struct AdamW {
    params: AdamWParams,
    step: u64,
    moments: BTreeMap<String, (Tensor, Tensor)>,
}

impl AdamW {
    pub fn new(params: AdamWParams) -> Self {
        AdamW {
            params,
            step: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn hyper_params(&self) -> &AdamWParams {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Global L2 norm of all gradients of `vars`.
    pub fn grad_norm(vars: &ParamStore, grads: &GradStore) -> Result<f64> {
        let mut sq = 0.0;
        for (_, var) in vars.iter() {
            if let Some(g) = grads.get(var.as_tensor()) {
                sq += g.to_dtype(DType::F64)?.sqr()?.sum_all()?.to_scalar::<f64>()?;
            }
        }
        Ok(sq.sqrt())
    }

    /// Applies one update; gradients are rescaled first when their global
    /// norm exceeds `max_grad_norm`. Returns the pre-clipping norm.
    pub fn step(&mut self, vars: &ParamStore, grads: &GradStore, max_grad_norm: Option<f64>) -> Result<f64> {
        let norm = Self::grad_norm(vars, grads)?;
        if !norm.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite gradient norm {norm}")));
        }
        let scale = match max_grad_norm {
            Some(max) if norm > max => max / (norm + 1e-6),
            _ => 1.0,
        };
        self.step += 1;
        let p = self.params;
        let t = self.step as i32;
        let bias1 = 1.0 - p.beta1.powi(t);
        let bias2 = 1.0 - p.beta2.powi(t);
        for (name, var) in vars.iter() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let grad = if scale != 1.0 { (grad * scale)? } else { grad.clone() };
            let (m, v) = match self.moments.remove(name) {
                Some(mv) => mv,
                None => (var.zeros_like()?.detach(), var.zeros_like()?.detach()),
            };
            let m = ((m * p.beta1)? + (&grad * (1.0 - p.beta1))?)?;
            let v = ((v * p.beta2)? + (grad.sqr()? * (1.0 - p.beta2))?)?;
            let m_hat = (&m / bias1)?;
            let v_hat = (&v / bias2)?;
            let current = var.as_tensor().detach();
            let decayed = (current * (1.0 - p.lr * p.weight_decay))?;
            let update = (m_hat / (v_hat.sqrt()? + p.eps)?)?;
            let next = (decayed - (update * p.lr)?)?;
            var.set(&next)?;
            self.moments.insert(name.clone(), (m, v));
        }
        Ok(norm)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors: HashMap<String, Tensor> = HashMap::new();
        for (name, (m, v)) in &self.moments {
            tensors.insert(format!("m.{name}"), m.clone());
            tensors.insert(format!("v.{name}"), v.clone());
        }
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    pub fn load(path: &Path, params: AdamWParams, step: u64) -> Result<Self> {
        let tensors = candle_core::safetensors::load(path, &Device::Cpu).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let mut moments = BTreeMap::new();
        for (key, m) in &tensors {
            if let Some(name) = key.strip_prefix("m.") {
                let v = tensors.get(&format!("v.{name}")).ok_or_else(|| Error::Checkpoint {
                    path: path.to_path_buf(),
                    reason: format!("missing second moment for {name}"),
                })?;
                moments.insert(name.to_string(), (m.clone(), v.clone()));
            }
        }
        Ok(AdamW { params, step, moments })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Var;

    #[test]
    fn matches_hand_computed_first_step() {
        // First Adam step moves each weight by lr * sign(g) (bias-corrected
        // m/sqrt(v) = g/|g|), after decay by (1 - lr * wd).
        let mut store = ParamStore::new();
        let var = Var::new(&[1.0f32, -2.0], &Device::Cpu).unwrap();
        store.insert("w", var.clone());
        let loss = (var.as_tensor() * &Tensor::new(&[3.0f32, -0.5], &Device::Cpu).unwrap())
            .unwrap()
            .sum_all()
            .unwrap();
        let grads = loss.backward().unwrap();
        let params = AdamWParams {
            lr: 0.1,
            weight_decay: 0.01,
            ..Default::default()
        };
        let mut opt = AdamW::new(params);
        let norm = opt.step(&store, &grads, None).unwrap();
        assert!((norm - (9.0f64 + 0.25).sqrt()).abs() < 1e-6);
        let w = store.var("w").unwrap().to_vec1::<f32>().unwrap();
        let expect = [1.0 * (1.0 - 0.001) - 0.1, -2.0 * (1.0 - 0.001) + 0.1];
        for (a, b) in w.iter().zip(expect) {
            assert!((*a as f64 - b).abs() < 1e-5, "{w:?}");
        }
    }

    #[test]
    fn clipping_scales_gradients() {
        let mut store = ParamStore::new();
        let var = Var::new(&[0.0f32], &Device::Cpu).unwrap();
        store.insert("w", var.clone());
        let loss = (var.as_tensor() * 100.0).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        let mut opt = AdamW::new(AdamWParams {
            lr: 1.0,
            weight_decay: 0.0,
            ..Default::default()
        });
        assert!((opt.step(&store, &grads, Some(1.0)).unwrap() - 100.0).abs() < 1e-9);
        let (m, _) = &opt.moments["w"];
        // Clipped gradient is ~1.0, so the first moment is ~0.1.
        assert!((m.to_vec1::<f32>().unwrap()[0] - 0.1).abs() < 1e-4);
    }
}
