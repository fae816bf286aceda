//! Named parameter store with Adam optimizer state.

use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, StarError};

use super::tape::Tensor;

/// One learnable tensor with its first/second-moment accumulators.
#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    m: Vec<f64>,
    v: Vec<f64>,
}

/// Insertion-ordered parameter collection. The order is the binding
/// order on tapes and the serialization order in checkpoints, so it must
/// be deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
    /// Adam step counter; strictly increases per update.
    pub step: u64,
}

/// Adam hyper-parameters (bias-corrected update).
#[derive(Clone, Copy, Debug)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n = value.numel();
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, m: vec![0.0; n], v: vec![0.0; n] });
    }

    pub fn insert_normal(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut ChaCha8Rng,
    ) {
        let numel: usize = shape.iter().product();
        let values: Vec<f64> = (0..numel).map(|_| gaussian(rng) * std).collect();
        self.insert(name, Tensor::new(shape, values).expect("shape/values agree"));
    }

    pub fn insert_const(&mut self, name: impl Into<String>, shape: Vec<usize>, fill: f64) {
        let numel: usize = shape.iter().product();
        self.insert(name, Tensor::new(shape, vec![fill; numel]).expect("shape/values agree"));
    }

    pub fn get(&self, name: &str) -> &Tensor {
        let idx = self.index[name];
        &self.params[idx].value
    }

    pub fn try_get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|p| (p.name.as_str(), &p.value))
    }

    pub fn names(&self) -> Vec<String> {
        self.params.iter().map(|p| p.name.clone()).collect()
    }

    pub fn set(&mut self, name: &str, value: Tensor) -> Result<()> {
        let idx = *self
            .index
            .get(name)
            .ok_or_else(|| StarError::InvalidArgument(format!("unknown parameter {name}")))?;
        if self.params[idx].value.shape() != value.shape() {
            return Err(StarError::shape(
                "param-set",
                format!(
                    "{name}: {:?} vs {:?}",
                    self.params[idx].value.shape(),
                    value.shape()
                ),
            ));
        }
        self.params[idx].value = value;
        Ok(())
    }

    /// One bias-corrected Adam step over all parameters with a gradient.
    /// `grads` is aligned with insertion order; `None` (or an excluded
    /// name) leaves the parameter and its moments untouched, so frozen
    /// parameters stay bit-identical.
    pub fn adam_step<F>(
        &mut self,
        grads: &[Option<Vec<f64>>],
        cfg: &AdamConfig,
        trainable: F,
    ) -> Result<()>
    where
        F: Fn(&str) -> bool,
    {
        if grads.len() != self.params.len() {
            return Err(StarError::shape(
                "adam",
                format!("{} gradients vs {} parameters", grads.len(), self.params.len()),
            ));
        }
        if cfg.lr <= 0.0 {
            return Err(StarError::InvalidArgument("learning rate must be positive".into()));
        }
        for (p, g) in self.params.iter().zip(grads.iter()) {
            if let Some(g) = g {
                if trainable(&p.name) && g.iter().any(|v| !v.is_finite()) {
                    return Err(StarError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        for (p, g) in self.params.iter_mut().zip(grads.iter()) {
            let Some(g) = g else { continue };
            if !trainable(&p.name) {
                continue;
            }
            let values = p.value.data_mut();
            for i in 0..values.len() {
                p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g[i];
                p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                let m_hat = p.m[i] / bc1;
                let v_hat = p.v[i] / bc2;
                values[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
        }
        Ok(())
    }
}

/// Box-Muller standard normal; deterministic for a fixed ChaCha stream.
pub fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn store_with(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        let n = values.len();
        s.insert(name, Tensor::new(vec![n], values).unwrap());
        s
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = store_with("w", vec![1.0, -2.0]);
        let cfg = AdamConfig::with_lr(0.1);
        s.adam_step(&[Some(vec![0.0, 0.0])], &cfg, |_| true).unwrap();
        assert_eq!(s.get("w").data(), &[1.0, -2.0]);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn single_step_matches_hand_evaluation() {
        // g = 1, lr = 0.1: m_hat = v_hat = 1 after bias correction,
        // so the update is lr * 1 / (1 + eps) which is close to 0.1.
        let mut s = store_with("w", vec![0.5]);
        let cfg = AdamConfig::with_lr(0.1);
        s.adam_step(&[Some(vec![1.0])], &cfg, |_| true).unwrap();
        let got = s.get("w").data()[0];
        assert!((got - (0.5 - 0.1)).abs() < 1e-8, "got {got}");
    }

    #[test]
    fn non_finite_gradient_names_param() {
        let mut s = store_with("enc.w", vec![0.5]);
        let cfg = AdamConfig::with_lr(0.1);
        let err = s.adam_step(&[Some(vec![f64::NAN])], &cfg, |_| true).unwrap_err();
        assert!(err.to_string().contains("enc.w"));
        assert_eq!(s.step, 0);
    }

    #[test]
    fn deterministic_updates() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            let mut s = ParamStore::new();
            s.insert_normal("w", vec![4], 0.1, &mut rng);
            let cfg = AdamConfig::with_lr(0.01);
            for _ in 0..2 {
                s.adam_step(&[Some(vec![0.3, -0.2, 0.1, 0.0])], &cfg, |_| true).unwrap();
            }
            s.get("w").data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn frozen_params_bit_identical() {
        let mut s = store_with("seg.w1", vec![0.25]);
        let before = s.get("seg.w1").data().to_vec();
        let cfg = AdamConfig::with_lr(0.1);
        s.adam_step(&[Some(vec![1.0])], &cfg, |n| !n.starts_with("seg.")).unwrap();
        assert_eq!(s.get("seg.w1").data(), &before[..]);
    }
}
