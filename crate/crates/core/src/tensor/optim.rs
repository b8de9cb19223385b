use std::collections::BTreeMap;
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::{ParamStore, Result, TensorError};

/// Cosine decay from `base` to zero over `horizon` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CosineSchedule {
    pub base: f64,
    pub horizon: usize,
}

impl CosineSchedule {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.horizon == 0 {
            return self.base;
        }
        let frac = step.min(self.horizon) as f64 / self.horizon as f64;
        self.base * 0.5 * (1.0 + (PI * frac).cos())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Total optimizer steps covered by the cosine schedule.
    pub horizon: usize,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-2,
            horizon: 1,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct OptimizerState {
    moments: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
    step: usize,
}

impl OptimizerState {
    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn moments(&self, name: &str) -> Option<(&[f64], &[f64])> {
        self.moments
            .get(name)
            .map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// AdamW with decoupled weight decay and a cosine learning-rate schedule.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub config: AdamWConfig,
    pub state: OptimizerState,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            state: OptimizerState::default(),
        }
    }

    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            base: self.config.lr,
            horizon: self.config.horizon,
        }
    }

    pub fn current_lr(&self) -> f64 {
        self.schedule().lr_at(self.state.step)
    }

    /// Update every trainable parameter of `store` from its populated gradient.
    /// Frozen parameters are never touched.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        let c = self.config;
        let lr = self.current_lr();
        let t = (self.state.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        for (name, p) in store.iter_mut() {
            if !p.requires_grad() {
                continue;
            }
            let (data, grad) = p.data_and_grad_mut();
            let grad = grad.ok_or_else(|| TensorError::Contract(format!("no gradient for `{name}`")))?;
            let (m, v) = self
                .state
                .moments
                .entry(name.to_string())
                .or_insert_with(|| (vec![0.0; grad.len()], vec![0.0; grad.len()]));
            if m.len() != grad.len() {
                return Err(TensorError::Contract(format!(
                    "moment buffer for `{name}` does not match its parameter"
                )));
            }
            let decay = 1.0 - lr * c.weight_decay;
            for (((x, &g), m), v) in data.iter_mut().zip(grad.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *x = *x * decay - lr * mhat / (vhat.sqrt() + c.eps);
            }
            if p.data().iter().any(|x| !x.is_finite()) {
                return Err(TensorError::NonFinite { op: "adamw" });
            }
        }
        self.state.step += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store_with(p: f64, g: f64, trainable: bool) -> ParamStore {
        let mut s = ParamStore::new();
        let mut t = Tensor::scalar(p).with_requires_grad(trainable);
        t.set_grad(Some(vec![g])).unwrap();
        s.insert("p", t).unwrap();
        s
    }

    #[test]
    fn zero_grad_zero_decay_leaves_param() {
        let mut s = store_with(0.7, 0.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        opt.step(&mut s).unwrap();
        assert_eq!(s.get("p").unwrap().data(), &[0.7]);
    }

    #[test]
    fn single_step_hand_value() {
        let mut s = store_with(0.0, 1.0, true);
        let mut opt = AdamW::new(AdamWConfig {
            lr: 0.1,
            beta1: 0.0,
            beta2: 0.0,
            eps: 1e-8,
            weight_decay: 0.0,
            horizon: 100,
        });
        opt.step(&mut s).unwrap();
        // -lr * g / (|g| + eps)
        assert!((s.get("p").unwrap().data()[0] + 0.1).abs() < 1e-8);
        assert_eq!(opt.state.step_count(), 1);
    }

    #[test]
    fn cosine_midpoint_is_half_base() {
        let s = CosineSchedule {
            base: 1e-2,
            horizon: 10,
        };
        assert!((s.lr_at(5) - 5e-3).abs() < 1e-15);
        assert_eq!(s.lr_at(0), 1e-2);
        assert!(s.lr_at(10).abs() < 1e-18);
    }

    #[test]
    fn frozen_param_untouched() {
        let mut s = store_with(0.3, 5.0, false);
        let before = s.to_le_bytes();
        AdamW::new(AdamWConfig::default()).step(&mut s).unwrap();
        assert_eq!(before, s.to_le_bytes());
    }

    #[test]
    fn missing_grad_is_contract_error() {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(1.0).trainable()).unwrap();
        let err = AdamW::new(AdamWConfig::default()).step(&mut s).unwrap_err();
        assert!(matches!(err, TensorError::Contract(_)));
    }
}
