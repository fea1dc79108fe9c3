//! Adam with bias correction and freeze-mask support.

use crate::error::{Error, Result};
use crate::params::{GradStore, ParameterSet};
use crate::tensor::Tensor;
use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    moments: IndexMap<String, (Tensor, Tensor)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: IndexMap::new(),
        }
    }

    /// One Adam step. Frozen elements (mask 0) are left bit-identical,
    /// moments included.
    pub fn step(&mut self, params: &mut ParameterSet, grads: &GradStore) -> Result<()> {
        self.step += 1;
        let t = self.step as f64;
        let c = &self.config;
        let bc1 = 1.0 - c.beta1.powf(t);
        let bc2 = 1.0 - c.beta2.powf(t);

        for (name, param) in params.iter_mut() {
            let g = match grads.get(name) {
                Some(g) => g,
                None => continue,
            };
            if g.shape != param.value.shape {
                return Err(Error::ShapeMismatch(format!(
                    "gradient shape {:?} vs parameter {:?} for {}",
                    g.shape, param.value.shape, name
                )));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(&g.shape), Tensor::zeros(&g.shape)));
            for i in 0..g.data.len() {
                if !param.is_element_trainable(i) {
                    continue;
                }
                let gi = g.data[i];
                m.data[i] = c.beta1 * m.data[i] + (1.0 - c.beta1) * gi;
                v.data[i] = c.beta2 * v.data[i] + (1.0 - c.beta2) * gi * gi;
                let mhat = m.data[i] / bc1;
                let vhat = v.data[i] / bc2;
                param.value.data[i] -= c.lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_params(w: f64) -> ParameterSet {
        let mut ps = ParameterSet::new();
        ps.insert("w", Tensor::scalar(w));
        ps
    }

    #[test]
    fn zero_gradient_leaves_params_unchanged() {
        let mut ps = scalar_params(1.5);
        let mut opt = Adam::new(AdamConfig::default());
        let mut gs = GradStore::new();
        gs.accumulate("w", &Tensor::scalar(0.0));
        opt.step(&mut ps, &gs).unwrap();
        assert_eq!(ps.value("w").item(), 1.5);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        // w=1, g=1, lr=0.1: bias-corrected first step moves by lr (up to eps)
        let mut ps = scalar_params(1.0);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        let mut gs = GradStore::new();
        gs.accumulate("w", &Tensor::scalar(1.0));
        opt.step(&mut ps, &gs).unwrap();
        let w = ps.value("w").item();
        // mhat = 1, vhat = 1 -> w - lr * 1/(1 + eps)
        assert!((w - 0.9).abs() < 1e-6, "w = {w}");
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut ps = scalar_params(std::f64::consts::PI);
        ps.freeze_all();
        let before = ps.value("w").data[0].to_bits();
        let mut opt = Adam::new(AdamConfig::default());
        let mut gs = GradStore::new();
        gs.accumulate("w", &Tensor::scalar(123.0));
        for _ in 0..10 {
            opt.step(&mut ps, &gs).unwrap();
        }
        assert_eq!(ps.value("w").data[0].to_bits(), before);
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut ps = scalar_params(1.0);
        let mut opt = Adam::new(AdamConfig::default());
        let mut gs = GradStore::new();
        gs.accumulate("w", &Tensor::zeros(&[2]));
        assert!(opt.step(&mut ps, &gs).is_err());
    }
}
