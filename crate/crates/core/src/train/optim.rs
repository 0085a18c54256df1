use serde::{Deserialize, Serialize};

use crate::error::{shape, Error, Result};
use crate::net::ParamSlot;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moment buffers are allocated on the first step.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, step: 0, m: Vec::new(), v: Vec::new() }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every non-frozen slot. Nothing is modified if any
    /// gradient is non-finite.
    pub fn step(&mut self, slots: &mut [ParamSlot<'_>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if slots.len() != grads.len() {
            return Err(shape(format!("{} parameter tensors but {} gradients", slots.len(), grads.len())));
        }
        for (slot, g) in slots.iter().zip(grads) {
            if slot.data.len() != g.len() {
                return Err(shape(format!(
                    "gradient for {} has {} entries, expected {}",
                    slot.name,
                    g.len(),
                    slot.data.len()
                )));
            }
            if !slot.frozen {
                if let Some(i) = g.iter().position(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("gradient of {} at index {i}", slot.name)));
                }
            }
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powi(self.step as i32);
        let c2 = 1.0 - beta2.powi(self.step as i32);
        for (k, (slot, g)) in slots.iter_mut().zip(grads).enumerate() {
            if slot.frozen {
                continue;
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                slot.data[i] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_max` at step 0 to `lr_min` at `total_steps`.
pub fn cosine_lr(step: usize, total_steps: usize, lr_max: f64, lr_min: f64) -> f64 {
    if total_steps == 0 {
        return lr_max;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot<'a>(name: &str, data: &'a mut [f64], frozen: bool) -> ParamSlot<'a> {
        ParamSlot { name: name.into(), data, frozen }
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = [1.5, -2.0];
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [slot("p", &mut p, false)], &[vec![0.0, 0.0]], 0.1).unwrap();
        assert_eq!(p, [1.5, -2.0]);
        assert_eq!(adam.steps_taken(), 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = [3.0];
        let mut adam = Adam::new(AdamConfig { eps: 0.0, ..AdamConfig::default() });
        adam.step(&mut [slot("p", &mut p, false)], &[vec![1.0]], 0.01).unwrap();
        assert!((p[0] - 2.99).abs() < 1e-15);
    }

    #[test]
    fn frozen_slot_untouched() {
        let (mut a, mut b) = ([1.0, 2.0], [3.0]);
        let mut adam = Adam::new(AdamConfig::default());
        adam.step(&mut [slot("frozen", &mut a, true), slot("free", &mut b, false)], &[vec![5.0, -5.0], vec![1.0]], 0.1)
            .unwrap();
        assert_eq!(a, [1.0, 2.0]);
        assert!(b[0] < 3.0);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = [1.0, 1.0];
        let mut adam = Adam::new(AdamConfig::default());
        let err = adam.step(&mut [slot("layer1.mix", &mut p, false)], &[vec![0.0, f64::NAN]], 0.1).unwrap_err();
        assert!(err.to_string().contains("layer1.mix"));
        assert_eq!(p, [1.0, 1.0]);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 5e-4, 2.5e-6), 5e-4);
        assert!((cosine_lr(100, 100, 5e-4, 2.5e-6) - 2.5e-6).abs() < 1e-20);
        assert!((cosine_lr(50, 100, 5e-4, 2.5e-6) - (5e-4 + 2.5e-6) / 2.0).abs() < 1e-14);
    }
}
