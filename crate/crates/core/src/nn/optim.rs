use serde::{Deserialize, Serialize};

use super::layers::Param;
use super::network::Network;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

/// Adaptive-moment optimizer state: one pair of moment buffers per parameter,
/// keyed by the parameter's position in the network's stable order.
#[derive(Debug, Clone)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    moments: Vec<(Vec<f32>, Vec<f32>)>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam {
            config,
            step: 0,
            moments: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Apply one update from the gradients currently stored in `net`.
    /// Gradients are left in place.
    pub fn step(&mut self, net: &mut Network) {
        let params: Vec<&mut Param> = net.params_mut().into_iter().map(|(_, p)| p).collect();
        self.step_params(params);
    }

    pub fn step_params<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Param>) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - (beta1 as f64).powi(self.step as i32);
        let bc2 = 1.0 - (beta2 as f64).powi(self.step as i32);
        let step_size = (lr as f64 / bc1) as f32;
        let inv_bc2_sqrt = (1.0 / bc2.sqrt()) as f32;
        for (slot, p) in params.into_iter().enumerate() {
            if slot == self.moments.len() {
                self.moments.push((vec![0.0; p.value.len()], vec![0.0; p.value.len()]));
            }
            let (m, v) = &mut self.moments[slot];
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = beta1 * m[i] + (1.0 - beta1) * g;
                v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
                p.value[i] -= step_size * m[i] / (v[i].sqrt() * inv_bc2_sqrt + eps);
            }
        }
    }

    /// `(first, second)` moment buffers in parameter order.
    pub fn moments(&self) -> &[(Vec<f32>, Vec<f32>)] {
        &self.moments
    }

    pub fn restore(config: AdamConfig, step: u64, moments: Vec<(Vec<f32>, Vec<f32>)>) -> Self {
        Adam { config, step, moments }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f32) -> Param {
        Param {
            shape: vec![1],
            value: vec![v],
            grad: vec![0.0],
        }
    }

    #[test]
    fn zero_gradients_leave_parameters_unchanged() {
        let mut p = scalar(0.75);
        let mut opt = Adam::new(AdamConfig::default());
        for _ in 0..10 {
            opt.step_params([&mut p]);
        }
        assert_eq!(p.value[0], 0.75);
        assert_eq!(opt.steps(), 10);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = scalar(1.0);
        let mut opt = Adam::new(AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        });
        for _ in 0..200 {
            p.grad[0] = 2.0 * p.value[0];
            opt.step_params([&mut p]);
        }
        assert!(p.value[0].abs() < 1e-3, "{}", p.value[0]);
    }

    #[test]
    fn identical_inputs_give_identical_updates() {
        let mut a = scalar(0.3);
        let mut b = scalar(0.3);
        let mut oa = Adam::new(AdamConfig::default());
        let mut ob = Adam::new(AdamConfig::default());
        for k in 0..5 {
            a.grad[0] = k as f32 - 2.0;
            b.grad[0] = k as f32 - 2.0;
            oa.step_params([&mut a]);
            ob.step_params([&mut b]);
        }
        assert_eq!(a.value, b.value);
    }
}
