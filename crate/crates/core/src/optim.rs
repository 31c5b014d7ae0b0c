//! Adaptive-moment (Adam) parameter updates.

use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::nn::{Denoiser, ParamGradient};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

impl Adam {
    pub fn new(n_params: usize, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            step: 0,
        }
    }

    pub fn with_lr(n_params: usize, lr: f64) -> Self {
        Self::new(
            n_params,
            AdamConfig {
                lr,
                ..AdamConfig::default()
            },
        )
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.cfg.lr = lr;
    }

    pub fn step(&mut self, net: &mut Denoiser, grad: &ParamGradient) -> Result<()> {
        self.apply(net.params_mut(), &grad.grad)
    }

    /// Update a raw parameter slice in place.
    pub fn apply(&mut self, params: &mut [f64], grad: &[f64]) -> Result<()> {
        if params.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(contract(format!(
                "optimizer holds {} moments, got {} parameters and {} gradients",
                self.m.len(),
                params.len(),
                grad.len()
            )));
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for (((p, &g), m), v) in params
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut opt = Adam::with_lr(3, 1e-2);
        let mut p = vec![1.0, -2.0, 3.0];
        opt.apply(&mut p, &[0.0; 3]).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);
        assert_eq!(opt.steps(), 1);
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut opt = Adam::with_lr(4, 1e-3);
        let mut p = vec![0.0; 4];
        let g = [2.0, -0.5, 1e-3, -7.0];
        opt.apply(&mut p, &g).unwrap();
        for (pi, gi) in p.iter().zip(g) {
            assert!(pi * gi < 0.0);
            assert!((pi.abs() - 1e-3).abs() < 1e-6);
        }
    }

    #[test]
    fn converges_on_quadratic() {
        let target = [1.5, -0.25, 3.0, 0.0, -2.0];
        let mut w = vec![0.0; 5];
        let mut opt = Adam::with_lr(5, 1e-2);
        let start: f64 = target.iter().map(|t| t * t).sum::<f64>().sqrt();
        for _ in 0..1000 {
            let g: Vec<f64> = w.iter().zip(&target).map(|(a, b)| 2.0 * (a - b)).collect();
            opt.apply(&mut w, &g).unwrap();
        }
        let dist: f64 = w
            .iter()
            .zip(&target)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        assert!(dist < 1e-3, "distance {dist} from start {start}");
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = Adam::with_lr(2, 1e-3);
        assert!(opt.apply(&mut [0.0; 3], &[0.0; 3]).is_err());
    }
}
