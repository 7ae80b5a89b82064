use serde::{Deserialize, Serialize};

use super::layers::Param;
use crate::error::{Error, Result};
use crate::scalar::{lit, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub config: AdamConfig,
    /// First moments, one buffer per parameter tensor.
    pub m: Vec<Vec<T>>,
    /// Second moments, one buffer per parameter tensor.
    pub v: Vec<Vec<T>>,
    pub step: u64,
}

impl<T: Scalar> Adam<T> {
    /// Zero moments shaped like `params`.
    pub fn new(config: AdamConfig, params: &[&Param<T>]) -> Self {
        let zeros = || {
            params
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect()
        };
        Self {
            config,
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    /// Applies one update using the gradients stored in `params`.
    ///
    /// Parameters are left untouched when any gradient is non-finite.
    pub fn step(&mut self, params: &mut [&mut Param<T>], lr: f64) -> Result<()> {
        if params.len() != self.m.len()
            || params
                .iter()
                .zip(&self.m)
                .any(|(p, m)| p.grad.len() != m.len())
        {
            return Err(Error::Dimensions(
                "gradients do not match optimizer state".into(),
            ));
        }
        if let Some(i) = params
            .iter()
            .position(|p| p.grad.iter().any(|g| !g.is_finite()))
        {
            return Err(Error::NonFinite(format!(
                "gradient of parameter tensor {i}"
            )));
        }
        self.step += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let (b1, b2, eps): (T, T, T) = (lit(beta1), lit(beta2), lit(eps));
        let (one_b1, one_b2) = (T::one() - b1, T::one() - b2);
        let (lr_t, c1, c2): (T, T, T) = (lit(lr), lit(c1), lit(c2));
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            for i in 0..p.value.len() {
                let g = p.grad[i];
                m[i] = b1 * m[i] + one_b1 * g;
                v[i] = b2 * v[i] + one_b2 * g * g;
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p.value[i] -= lr_t * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn param(value: Vec<f64>, grad: Vec<f64>) -> Param<f64> {
        let mut p = Param::new(value);
        p.grad = grad;
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = param(vec![1.0, -2.0], vec![0.0, 0.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], 0.1).unwrap();
        assert_eq!(p.value, vec![1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_about_lr() {
        let mut p = param(vec![0.0, 0.0, 0.0], vec![3.0, -0.01, 1e4]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], 1e-3).unwrap();
        for (&x, &g) in p.value.iter().zip(&[3.0, -0.01, 1e4]) {
            let g: f64 = g;
            // m_hat = g, v_hat = g^2, so the step is lr * |g| / (|g| + eps).
            let want = -1e-3 * g / (g.abs() + 1e-8);
            assert!((x - want).abs() < 1e-15, "{x} vs {want}");
        }
    }

    #[test]
    fn moments_follow_the_ema_recurrence() {
        let mut p = param(vec![0.0], vec![2.0]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        adam.step(&mut [&mut p], 1e-3).unwrap();
        adam.step(&mut [&mut p], 1e-3).unwrap();
        let m = 0.1 * 2.0 * 0.9 + 0.1 * 2.0;
        let v = 0.001 * 4.0 * 0.999 + 0.001 * 4.0;
        assert!((adam.m[0][0] - m).abs() < 1e-15);
        assert!((adam.v[0][0] - v).abs() < 1e-15);
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn non_finite_gradients_are_rejected() {
        let mut p = param(vec![1.0], vec![f64::NAN]);
        let mut adam = Adam::new(AdamConfig::default(), &[&p]);
        assert!(adam.step(&mut [&mut p], 1e-3).is_err());
        assert_eq!((p.value[0], adam.step), (1.0, 0));
        let mut q = param(vec![1.0, 2.0], vec![0.0, 0.0]);
        assert!(adam.step(&mut [&mut q], 1e-3).is_err());
    }
}
