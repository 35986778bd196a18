//! Adam with bias correction.

use super::autograd::Var;
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
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

/// One Adam step on a flat parameter buffer. `step` is 1-based.
pub fn adam_update<T: Scalar>(
    params: &mut [T],
    grads: &[T],
    m: &mut [T],
    v: &mut [T],
    cfg: &AdamConfig,
    step: u64,
) {
    assert!(step >= 1, "Adam steps are 1-based");
    let (b1, b2) = (T::of(cfg.beta1), T::of(cfg.beta2));
    let c1 = T::of(1.0 / (1.0 - cfg.beta1.powf(step as f64)));
    let c2 = T::of(1.0 / (1.0 - cfg.beta2.powf(step as f64)));
    let (lr, eps) = (T::of(cfg.lr), T::of(cfg.eps));
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(m.iter_mut()).zip(v.iter_mut()) {
        *m = b1 * *m + (T::one() - b1) * g;
        *v = b2 * *v + (T::one() - b2) * g * g;
        let m_hat = *m * c1;
        let v_hat = *v * c2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// Optimizer state: first and second moments per parameter plus the step
/// counter.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, params: &[Var<T>]) -> Self {
        let zeros = |p: &Var<T>| Tensor::zeros(&p.shape());
        Self {
            config,
            step: 0,
            m: params.iter().map(zeros).collect(),
            v: params.iter().map(zeros).collect(),
        }
    }

    /// Applies one update using the gradients accumulated on `params`.
    /// Parameters without a gradient are left untouched.
    pub fn step(&mut self, params: &[Var<T>]) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(shape_err(format!(
                "optimizer tracks {} parameters, got {}",
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        for ((p, m), v) in params.iter().zip(self.m.iter_mut()).zip(self.v.iter_mut()) {
            let Some(g) = p.grad() else { continue };
            let mut value = p.value_mut();
            value.expect_shape(g.shape())?;
            m.expect_shape(g.shape())?;
            adam_update(value.data_mut(), g.data(), m.data_mut(), v.data_mut(), &self.config, self.step);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let cfg = AdamConfig {
            lr: 0.01,
            eps: 0.0,
            ..AdamConfig::default()
        };
        let mut p = vec![1.0f64, -2.0, 0.5];
        let g = vec![3.0, -0.25, 1e-3];
        let (mut m, mut v) = (vec![0.0; 3], vec![0.0; 3]);
        adam_update(&mut p, &g, &mut m, &mut v, &cfg, 1);
        let expected = [1.0 - 0.01, -2.0 + 0.01, 0.5 - 0.01];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_gradient_from_fresh_state_is_a_no_op() {
        let cfg = AdamConfig::default();
        let mut p = vec![0.3f32, -0.7];
        let before = p.clone();
        let (mut m, mut v) = (vec![0.0; 2], vec![0.0; 2]);
        for step in 1..=5 {
            adam_update(&mut p, &[0.0, 0.0], &mut m, &mut v, &cfg, step);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn constant_gradient_step_size_tends_to_lr() {
        // With a constant gradient g, m_hat = g and v_hat = g^2 at every step,
        // so each update is lr * g / (|g| + eps).
        let cfg = AdamConfig::default();
        let g = -0.37f64;
        let mut p = vec![0.0f64];
        let (mut m, mut v) = (vec![0.0], vec![0.0]);
        let mut last = 0.0;
        for step in 1..=2000 {
            let before = p[0];
            adam_update(&mut p, &[g], &mut m, &mut v, &cfg, step);
            last = p[0] - before;
        }
        let expected = cfg.lr * g.signum() * -1.0 * (g.abs() / (g.abs() + cfg.eps));
        assert!((last - expected).abs() < 1e-12, "{last} vs {expected}");
        assert!(last > 0.0);
    }
}
