//! Diffusion-step constants and the per-step forward/reverse arithmetic.
//!
//! Steps are 1-based (`t` in `1..=T`); arrays are stored 0-based, so step
//! `t` lives at index `t - 1`.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numerics::{Scalar, Tensor};

/// Default linear schedule endpoints at `T = 1000`.
pub const BETA_START: f64 = 1e-4;
pub const BETA_END: f64 = 0.02;
pub const FULL_STEPS: usize = 1000;
pub const DESK_STEPS: usize = 200;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleParams {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigmas: Vec<f64>,
    /// `1 - abar_t`, accumulated in log space so it stays accurate when the
    /// betas are tiny.
    one_minus_alpha_bars: Vec<f64>,
}

impl ScheduleParams {
    /// Betas linearly spaced from `beta_start` to `beta_end` inclusive.
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
            return Err(Error::InvalidRange(format!(
                "need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"
            )));
        }
        let betas = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        Self::from_betas(betas)
    }

    /// Linear schedule whose endpoints are the `T = 1000` defaults rescaled
    /// by `1000 / steps`, so shorter chains still end near N(0, I).
    pub fn scaled_linear(steps: usize) -> Result<Self> {
        let scale = FULL_STEPS as f64 / steps.max(1) as f64;
        Self::linear(steps, BETA_START * scale, (BETA_END * scale).min(0.999))
    }

    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(Error::InvalidRange("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|&&b| !(b > 0.0 && b < 1.0)) {
            return Err(Error::InvalidRange(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let sigmas = betas.iter().map(|b| b.sqrt()).collect();
        let mut log_ab = 0.0;
        let one_minus_alpha_bars = betas
            .iter()
            .map(|b| {
                log_ab += (-b).ln_1p();
                -log_ab.exp_m1()
            })
            .collect();
        Ok(Self {
            steps: betas.len(),
            betas,
            alphas,
            alpha_bars,
            sigmas,
            one_minus_alpha_bars,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alphas(&self) -> &[f64] {
        &self.alphas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    /// Array index of 1-based step `t`.
    pub fn index(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                step: t,
                steps: self.steps,
            });
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.index(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.index(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.index(t)?])
    }

    pub fn sigma(&self, t: usize) -> Result<f64> {
        Ok(self.sigmas[self.index(t)?])
    }

    pub fn one_minus_alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.one_minus_alpha_bars[self.index(t)?])
    }
}

fn affine<T: Scalar>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(shape_err(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (ca, cb) = (T::of(ca), T::of(cb));
    a.zip_map(b, |x, y| ca * x + cb * y)
}

/// One forward transition: `sqrt(1 - beta_t) x_prev + sqrt(beta_t) eps`.
pub fn forward_step<T: Scalar>(
    x_prev: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &ScheduleParams,
) -> Result<Tensor<T>> {
    let beta = sched.beta(t)?;
    affine(x_prev, (1.0 - beta).sqrt(), eps, beta.sqrt())
}

/// Closed-form marginal draw: `sqrt(abar_t) x0 + sqrt(1 - abar_t) eps`.
pub fn q_sample<T: Scalar>(
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    sched: &ScheduleParams,
) -> Result<Tensor<T>> {
    let ab = sched.alpha_bar(t)?;
    affine(x0, ab.sqrt(), eps, sched.one_minus_alpha_bar(t)?.sqrt())
}

/// One ancestral denoising step:
/// `(x_t - beta_t / sqrt(1 - abar_t) eps_hat) / sqrt(alpha_t) + sigma_t z`.
pub fn reverse_step<T: Scalar>(
    x_t: &Tensor<T>,
    eps_hat: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    sched: &ScheduleParams,
) -> Result<Tensor<T>> {
    let i = sched.index(t)?;
    if x_t.shape() != eps_hat.shape() || x_t.shape() != z.shape() {
        return Err(shape_err(format!(
            "reverse_step operands {:?}, {:?}, {:?}",
            x_t.shape(),
            eps_hat.shape(),
            z.shape()
        )));
    }
    let inv_sqrt_alpha = 1.0 / sched.alphas[i].sqrt();
    let ca = T::of(inv_sqrt_alpha);
    let ce = T::of(inv_sqrt_alpha * sched.betas[i] / sched.one_minus_alpha_bars[i].sqrt());
    let cz = T::of(sched.sigmas[i]);
    let mut out = x_t.clone();
    for ((o, &e), &zv) in out.data_mut().iter_mut().zip(eps_hat.data()).zip(z.data()) {
        *o = ca * *o - ce * e + cz * zv;
    }
    Ok(out)
}
