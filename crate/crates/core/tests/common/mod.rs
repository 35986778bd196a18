#![allow(dead_code)]

use patchdiff_core::numerics::{no_grad, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    Tensor::randn(shape, &mut rng(seed))
}

/// Central finite-difference check of `loss(inputs)`.
///
/// Returns, over all inputs, the worst `max|analytic - numeric| /
/// max(max|analytic|, max|numeric|, 1e-6)`.
pub fn grad_check(
    inputs: &[Tensor<f64>],
    step: f64,
    loss: impl Fn(&[Var<f64>]) -> Var<f64>,
) -> f64 {
    let vars: Vec<Var<f64>> = inputs.iter().cloned().map(Var::parameter).collect();
    let l = loss(&vars);
    l.backward();
    let analytic: Vec<Tensor<f64>> = vars
        .iter()
        .map(|v| v.grad().unwrap_or_else(|| Tensor::zeros(&v.shape())))
        .collect();

    let eval = |k: usize, i: usize, delta: f64| -> f64 {
        let _g = no_grad();
        let vs: Vec<Var<f64>> = inputs
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let mut t = t.clone();
                if j == k {
                    t.data_mut()[i] += delta;
                }
                Var::constant(t)
            })
            .collect();
        let out = loss(&vs);
        let v = out.value().item();
        v
    };

    let mut worst = 0.0f64;
    for (k, t) in inputs.iter().enumerate() {
        let mut max_diff = 0.0f64;
        let mut scale = 0.0f64;
        for i in 0..t.numel() {
            let numeric = (eval(k, i, step) - eval(k, i, -step)) / (2.0 * step);
            let a = analytic[k].data()[i];
            max_diff = max_diff.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        // Gradients that vanish identically (e.g. key bias under softmax)
        // are compared absolutely.
        worst = worst.max(max_diff / scale.max(1e-6));
    }
    worst
}

/// Contracts an output against a fixed random tensor so every output
/// element carries a distinct, O(1) upstream gradient.
pub fn probe(out: &Var<f64>, seed: u64) -> Var<f64> {
    let w = Var::constant(randn(&out.shape(), seed));
    patchdiff_core::numerics::ops::sum(&patchdiff_core::numerics::ops::mul(out, &w).unwrap())
}
