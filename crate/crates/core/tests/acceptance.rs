//! Acceptance run. Prints one line per criterion and exits non-zero if any
//! criterion fails. Run with `cargo test -p patchdiff-core --test acceptance`.

mod common;

use std::time::{Duration, Instant};

use rand::seq::{index::sample as sample_indices, SliceRandom};
use rand::Rng;

use common::{grad_check, probe, randn, rng};
use patchdiff_core::data::{self, Dataset};
use patchdiff_core::denoiser::{Denoiser, DenoiserConfig};
use patchdiff_core::eval::{self, EvalRow};
use patchdiff_core::memprofile::{self, MemoryEntry};
use patchdiff_core::numerics::ops::{self, AttentionWeights};
use patchdiff_core::numerics::{no_grad, Tensor, Var};
use patchdiff_core::patching::{flat_index, one_hot, partition, reassemble, PatchGrid, PatchIndex};
use patchdiff_core::sampling::{self, PatchMode, SampleRequest};
use patchdiff_core::schedule::{forward_step, q_sample, reverse_step, ScheduleParams};
use patchdiff_core::training::{train_loop, TrainConfig, TrainOutputs, TrainState};

const SIZE: usize = 32;
const STEPS: usize = 200;
const DATA_COUNT: usize = 2000;
const DATA_SEED: u64 = 7;
const SAMPLE_SEED: u64 = 5;
const SAMPLE_COUNT: usize = 200;
const SAMPLE_BATCH: usize = 20;
/// Images resampled for the determinism double run.
const RESAMPLE: usize = 16;
/// Training run shared by the blob models (see the pilot notes in the README).
const ITERATIONS: u64 = 3000;
const LR: f64 = 5e-4;
/// Detector: pixels above the midpoint of the [-1, 1] range, one component
/// of at least three pixels.
const DETECT_THRESHOLD: f32 = 0.0;
const DETECT_MIN_AREA: usize = 3;
/// Width of the loss window averaged for the training-loss check.
const LOSS_WINDOW: usize = 200;

struct Line {
    id: u8,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

fn timed(id: u8, budget: Option<Duration>, f: impl FnOnce() -> (bool, String)) -> Line {
    let start = Instant::now();
    let (mut pass, mut detail) = f();
    let elapsed = start.elapsed();
    if let Some(b) = budget {
        if elapsed > b {
            pass = false;
            detail.push_str(&format!("; over the {:.0} s budget", b.as_secs_f64()));
        }
    }
    Line { id, pass, detail, elapsed }
}

fn all(checks: &[(bool, String)]) -> (bool, String) {
    let pass = checks.iter().all(|c| c.0);
    let detail = checks.iter().map(|c| c.1.as_str()).collect::<Vec<_>>().join("; ");
    (pass, detail)
}

// ---------------------------------------------------------------------------
// 1. schedule

fn criterion_schedule() -> (bool, String) {
    let s = ScheduleParams::linear(1000, 1e-4, 0.02).unwrap();
    let brute: f64 = (0..1000).map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0)).product();
    let rel = ((s.alpha_bar(1000).unwrap() - brute) / brute).abs();
    let mut checks = vec![(rel < 1e-6, format!("alpha_bar(1000) rel err {rel:.2e}"))];

    let draws = 100_000;
    let x0 = 0.7;
    for (t, seed) in [(1usize, 101u64), (5, 102), (50, 103)] {
        let mut x = Tensor::<f64>::full(&[draws], x0);
        let mut r = rng(seed);
        for k in 1..=t {
            x = forward_step(&x, k, &Tensor::randn(&[draws], &mut r), &s).unwrap();
        }
        let mean = x.mean_f64();
        let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
        let ab = s.alpha_bar(t).unwrap();
        let v = 1.0 - ab;
        let zm = (mean - ab.sqrt() * x0).abs() / (v / draws as f64).sqrt();
        let zv = (var - v).abs() / (v * (2.0 / (draws - 1) as f64).sqrt());
        checks.push((zm < 3.0 && zv < 3.0, format!("t={t} |z| mean {zm:.2} var {zv:.2}")));
    }
    all(&checks)
}

// ---------------------------------------------------------------------------
// 2. exact reconstruction on T = 2

fn criterion_reconstruction() -> (bool, String) {
    // betas (0.1, 0.3): alphas (0.9, 0.7), alpha_bars (0.9, 0.63)
    let s = ScheduleParams::from_betas(vec![0.1, 0.3]).unwrap();
    let x0 = randn(&[1, 3, 3], 201);
    let eps = randn(&[1, 3, 3], 202);
    let zero = Tensor::zeros(&[1, 3, 3]);
    let x2 = q_sample(&x0, 2, &eps, &s).unwrap();
    let x1 = reverse_step(&x2, &eps, 2, &zero, &s).unwrap();
    let out = reverse_step(&x1, &eps, 1, &zero, &s).unwrap();
    let mut worst = 0.0f64;
    for k in 0..x0.numel() {
        let (a, e) = (x0.data()[k], eps.data()[k]);
        let h2 = 0.63f64.sqrt() * a + 0.37f64.sqrt() * e;
        let h1 = (h2 - 0.3 / 0.37f64.sqrt() * e) / 0.7f64.sqrt();
        let h0 = (h1 - 0.1 / 0.1f64.sqrt() * e) / 0.9f64.sqrt();
        for (got, want) in [(x2.data()[k], h2), (x1.data()[k], h1), (out.data()[k], h0)] {
            worst = worst.max((got - want).abs());
        }
    }
    (worst < 1e-5, format!("max per-step deviation {worst:.2e}"))
}

// ---------------------------------------------------------------------------
// 3. patch bijection

fn criterion_bijection() -> (bool, String) {
    let mut r = rng(301);
    let mut exact = 0;
    for k in 0..10_000 {
        let n = [1usize, 2, 4, 8][k % 4];
        let grid = PatchGrid::new(n, n * r.gen_range(1..4), n * r.gen_range(1..4)).unwrap();
        let c = r.gen_range(1..4);
        let x = Tensor::<f32>::from_fn(&[c, grid.height(), grid.width()], |_| r.gen_range(-1.0f32..1.0));
        let mut parts = partition(&x, &grid).unwrap();
        parts.shuffle(&mut r);
        if reassemble(&parts, &grid).unwrap() == x {
            exact += 1;
        }
    }
    let mut inverse_ok = true;
    for n in 1..=8 {
        for s in 0..n * n {
            let p = PatchIndex::from_flat(s, n).unwrap();
            let code = one_hot::<f32>(s, n).unwrap();
            let hot: Vec<usize> = (0..code.len()).filter(|&i| code[i] == 1.0).collect();
            inverse_ok &= flat_index(p.i, p.j, n).unwrap() == s
                && code.len() == n * n
                && hot == [s]
                && code.iter().all(|&v| v == 0.0 || v == 1.0);
        }
    }
    (
        exact == 10_000 && inverse_ok,
        format!("{exact}/10000 round trips bit-exact, index inverses {}", if inverse_ok { "hold" } else { "FAIL" }),
    )
}

// ---------------------------------------------------------------------------
// 4. gradient suite

fn attention_from(v: &[Var<f64>]) -> AttentionWeights<f64> {
    AttentionWeights {
        wq: v[1].clone(),
        bq: v[2].clone(),
        wk: v[3].clone(),
        bk: v[4].clone(),
        wv: v[5].clone(),
        bv: v[6].clone(),
        wo: v[7].clone(),
        bo: v[8].clone(),
    }
}

fn end_to_end_error() -> f64 {
    let cfg = DenoiserConfig {
        image_channels: 1,
        base_channels: 8,
        channel_mults: vec![1, 2],
        attention: true,
        embed_dim: 8,
        divisions: 2,
    };
    let net = Denoiser::<f64>::new(cfg, 401).unwrap();
    for name in ["conv_out.weight", "conv_out.bias"] {
        let p = net.param(name).unwrap();
        let shape = p.shape();
        *p.value_mut() = randn(&shape, 402).map(|v| 0.3 * v);
    }
    let x = randn(&[2, 2, 8, 8], 403);
    let loss = |net: &Denoiser<f64>| {
        let out = net.forward(&Var::constant(x.clone()), &[3, 150], &[1, 2]).unwrap();
        probe(&out, 404)
    };
    net.zero_grad();
    loss(&net).backward();
    let h = 1e-4;
    let mut r = rng(405);
    let mut worst = 0.0f64;
    for (_, p) in net.named_params() {
        let analytic = p.grad().unwrap_or_else(|| Tensor::zeros(&p.shape()));
        let n = analytic.numel();
        let mut diff = 0.0f64;
        let mut scale = analytic.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in sample_indices(&mut r, n, n.min(6)) {
            let orig = p.value().data()[i];
            let eval = |delta: f64| {
                p.value_mut().data_mut()[i] = orig + delta;
                let _g = no_grad();
                loss(&net).value().item()
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            p.value_mut().data_mut()[i] = orig;
            diff = diff.max((numeric - analytic.data()[i]).abs());
            scale = scale.max(numeric.abs());
        }
        worst = worst.max(diff / scale.max(1e-6));
    }
    worst
}

fn criterion_gradients() -> (bool, String) {
    let step = 1e-3;
    let mut layers: Vec<(&str, f64)> = Vec::new();
    layers.push((
        "conv2d",
        [(1usize, 1usize, 3usize), (2, 1, 3), (1, 0, 1)]
            .iter()
            .map(|&(st, pad, k)| {
                let h = if st == 2 { 5 } else { 4 };
                grad_check(&[randn(&[2, 2, h, h], 1), randn(&[3, 2, k, k], 2), randn(&[3], 3)], step, |v| {
                    probe(&ops::conv2d(&v[0], &v[1], &v[2], st, pad).unwrap(), 4)
                })
            })
            .fold(0.0, f64::max),
    ));
    layers.push((
        "linear",
        grad_check(&[randn(&[3, 4], 1), randn(&[5, 4], 2), randn(&[5], 3)], step, |v| {
            probe(&ops::linear(&v[0], &v[1], &v[2]).unwrap(), 4)
        }),
    ));
    layers.push((
        "group_norm",
        grad_check(&[randn(&[2, 4, 3, 3], 1), randn(&[4], 2), randn(&[4], 3)], step, |v| {
            probe(&ops::group_norm(&v[0], &v[1], &v[2], 2, 1e-5).unwrap(), 4)
        }),
    ));
    layers.push(("silu", grad_check(&[randn(&[2, 3, 2, 2], 1)], step, |v| probe(&ops::silu(&v[0]), 2))));
    layers.push((
        "add/mul",
        grad_check(&[randn(&[6], 1), randn(&[6], 2)], step, |v| {
            probe(&ops::add(&v[0], &ops::mul(&v[0], &v[1]).unwrap()).unwrap(), 3)
        }),
    ));
    let target = randn(&[2, 5], 9);
    layers.push(("mse", grad_check(&[randn(&[2, 5], 1)], step, |v| ops::mse_loss(&v[0], &target).unwrap())));
    layers.push((
        "concat",
        grad_check(&[randn(&[2, 2, 3, 3], 1), randn(&[2, 1, 3, 3], 2)], step, |v| {
            probe(&ops::concat(&v[0], &v[1]).unwrap(), 3)
        }),
    ));
    layers.push((
        "channel_bias",
        grad_check(&[randn(&[2, 3, 2, 2], 1), randn(&[2, 3], 2)], step, |v| {
            probe(&ops::add_channel_bias(&v[0], &v[1]).unwrap(), 3)
        }),
    ));
    layers.push((
        "upsample",
        grad_check(&[randn(&[1, 2, 3, 2], 1)], step, |v| probe(&ops::upsample_nearest2x(&v[0]).unwrap(), 3)),
    ));
    layers.push((
        "avg_pool",
        grad_check(&[randn(&[2, 2, 4, 4], 1)], step, |v| probe(&ops::avg_pool2d(&v[0], 2).unwrap(), 3)),
    ));
    let c = 3;
    let mut inputs = vec![randn(&[2, c, 2, 3], 1)];
    for (i, s) in [[c, c].as_slice(), &[c], &[c, c], &[c], &[c, c], &[c], &[c, c], &[c]].iter().enumerate() {
        inputs.push(randn(s, 10 + i as u64).map(|v| v * 0.5));
    }
    layers.push((
        "self_attention",
        grad_check(&inputs, step, |v| probe(&ops::self_attention(&v[0], &attention_from(v)).unwrap(), 20)),
    ));

    let (worst_name, worst) = layers.iter().fold(("", 0.0f64), |m, &(n, e)| if e > m.1 { (n, e) } else { m });
    let e2e = end_to_end_error();
    (
        layers.iter().all(|l| l.1 < 1e-3) && e2e < 1e-2,
        format!("{} layers, worst {worst_name} {worst:.2e} (< 1e-3); end-to-end {e2e:.2e} (< 1e-2)", layers.len()),
    )
}

// ---------------------------------------------------------------------------
// 5, 8, 9. blob models

fn blob_data() -> (Dataset, Dataset) {
    let ds = data::gen_blobs(DATA_COUNT, [1, SIZE, SIZE], DATA_SEED).unwrap();
    let (train, _, test) = data::split(&ds, data::DEFAULT_SPLIT, DATA_SEED).unwrap();
    (train, test)
}

fn train_config(n: usize) -> TrainConfig {
    TrainConfig {
        divisions: n,
        iterations: ITERATIONS,
        lr: LR,
        checkpoint_every: 0,
        ..TrainConfig::desk()
    }
}

struct Trained {
    model: Denoiser<f32>,
    losses: Vec<f64>,
}

fn train(n: usize, images: &[Tensor<f32>], sched: &ScheduleParams) -> Trained {
    let cfg = train_config(n);
    let mut state = TrainState::<f32>::new(DenoiserConfig::desk(1, n), &cfg).unwrap();
    let losses = train_loop(&mut state, images, &cfg, sched, &TrainOutputs::default()).unwrap();
    Trained { model: state.model, losses }
}

fn draw(model: &Denoiser<f32>, n: usize, count: usize, sched: &ScheduleParams) -> Vec<Tensor<f32>> {
    let req = SampleRequest {
        count,
        seed: SAMPLE_SEED,
        divisions: n,
        size: (SIZE, SIZE),
        batch_size: SAMPLE_BATCH,
        mode: PatchMode::Sequential,
    };
    sampling::sample(model, &req, sched).unwrap()
}

fn detector_rate(images: &[Tensor<f32>]) -> (usize, Vec<usize>) {
    let mut hist = vec![0usize; 4];
    let mut fired = 0;
    for img in images {
        if eval::has_single_blob(img, DETECT_THRESHOLD, DETECT_MIN_AREA).unwrap() {
            fired += 1;
        }
        let comps = eval::bright_components(img, DETECT_THRESHOLD).unwrap().len();
        hist[comps.min(3)] += 1;
    }
    (fired, hist)
}

struct BlobRun {
    trained: Trained,
    samples: Vec<Tensor<f32>>,
    row: EvalRow,
}

fn criterion_training(train_set: &Dataset, test: &Dataset, sched: &ScheduleParams) -> ((bool, String), BlobRun) {
    let trained = train(2, &train_set.images, sched);
    let tail = &trained.losses[trained.losses.len() - LOSS_WINDOW..];
    let loss = tail.iter().sum::<f64>() / tail.len() as f64;
    let samples = draw(&trained.model, 2, SAMPLE_COUNT, sched);
    let (fired, hist) = detector_rate(&samples);
    let (ref_fired, _) = detector_rate(&test.images);
    let row = eval::evaluate("blobs", 2, &samples, &test.images).unwrap();
    let rate = fired as f64 / samples.len() as f64;
    let checks = [
        (loss < 0.1, format!("loss over last {LOSS_WINDOW} iterations {loss:.4} (< 0.1)")),
        (
            rate >= 0.9,
            format!(
                "detector fired on {fired}/{} samples = {:.1}% (>= 90%); components 0/1/2/3+: {}/{}/{}/{}",
                samples.len(),
                100.0 * rate,
                hist[0],
                hist[1],
                hist[2],
                hist[3]
            ),
        ),
        (
            ref_fired == test.len(),
            format!("detector fires on {ref_fired}/{} held-out test images", test.len()),
        ),
    ];
    (all(&checks), BlobRun { trained, samples, row })
}

fn criterion_quality(n2: &BlobRun, train_set: &Dataset, test: &Dataset, sched: &ScheduleParams) -> ((bool, String), BlobRun) {
    let trained = train(8, &train_set.images, sched);
    let samples = draw(&trained.model, 8, SAMPLE_COUNT, sched);
    let row = eval::evaluate("blobs", 8, &samples, &test.images).unwrap();
    let checks = [
        (
            row.mean_seam_score > n2.row.mean_seam_score,
            format!("seam N=8 {:.4} > N=2 {:.4}", row.mean_seam_score, n2.row.mean_seam_score),
        ),
        (
            row.proxy_fd > n2.row.proxy_fd,
            format!("proxy-FD N=8 {:.3} > N=2 {:.3}", row.proxy_fd, n2.row.proxy_fd),
        ),
    ];
    (all(&checks), BlobRun { trained, samples, row })
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

fn criterion_determinism(
    runs: &[(usize, &BlobRun)],
    train_set: &Dataset,
    test: &Dataset,
    sched: &ScheduleParams,
    profile: &[MemoryEntry],
) -> (bool, String) {
    let (again_train, again_test) = blob_data();
    let mut checks = vec![(
        again_train.images == train_set.images && again_test.images == test.images,
        "dataset regenerated identically".to_string(),
    )];
    for &(n, run) in runs {
        let again = train(n, &again_train.images, sched);
        let same_model = again.model.snapshot() == run.trained.model.snapshot();
        checks.push((
            bits(&again.losses) == bits(&run.trained.losses) && same_model,
            format!("N={n}: {} training losses and all weights identical", again.losses.len()),
        ));
        let resampled = draw(&again.model, n, RESAMPLE, sched);
        checks.push((
            resampled[..] == run.samples[..RESAMPLE],
            format!("N={n}: first {RESAMPLE} samples identical"),
        ));
        let row = eval::evaluate("blobs", n, &run.samples, &test.images).unwrap();
        checks.push((
            row.proxy_fd.to_bits() == run.row.proxy_fd.to_bits()
                && row.mean_seam_score.to_bits() == run.row.mean_seam_score.to_bits(),
            format!("N={n}: evaluation identical"),
        ));
    }
    checks.push((memory_profile() == profile, "memory profile identical".to_string()));
    all(&checks)
}

// ---------------------------------------------------------------------------
// 6, 7. memory

fn memory_profile() -> Vec<MemoryEntry> {
    let sched = ScheduleParams::scaled_linear(STEPS).unwrap();
    memprofile::profile::<f32>(&DenoiserConfig::desk(1, 1), (SIZE, SIZE), &[1, 2, 4, 8], &sched, 2, 0).unwrap()
}

fn measured(e: &MemoryEntry) -> f64 {
    e.measured_bytes.expect("profile measures every entry") as f64
}

fn criterion_memory_trend(entries: &[MemoryEntry]) -> (bool, String) {
    let p: Vec<f64> = entries.iter().map(measured).collect();
    let ratio = p[1] / p[0];
    let attention_at_16 = DenoiserConfig::desk(1, 1).attention && SIZE / DenoiserConfig::desk(1, 1).reduction() == 16;
    let checks = [
        (attention_at_16, "N=1 bottleneck attention runs at 16x16".to_string()),
        (ratio <= 0.55, format!("peak(2)/peak(1) = {ratio:.3} (<= 0.55)")),
        (
            p[0] >= p[1] && p[1] >= p[2],
            format!("peaks N=1,2,4: {:.0} >= {:.0} >= {:.0} B", p[0], p[1], p[2]),
        ),
        (
            p[0] - p[1] > p[1] - p[2],
            format!("drops {:.0} > {:.0} B", p[0] - p[1], p[1] - p[2]),
        ),
    ];
    all(&checks)
}

fn criterion_memory_bracket(entries: &[MemoryEntry]) -> (bool, String) {
    let ratios: Vec<(usize, f64)> = entries
        .iter()
        .map(|e| (e.divisions, measured(e) / e.analytical_bytes as f64))
        .collect();
    let pass = ratios.iter().all(|&(_, r)| (0.9..=1.5).contains(&r));
    let detail = ratios
        .iter()
        .map(|(n, r)| format!("N={n} {r:.3}"))
        .collect::<Vec<_>>()
        .join(", ");
    (pass, format!("measured/analytical {detail} (within [0.9, 1.5])"))
}

// ---------------------------------------------------------------------------

fn main() {
    let minutes = |m: u64| Some(Duration::from_secs(60 * m));
    let mut lines = Vec::new();
    let report = |l: &Line| {
        println!(
            "criterion {}: {} ({:.1} s) {}",
            l.id,
            if l.pass { "PASS" } else { "FAIL" },
            l.elapsed.as_secs_f64(),
            l.detail
        );
    };

    for (id, budget, f) in [
        (1u8, Some(Duration::from_secs(30)), criterion_schedule as fn() -> (bool, String)),
        (2, None, criterion_reconstruction),
        (3, Some(Duration::from_secs(10)), criterion_bijection),
        (4, minutes(2), criterion_gradients),
    ] {
        let l = timed(id, budget, f);
        report(&l);
        lines.push(l);
    }

    let mut profile = Vec::new();
    let l = timed(6, minutes(5), || {
        profile = memory_profile();
        criterion_memory_trend(&profile)
    });
    report(&l);
    lines.push(l);
    let l = timed(7, None, || criterion_memory_bracket(&profile));
    report(&l);
    lines.push(l);

    let sched = ScheduleParams::scaled_linear(STEPS).unwrap();
    let (train_set, test) = blob_data();
    let mut n2 = None;
    let l = timed(5, minutes(30), || {
        let (res, run) = criterion_training(&train_set, &test, &sched);
        n2 = Some(run);
        res
    });
    report(&l);
    lines.push(l);
    let n2 = n2.expect("criterion 5 ran");

    let mut n8 = None;
    let l = timed(8, minutes(20), || {
        let (res, run) = criterion_quality(&n2, &train_set, &test, &sched);
        n8 = Some(run);
        res
    });
    report(&l);
    lines.push(l);
    let n8 = n8.expect("criterion 8 ran");

    let l = timed(9, None, || {
        criterion_determinism(&[(2, &n2), (8, &n8)], &train_set, &test, &sched, &profile)
    });
    report(&l);
    lines.push(l);

    lines.sort_by_key(|l| l.id);
    let failed: Vec<u8> = lines.iter().filter(|l| !l.pass).map(|l| l.id).collect();
    println!("summary: {}/{} criteria pass", lines.len() - failed.len(), lines.len());
    if !failed.is_empty() {
        println!("failed: {failed:?}");
        std::process::exit(1);
    }
}
