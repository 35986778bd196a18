//! Patch-wise noise-prediction objective and the optimization loop.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::kv::KvDoc;
use crate::numerics::{ops, Adam, AdamConfig, Scalar, Tensor, Var};
use crate::patching::{assemble_condition, crop_each, global_content, PatchGrid};
use crate::schedule::{q_sample, ScheduleParams};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Diffusion length `T`.
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub iterations: u64,
    pub divisions: usize,
    pub dataset: String,
    /// Training image size; samples are drawn at this size.
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn full() -> Self {
        Self {
            steps: 1000,
            batch_size: 64,
            lr: 1e-4,
            iterations: 800_000,
            divisions: 2,
            dataset: "blobs".into(),
            height: 128,
            width: 128,
            seed: 0,
            checkpoint_every: 10_000,
        }
    }

    pub fn desk() -> Self {
        Self {
            steps: 200,
            batch_size: 16,
            lr: 1e-4,
            iterations: 20_000,
            divisions: 2,
            dataset: "blobs".into(),
            height: 32,
            width: 32,
            seed: 0,
            checkpoint_every: 1_000,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.divisions == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("steps, batch size, divisions and image size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc, section: &str) {
        doc.set(section, "steps", self.steps);
        doc.set(section, "batch_size", self.batch_size);
        doc.set(section, "lr", self.lr);
        doc.set(section, "iterations", self.iterations);
        doc.set(section, "divisions", self.divisions);
        doc.set(section, "dataset", &self.dataset);
        doc.set(section, "height", self.height);
        doc.set(section, "width", self.width);
        doc.set(section, "seed", self.seed);
        doc.set(section, "checkpoint_every", self.checkpoint_every);
    }

    /// Reads whatever keys are present over `base`.
    pub fn read_kv(doc: &KvDoc, section: &str, base: Self) -> Result<Self> {
        let mut c = base;
        macro_rules! take {
            ($field:ident) => {
                if let Some(v) = doc.get_parsed(section, stringify!($field))? {
                    c.$field = v;
                }
            };
        }
        take!(steps);
        take!(batch_size);
        take!(lr);
        take!(iterations);
        take!(divisions);
        take!(dataset);
        take!(height);
        take!(width);
        take!(seed);
        take!(checkpoint_every);
        c.validate()?;
        Ok(c)
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Clone)]
pub struct TrainState<T: Scalar> {
    pub model: Denoiser<T>,
    pub optimizer: Adam<T>,
    pub iteration: u64,
    pub rng: ChaCha8Rng,
    /// Current epoch's visiting order over the training set.
    pub order: Vec<usize>,
    pub cursor: usize,
}

impl<T: Scalar> TrainState<T> {
    /// Fresh state. Model initialization and the training stream are both
    /// derived from `seed`, on separate ChaCha streams.
    pub fn new(model_config: DenoiserConfig, train: &TrainConfig) -> Result<Self> {
        train.validate()?;
        if model_config.divisions != train.divisions {
            return Err(Error::Config(format!(
                "model built for N = {} but training uses N = {}",
                model_config.divisions, train.divisions
            )));
        }
        let model = Denoiser::new(model_config, train.seed)?;
        let optimizer = Adam::new(
            AdamConfig {
                lr: train.lr,
                ..AdamConfig::default()
            },
            &model.params(),
        );
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(1);
        Ok(Self {
            model,
            optimizer,
            iteration: 0,
            rng,
            order: Vec::new(),
            cursor: 0,
        })
    }

    /// Next `count` training indices, reshuffling at epoch boundaries.
    pub fn next_indices(&mut self, count: usize, dataset_len: usize) -> Result<Vec<usize>> {
        if dataset_len == 0 {
            return Err(Error::Config("empty training set".into()));
        }
        let mut out = Vec::with_capacity(count);
        while out.len() < count {
            if self.cursor >= self.order.len() || self.order.len() != dataset_len {
                self.order = (0..dataset_len).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        Ok(out)
    }
}

/// Stacks `C x H x W` images into one `B x C x H x W` tensor.
pub fn stack<T: Scalar, U: Scalar>(images: &[&Tensor<U>]) -> Result<Tensor<T>> {
    let first = images
        .first()
        .ok_or_else(|| Error::ShapeMismatch("cannot stack an empty batch".into()))?;
    let shape = first.shape().to_vec();
    let mut data = Vec::with_capacity(images.len() * first.numel());
    for img in images {
        img.expect_shape(&shape)?;
        data.extend(img.data().iter().map(|&v| T::of(v.to_f64().unwrap_or(f64::NAN))));
    }
    let mut full = vec![images.len()];
    full.extend(shape);
    Tensor::from_vec(&full, data)
}

/// Batched patch objective. `x0` and `eps` are `B x C x H x W`; `steps`
/// and `positions` give each example's `t` and `s`. The noisy latent is
/// formed on the full image, the global content is pooled from it, and the
/// loss is the mean squared error over all cropped patch elements.
pub fn patch_loss_batch<T: Scalar>(
    model: &Denoiser<T>,
    x0: &Tensor<T>,
    steps: &[usize],
    eps: &Tensor<T>,
    positions: &[usize],
    grid: &PatchGrid,
    sched: &ScheduleParams,
) -> Result<Var<T>> {
    if x0.shape() != eps.shape() || x0.rank() != 4 {
        return Err(Error::ShapeMismatch(format!(
            "x0 {:?} and eps {:?} must be matching B x C x H x W",
            x0.shape(),
            eps.shape()
        )));
    }
    let b = x0.shape()[0];
    if steps.len() != b || positions.len() != b {
        return Err(Error::ShapeMismatch(format!("batch of {b} needs {b} steps and positions")));
    }
    let per = x0.numel() / b.max(1);
    let item_shape = &x0.shape()[1..];
    let mut xt = Vec::with_capacity(x0.numel());
    for (k, &t) in steps.iter().enumerate() {
        let a = Tensor::from_vec(item_shape, x0.data()[k * per..(k + 1) * per].to_vec())?;
        let e = Tensor::from_vec(item_shape, eps.data()[k * per..(k + 1) * per].to_vec())?;
        xt.extend_from_slice(q_sample(&a, t, &e, sched)?.data());
    }
    let xt = Tensor::from_vec(x0.shape(), xt)?;
    let g = global_content(&xt, grid)?;
    let cond = assemble_condition(&crop_each(&xt, grid, positions)?, &g)?;
    drop((xt, g));
    let target = crop_each(eps, grid, positions)?;
    let pred = model.forward(&Var::constant(cond), steps, positions)?;
    ops::mse_loss(&pred, &target)
}

/// Single-example objective for a `C x H x W` image.
pub fn patch_loss<T: Scalar>(
    model: &Denoiser<T>,
    x0: &Tensor<T>,
    t: usize,
    eps: &Tensor<T>,
    s: usize,
    grid: &PatchGrid,
    sched: &ScheduleParams,
) -> Result<Var<T>> {
    let batch = |x: &Tensor<T>| {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        x.clone().reshape(&shape)
    };
    patch_loss_batch(model, &batch(x0)?, &[t], &batch(eps)?, &[s], grid, sched)
}

/// One optimization step on a batch of `C x H x W` images. Draws every
/// example's `t`, then every `s`, then the full-batch noise, in that order.
pub fn train_step<T: Scalar>(
    state: &mut TrainState<T>,
    batch: &[&Tensor<f32>],
    grid: &PatchGrid,
    sched: &ScheduleParams,
) -> Result<f64> {
    let x0: Tensor<T> = stack(batch)?;
    let b = batch.len();
    let steps: Vec<usize> = (0..b).map(|_| state.rng.gen_range(1..=sched.steps())).collect();
    let positions: Vec<usize> = (0..b).map(|_| state.rng.gen_range(0..grid.patch_count())).collect();
    let eps = Tensor::randn(x0.shape(), &mut state.rng);
    state.model.zero_grad();
    let loss = patch_loss_batch(&state.model, &x0, &steps, &eps, &positions, grid, sched)?;
    let value = loss.value().item().to_f64().unwrap_or(f64::NAN);
    loss.backward();
    drop(loss);
    state.optimizer.step(&state.model.params())?;
    state.iteration += 1;
    Ok(value)
}

/// Where `train_loop` writes checkpoints and its loss log.
#[derive(Debug, Clone, Default)]
pub struct TrainOutputs<'a> {
    pub checkpoint_dir: Option<&'a Path>,
    pub loss_log: Option<&'a Path>,
}

/// Runs `train_step` until `config.iterations` is reached, resuming from
/// `state.iteration`. Returns the losses of the iterations run here.
pub fn train_loop<T: Scalar>(
    state: &mut TrainState<T>,
    images: &[Tensor<f32>],
    config: &TrainConfig,
    sched: &ScheduleParams,
    outputs: &TrainOutputs,
) -> Result<Vec<f64>> {
    config.validate()?;
    let first = images.first().ok_or_else(|| Error::Config("empty training set".into()))?;
    let shape = first.shape();
    if shape.len() != 3 {
        return Err(Error::ShapeMismatch(format!("images must be C x H x W, got {shape:?}")));
    }
    if shape[0] != state.model.config().image_channels {
        return Err(Error::Config(format!(
            "model expects {} channels, data has {}",
            state.model.config().image_channels,
            shape[0]
        )));
    }
    if sched.steps() != config.steps {
        return Err(Error::Config(format!(
            "schedule has {} steps, config says {}",
            sched.steps(),
            config.steps
        )));
    }
    if (shape[1], shape[2]) != (config.height, config.width) {
        return Err(Error::Config(format!(
            "config says {}x{} images, data is {}x{}",
            config.height, config.width, shape[1], shape[2]
        )));
    }
    let grid = PatchGrid::new(config.divisions, shape[1], shape[2])?;
    state
        .model
        .config()
        .validate_patch(grid.patch_height(), grid.patch_width())?;

    let mut log = match outputs.loss_log {
        Some(path) => {
            let fresh = state.iteration == 0 || !path.exists();
            let file = std::fs::OpenOptions::new()
                .create(true)
                .append(!fresh)
                .write(true)
                .truncate(fresh)
                .open(path)?;
            let mut w = std::io::BufWriter::new(file);
            if fresh {
                writeln!(w, "iteration,loss,wallclock_ms")?;
            }
            Some(w)
        }
        None => None,
    };
    let start = Instant::now();
    let mut losses = Vec::new();
    while state.iteration < config.iterations {
        let idx = state.next_indices(config.batch_size, images.len())?;
        let batch: Vec<&Tensor<f32>> = idx.iter().map(|&i| &images[i]).collect();
        let loss = train_step(state, &batch, &grid, sched)?;
        if !loss.is_finite() {
            return Err(Error::Config(format!("loss diverged at iteration {}", state.iteration)));
        }
        losses.push(loss);
        if let Some(w) = log.as_mut() {
            writeln!(w, "{},{},{}", state.iteration, loss, start.elapsed().as_millis())?;
        }
        if let Some(dir) = outputs.checkpoint_dir {
            let due = config.checkpoint_every > 0 && state.iteration % config.checkpoint_every == 0;
            if due || state.iteration == config.iterations {
                if let Some(w) = log.as_mut() {
                    w.flush()?;
                }
                crate::checkpoint::save(dir, state, config, sched)?;
            }
        }
    }
    if let Some(w) = log.as_mut() {
        w.flush()?;
    }
    Ok(losses)
}
