//! Patch-by-patch reverse process.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{image_extension, write_image};
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::numerics::{alloc, Scalar, Tensor};
use crate::patching::{assemble_condition, crop, global_content, paste, PatchGrid};
use crate::schedule::{reverse_step, ScheduleParams};

/// Anything that maps conditioned patches `B x 2C x h x w` to noise
/// estimates `B x C x h x w`.
pub trait NoisePredictor<T: Scalar> {
    fn image_channels(&self) -> usize;
    fn predict(&self, x_cond: Tensor<T>, steps: &[usize], positions: &[usize]) -> Result<Tensor<T>>;
}

impl<T: Scalar> NoisePredictor<T> for Denoiser<T> {
    fn image_channels(&self) -> usize {
        self.config().image_channels
    }

    fn predict(&self, x_cond: Tensor<T>, steps: &[usize], positions: &[usize]) -> Result<Tensor<T>> {
        self.predict_noise_batch(x_cond, steps, positions)
    }
}

/// How the patches of one step are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PatchMode {
    /// One patch at a time; only one patch's activations are ever live.
    #[default]
    Sequential,
    /// All patches of a step on scoped threads. Faster on several cores,
    /// but the peak memory is that of all patches together.
    Parallel,
}

fn denoise_patch<T: Scalar, P: NoisePredictor<T> + ?Sized>(
    model: &P,
    x_t: &Tensor<T>,
    g: &crate::patching::GlobalContent<T>,
    z: &Tensor<T>,
    t: usize,
    s: usize,
    grid: &PatchGrid,
    sched: &ScheduleParams,
) -> Result<Tensor<T>> {
    let b = x_t.shape()[0];
    let patch = crop(x_t, grid, s)?;
    let cond = assemble_condition(&patch, g)?;
    let eps = model.predict(cond, &vec![t; b], &vec![s; b])?;
    reverse_step(&patch, &eps, t, &crop(z, grid, s)?, sched)
}

/// One reverse step for a batch of full images `B x C x H x W` with the
/// supplied full-size noise `z`. The global content is pooled from `x_t`
/// once; each patch is then cropped, conditioned, denoised and written
/// into `x_{t-1}`.
pub fn sample_step_with_noise<T: Scalar, P: NoisePredictor<T> + Sync + ?Sized>(
    model: &P,
    x_t: &Tensor<T>,
    t: usize,
    z: &Tensor<T>,
    grid: &PatchGrid,
    sched: &ScheduleParams,
    mode: PatchMode,
) -> Result<Tensor<T>> {
    if x_t.rank() != 4 || x_t.shape()[1] != model.image_channels() {
        return Err(Error::ShapeMismatch(format!(
            "expected B x {} x H x W latent, got {:?}",
            model.image_channels(),
            x_t.shape()
        )));
    }
    z.expect_shape(x_t.shape())?;
    sched.index(t)?;
    let g = global_content(x_t, grid)?;
    let mut out = Tensor::zeros(x_t.shape());
    match mode {
        PatchMode::Sequential => {
            for s in 0..grid.patch_count() {
                alloc::mark("patch");
                let p = denoise_patch(model, x_t, &g, z, t, s, grid, sched)?;
                paste(&mut out, grid, s, &p)?;
            }
            alloc::mark("patch");
        }
        PatchMode::Parallel => {
            let patches: Vec<Result<Tensor<T>>> = std::thread::scope(|scope| {
                let handles: Vec<_> = (0..grid.patch_count())
                    .map(|s| {
                        let g = &g;
                        scope.spawn(move || denoise_patch(model, x_t, g, z, t, s, grid, sched))
                    })
                    .collect();
                handles
                    .into_iter()
                    .map(|h| h.join().unwrap_or_else(|_| Err(Error::Config("patch worker panicked".into()))))
                    .collect()
            });
            for (s, p) in patches.into_iter().enumerate() {
                paste(&mut out, grid, s, &p?)?;
            }
        }
    }
    Ok(out)
}

/// Per-image random streams: image `k` of a request with seed `seed` owns
/// ChaCha stream `k`, so results do not depend on batching.
pub fn image_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Full-size noise for one step, one draw per image from its own stream;
/// zero at `t = 1`.
pub fn step_noise<T: Scalar>(shape: &[usize], t: usize, rngs: &mut [ChaCha8Rng]) -> Result<Tensor<T>> {
    if t == 1 {
        return Ok(Tensor::zeros(shape));
    }
    draw_batch(shape, rngs)
}

fn draw_batch<T: Scalar>(shape: &[usize], rngs: &mut [ChaCha8Rng]) -> Result<Tensor<T>> {
    if shape.first() != Some(&rngs.len()) {
        return Err(Error::ShapeMismatch(format!("{} streams for batch shape {shape:?}", rngs.len())));
    }
    let mut data = Vec::with_capacity(shape.iter().product());
    for rng in rngs.iter_mut() {
        data.extend_from_slice(Tensor::<T>::randn(&shape[1..], rng).data());
    }
    Tensor::from_vec(shape, data)
}

/// One reverse step drawing its own noise.
pub fn sample_step<T: Scalar, P: NoisePredictor<T> + Sync + ?Sized>(
    model: &P,
    x_t: &Tensor<T>,
    t: usize,
    grid: &PatchGrid,
    sched: &ScheduleParams,
    rngs: &mut [ChaCha8Rng],
) -> Result<Tensor<T>> {
    let z = step_noise(x_t.shape(), t, rngs)?;
    sample_step_with_noise(model, x_t, t, &z, grid, sched, PatchMode::Sequential)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleRequest {
    pub count: usize,
    pub seed: u64,
    /// Patch divisions; must match the model.
    pub divisions: usize,
    /// Image height and width.
    pub size: (usize, usize),
    /// Images denoised together; does not affect the result.
    pub batch_size: usize,
    pub mode: PatchMode,
}

/// Runs `x_T ~ N(0, I)` down to `x_0` for `request.count` images and
/// returns them clamped to `[-1, 1]` as `C x H x W` tensors.
pub fn sample<T: Scalar, P: NoisePredictor<T> + Sync + ?Sized>(
    model: &P,
    request: &SampleRequest,
    sched: &ScheduleParams,
) -> Result<Vec<Tensor<f32>>> {
    if request.count == 0 || request.batch_size == 0 {
        return Err(Error::Config("sample count and batch size must be positive".into()));
    }
    let (h, w) = request.size;
    let grid = PatchGrid::new(request.divisions, h, w)?;
    let c = model.image_channels();
    let mut images = Vec::with_capacity(request.count);
    let mut start = 0;
    while start < request.count {
        let b = request.batch_size.min(request.count - start);
        let mut rngs: Vec<ChaCha8Rng> = (start..start + b).map(|k| image_rng(request.seed, k)).collect();
        let mut x = draw_batch::<T>(&[b, c, h, w], &mut rngs)?;
        for t in (1..=sched.steps()).rev() {
            let z = step_noise(x.shape(), t, &mut rngs)?;
            x = sample_step_with_noise(model, &x, t, &z, &grid, sched, request.mode)?;
        }
        let per = c * h * w;
        for k in 0..b {
            let img = Tensor::from_vec(
                &[c, h, w],
                x.data()[k * per..(k + 1) * per]
                    .iter()
                    .map(|v| v.to_f32().unwrap_or(f32::NAN).clamp(-1.0, 1.0))
                    .collect(),
            )?;
            images.push(img);
        }
        start += b;
    }
    Ok(images)
}

pub fn sample_file_name(seed: u64, index: usize, channels: usize) -> String {
    format!("sample_{seed}_{index}.{}", image_extension(channels))
}

/// Writes `sample_{seed}_{index}.pgm` (grayscale) or `.ppm` (colour).
pub fn write_samples(dir: &Path, seed: u64, images: &[Tensor<f32>]) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    images
        .iter()
        .enumerate()
        .map(|(k, img)| {
            let path = dir.join(sample_file_name(seed, k, img.shape()[0]));
            write_image(&path, img)?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Zero(usize);

    impl NoisePredictor<f64> for Zero {
        fn image_channels(&self) -> usize {
            self.0
        }
        fn predict(&self, x: Tensor<f64>, _: &[usize], _: &[usize]) -> Result<Tensor<f64>> {
            let s = x.shape();
            Ok(Tensor::zeros(&[s[0], s[1] / 2, s[2], s[3]]))
        }
    }

    #[test]
    fn streams_are_batch_independent() {
        let sched = ScheduleParams::scaled_linear(5).unwrap();
        let req = |batch_size| SampleRequest {
            count: 3,
            seed: 11,
            divisions: 2,
            size: (4, 4),
            batch_size,
            mode: PatchMode::Sequential,
        };
        let a = sample::<f64, _>(&Zero(1), &req(1), &sched).unwrap();
        let b = sample::<f64, _>(&Zero(1), &req(3), &sched).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn parallel_matches_sequential() {
        let sched = ScheduleParams::scaled_linear(5).unwrap();
        let grid = PatchGrid::new(2, 4, 4).unwrap();
        let x = Tensor::randn(&[2, 1, 4, 4], &mut image_rng(1, 0));
        let z = Tensor::randn(&[2, 1, 4, 4], &mut image_rng(1, 1));
        let a = sample_step_with_noise(&Zero(1), &x, 3, &z, &grid, &sched, PatchMode::Sequential).unwrap();
        let b = sample_step_with_noise(&Zero(1), &x, 3, &z, &grid, &sched, PatchMode::Parallel).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn file_names() {
        assert_eq!(sample_file_name(3, 7, 1), "sample_3_7.pgm");
        assert_eq!(sample_file_name(3, 7, 3), "sample_3_7.ppm");
    }
}
