//! Run configuration: defaults, then the config file, then flags.

use std::path::Path;

use anyhow::{bail, Context, Result};

use patchdiff_core::checkpoint;
use patchdiff_core::data::{self, Dataset};
use patchdiff_core::denoiser::DenoiserConfig;
use patchdiff_core::kv::KvDoc;
use patchdiff_core::schedule::ScheduleParams;
use patchdiff_core::training::TrainConfig;

pub const DESK_ENV: &str = "PATCHDIFF_DESK";
pub const DEFAULT_DATA_COUNT: usize = 2000;

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleSpec {
    /// Linear 1e-4 to 0.02, rescaled to the configured length.
    Scaled,
    Linear { beta_start: f64, beta_end: f64 },
    Betas(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: DenoiserConfig,
    pub train: TrainConfig,
    pub schedule: ScheduleSpec,
    /// Images generated when training without `--data`.
    pub data_count: usize,
    /// Seed of the generator and of the train/val/test split.
    pub data_seed: u64,
}

pub fn desk_profile() -> bool {
    std::env::var(DESK_ENV).map(|v| v.trim() == "1").unwrap_or(false)
}

fn channels_of(dataset: &str) -> Result<usize> {
    match dataset {
        "blobs" => Ok(1),
        "gradients" => Ok(3),
        other => bail!("unknown dataset {other:?}; expected blobs or gradients"),
    }
}

impl RunConfig {
    pub fn defaults() -> Self {
        let train = if desk_profile() { TrainConfig::desk() } else { TrainConfig::full() };
        Self {
            model: DenoiserConfig::desk(1, train.divisions),
            train,
            schedule: ScheduleSpec::Scaled,
            data_count: DEFAULT_DATA_COUNT,
            data_seed: 7,
        }
    }

    /// Defaults overlaid with the sections of `file`, if any.
    pub fn resolve(file: Option<&Path>) -> Result<Self> {
        let mut run = Self::defaults();
        let Some(path) = file else { return Ok(run) };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let user = KvDoc::parse(&text).with_context(|| format!("parsing {}", path.display()))?;

        run.train = TrainConfig::read_kv(&user, "train", run.train)?;
        if let Some(n) = user.get_parsed::<usize>("model", "divisions")? {
            if user.get("train", "divisions").is_none() {
                run.train.divisions = n;
            }
        }
        if user.get("model", "image_channels").is_none() {
            run.model.image_channels = channels_of(&run.train.dataset)?;
        }
        let mut doc = KvDoc::new();
        run.model.write_kv(&mut doc, "model");
        doc.merge(&user);
        run.model = DenoiserConfig::read_kv(&doc, "model")?;
        run.model.divisions = run.train.divisions;

        if let Some(betas) = user.get_list::<f64>("schedule", "betas")? {
            run.schedule = ScheduleSpec::Betas(betas);
        } else {
            let start = user.get_parsed::<f64>("schedule", "beta_start")?;
            let end = user.get_parsed::<f64>("schedule", "beta_end")?;
            match (start, end) {
                (None, None) => {}
                (Some(beta_start), Some(beta_end)) => run.schedule = ScheduleSpec::Linear { beta_start, beta_end },
                _ => bail!("[schedule] needs both beta_start and beta_end"),
            }
        }
        if let Some(steps) = user.get_parsed::<usize>("schedule", "steps")? {
            if user.get("train", "steps").is_some() && steps != run.train.steps {
                bail!("[schedule] steps = {steps} disagrees with [train] steps = {}", run.train.steps);
            }
            run.train.steps = steps;
        }
        if let Some(c) = user.get_parsed("data", "count")? {
            run.data_count = c;
        }
        if let Some(s) = user.get_parsed("data", "seed")? {
            run.data_seed = s;
        }
        run.validate()?;
        Ok(run)
    }

    pub fn from_checkpoint(dir: &Path) -> Result<Self> {
        let (model, train, sched) = checkpoint::read_config(dir)?;
        Ok(Self {
            model,
            train,
            schedule: ScheduleSpec::Betas(sched.betas().to_vec()),
            data_count: DEFAULT_DATA_COUNT,
            data_seed: 7,
        })
    }

    pub fn override_train(
        &mut self,
        divisions: Option<usize>,
        iterations: Option<u64>,
        batch_size: Option<usize>,
        lr: Option<f64>,
        seed: Option<u64>,
    ) -> Result<()> {
        if let Some(n) = divisions {
            self.train.divisions = n;
            self.model.divisions = n;
        }
        if let Some(i) = iterations {
            self.train.iterations = i;
        }
        if let Some(b) = batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = lr {
            self.train.lr = lr;
        }
        if let Some(s) = seed {
            self.train.seed = s;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.model.divisions != self.train.divisions {
            bail!("model divisions {} != train divisions {}", self.model.divisions, self.train.divisions);
        }
        let n = self.train.divisions;
        if self.train.height % n != 0 || self.train.width % n != 0 {
            bail!("{}x{} images do not split into {n}x{n} patches", self.train.height, self.train.width);
        }
        self.model.validate_patch(self.train.height / n, self.train.width / n)?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<ScheduleParams> {
        let sched = match &self.schedule {
            ScheduleSpec::Scaled => ScheduleParams::scaled_linear(self.train.steps)?,
            ScheduleSpec::Linear { beta_start, beta_end } => {
                ScheduleParams::linear(self.train.steps, *beta_start, *beta_end)?
            }
            ScheduleSpec::Betas(b) => ScheduleParams::from_betas(b.clone())?,
        };
        if sched.steps() != self.train.steps {
            bail!("schedule has {} steps but training uses {}", sched.steps(), self.train.steps);
        }
        Ok(sched)
    }

    /// In-memory synthetic dataset named by `train.dataset`.
    pub fn synthesize(&self) -> Result<Dataset> {
        let c = channels_of(&self.train.dataset)?;
        let shape = [c, self.train.height, self.train.width];
        Ok(match self.train.dataset.as_str() {
            "blobs" => data::gen_blobs(self.data_count, shape, self.data_seed)?,
            _ => data::gen_gradients(self.data_count, shape, self.data_seed)?,
        })
    }

    /// Fully resolved form, with the schedule spelled out as betas.
    pub fn to_kv(&self) -> KvDoc {
        let mut doc = KvDoc::new();
        self.model.write_kv(&mut doc, "model");
        self.train.write_kv(&mut doc, "train");
        if let Ok(sched) = self.schedule() {
            checkpoint::schedule_kv(&sched, &mut doc);
        }
        doc.set("data", "count", self.data_count);
        doc.set("data", "seed", self.data_seed);
        doc
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    #[test]
    fn file_values_overlay_defaults() {
        let f = write("[train]\ndivisions = 4\niterations = 10\n[model]\nbase_channels = 8\n[schedule]\nbeta_start = 0.001\nbeta_end = 0.01\n");
        let run = RunConfig::resolve(Some(f.path())).unwrap();
        assert_eq!(run.train.divisions, 4);
        assert_eq!(run.model.divisions, 4);
        assert_eq!(run.train.iterations, 10);
        assert_eq!(run.model.base_channels, 8);
        assert_eq!(run.model.embed_dim, RunConfig::defaults().model.embed_dim);
        let s = run.schedule().unwrap();
        assert!((s.betas()[0] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn flags_win_over_file() {
        let f = write("[train]\ndivisions = 4\nlr = 0.5\n");
        let mut run = RunConfig::resolve(Some(f.path())).unwrap();
        run.override_train(Some(2), None, None, Some(1e-3), None).unwrap();
        assert_eq!(run.train.divisions, 2);
        assert_eq!(run.model.divisions, 2);
        assert_eq!(run.train.lr, 1e-3);
    }

    #[test]
    fn gradients_take_three_channels() {
        let f = write("[train]\ndataset = gradients\n");
        assert_eq!(RunConfig::resolve(Some(f.path())).unwrap().model.image_channels, 3);
    }

    #[test]
    fn half_a_schedule_is_rejected() {
        let f = write("[schedule]\nbeta_start = 0.001\n");
        assert!(RunConfig::resolve(Some(f.path())).is_err());
    }

    #[test]
    fn resolved_echo_reparses() {
        let run = RunConfig::defaults();
        let f = write(&run.to_kv().to_string());
        let back = RunConfig::resolve(Some(f.path())).unwrap();
        assert_eq!(back.model, run.model);
        assert_eq!(back.train, run.train);
        assert_eq!(back.schedule().unwrap(), run.schedule().unwrap());
    }
}
