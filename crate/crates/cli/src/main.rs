//! `patchdiff`: generate data, train, sample, profile memory, evaluate.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

mod config;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use patchdiff_core::checkpoint;
use patchdiff_core::data::{self, Dataset};
use patchdiff_core::eval;
use patchdiff_core::memprofile;
use patchdiff_core::sampling::{self, PatchMode, SampleRequest};
use patchdiff_core::training::{self, TrainOutputs, TrainState};

use config::RunConfig;

pub const VERSION_FILE: &str = "version.txt";
pub const RESOLVED_FILE: &str = "resolved_config.txt";

#[derive(Parser, Debug)]
#[command(name = "patchdiff", version, about = "Patch-wise denoising diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dataset as PGM/PPM files plus a manifest.
    GenData(GenDataArgs),
    /// Train a patch denoiser, resuming if the checkpoint directory has one.
    Train(TrainArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Compare analytical and measured peak activation memory across N.
    Profile(ProfileArgs),
    /// Proxy-FD and seam score of a sample directory.
    Eval(EvalArgs),
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum DatasetKind {
    Blobs,
    Gradients,
}

#[derive(clap::Args, Debug)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    dataset: DatasetKind,
    #[arg(long)]
    count: usize,
    /// Square image side.
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args, Debug)]
struct TrainArgs {
    /// key = value file with [model], [train], [schedule] and [data] sections.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    n_divisions: Option<usize>,
    #[arg(long)]
    iters: Option<u64>,
    #[arg(long)]
    batch: Option<usize>,
    /// Defaults to 1e-4.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    ckpt_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory from gen-data; without it the configured
    /// synthetic dataset is generated in memory.
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(clap::Args, Debug)]
struct SampleArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Images denoised together.
    #[arg(long, default_value_t = 16)]
    batch: usize,
    /// Run the patches of a step on separate threads (gives up the
    /// one-patch memory bound).
    #[arg(long)]
    parallel: bool,
}

#[derive(clap::Args, Debug)]
#[command(group(clap::ArgGroup::new("source").required(true).args(["ckpt", "config"])))]
struct ProfileArgs {
    #[arg(long)]
    ckpt: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    n_list: Vec<usize>,
    #[arg(long)]
    csv: PathBuf,
    /// Reverse steps measured per N.
    #[arg(long, default_value_t = 2)]
    steps: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(clap::Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    samples_dir: PathBuf,
    #[arg(long)]
    ref_dir: PathBuf,
    #[arg(long)]
    n_divisions: usize,
    #[arg(long)]
    csv: PathBuf,
    /// Label for the report row; defaults to the samples directory name.
    #[arg(long)]
    model: Option<String>,
}

/// Usage line of the first subcommand named in `args`, else the top level.
fn usage_for(mut args: impl Iterator<Item = String>) -> String {
    let mut cmd = Cli::command();
    cmd.build();
    let sub = args.find_map(|a| cmd.find_subcommand(&a).map(|c| c.get_name().to_string()));
    match sub.and_then(|name| cmd.find_subcommand_mut(&name).map(|c| c.render_usage())) {
        Some(usage) => usage.to_string(),
        None => cmd.render_usage().to_string(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            if !e.use_stderr() {
                return ExitCode::SUCCESS;
            }
            let text = e.render().to_string();
            if !text.contains("Usage:") {
                eprintln!("\n{}", usage_for(std::env::args().skip(1)));
            }
            return ExitCode::from(1);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Sample(a) => cmd_sample(a),
        Command::Profile(a) => cmd_profile(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn stamp(dir: &Path, resolved: &str) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_FILE), resolved)?;
    fs::write(
        dir.join(VERSION_FILE),
        format!("{} {}\n", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")),
    )?;
    Ok(())
}

fn parent_dir(file: &Path) -> PathBuf {
    match file.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let ds = match a.dataset {
        DatasetKind::Blobs => data::gen_blobs(a.count, [1, a.size, a.size], a.seed)?,
        DatasetKind::Gradients => data::gen_gradients(a.count, [3, a.size, a.size], a.seed)?,
    };
    data::write_dataset(&a.out, &ds)?;
    let mut doc = patchdiff_core::kv::KvDoc::new();
    doc.set("data", "dataset", &ds.name);
    doc.set("data", "count", a.count);
    doc.set("data", "size", a.size);
    doc.set("data", "seed", a.seed);
    stamp(&a.out, &doc.to_string())?;
    let back = data::read_dataset(&a.out)?;
    if back.len() != a.count {
        bail!("wrote {} images but read back {}", a.count, back.len());
    }
    println!("wrote {} {} images to {}", a.count, ds.name, a.out.display());
    Ok(())
}

fn training_data(run: &RunConfig, dir: Option<&Path>) -> Result<Dataset> {
    let ds = match dir {
        Some(d) if d.join(data::MANIFEST).exists() => data::read_dataset(d)?,
        Some(d) => data::load_image_dir(d, (run.train.height, run.train.width))?,
        None => run.synthesize()?,
    };
    if ds.is_empty() {
        bail!("training dataset is empty");
    }
    let (train, _, _) = data::split(&ds, data::DEFAULT_SPLIT, run.data_seed)?;
    Ok(train)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let mut run = RunConfig::resolve(a.config.as_deref())?;
    run.override_train(a.n_divisions, a.iters, a.batch, a.lr, a.seed)?;
    let train_set = training_data(&run, a.data.as_deref())?;
    if train_set.channels != run.model.image_channels {
        run.model.image_channels = train_set.channels;
    }
    run.validate()?;
    let sched = run.schedule()?;

    let resumable = a.ckpt_dir.join(checkpoint::MANIFEST).exists();
    let mut state = if resumable {
        let (state, saved, _) = checkpoint::load::<f32>(&a.ckpt_dir)
            .with_context(|| format!("resuming from {}", a.ckpt_dir.display()))?;
        if saved.divisions != run.train.divisions || state.model.config() != &run.model {
            bail!("{} holds a checkpoint with a different model", a.ckpt_dir.display());
        }
        state
    } else {
        TrainState::<f32>::new(run.model.clone(), &run.train)?
    };
    stamp(&a.ckpt_dir, &run.to_kv().to_string())?;
    let log = a.ckpt_dir.join("loss.csv");
    let losses = training::train_loop(
        &mut state,
        &train_set.images,
        &run.train,
        &sched,
        &TrainOutputs {
            checkpoint_dir: Some(&a.ckpt_dir),
            loss_log: Some(&log),
        },
    )?;
    if !a.ckpt_dir.join(checkpoint::MANIFEST).exists() {
        checkpoint::save(&a.ckpt_dir, &state, &run.train, &sched)?;
    }
    checkpoint::load_model::<f32>(&a.ckpt_dir)?;
    match losses.last() {
        Some(l) => println!("iteration {} loss {l:.5}", state.iteration),
        None => println!("already at iteration {}", state.iteration),
    }
    Ok(())
}

fn cmd_sample(a: SampleArgs) -> Result<()> {
    let (model, sched) = checkpoint::load_model::<f32>(&a.ckpt)?;
    let (_, train, _) = checkpoint::read_config(&a.ckpt)?;
    let req = SampleRequest {
        count: a.count,
        seed: a.seed,
        divisions: model.config().divisions,
        size: (train.height, train.width),
        batch_size: a.batch,
        mode: if a.parallel { PatchMode::Parallel } else { PatchMode::Sequential },
    };
    let images = sampling::sample(&model, &req, &sched)?;
    let paths = sampling::write_samples(&a.out, a.seed, &images)?;
    let mut doc = patchdiff_core::kv::KvDoc::parse(&fs::read_to_string(a.ckpt.join(checkpoint::CONFIG))?)?;
    doc.set("sample", "ckpt", a.ckpt.display());
    doc.set("sample", "count", a.count);
    doc.set("sample", "seed", a.seed);
    doc.set("sample", "parallel", a.parallel);
    stamp(&a.out, &doc.to_string())?;
    for p in &paths {
        data::read_image(p)?;
    }
    println!("wrote {} samples to {}", paths.len(), a.out.display());
    Ok(())
}

fn cmd_profile(a: ProfileArgs) -> Result<()> {
    let run = match (&a.ckpt, &a.config) {
        (Some(ckpt), _) => RunConfig::from_checkpoint(ckpt)?,
        (None, config) => RunConfig::resolve(config.as_deref())?,
    };
    if a.n_list.is_empty() {
        bail!("--n-list is empty");
    }
    let sched = run.schedule()?;
    let entries = memprofile::profile::<f32>(
        &run.model,
        (run.train.height, run.train.width),
        &a.n_list,
        &sched,
        a.steps,
        a.seed,
    )?;
    let (table, csv) = memprofile::compare_report(&entries);
    print!("{table}");
    let dir = parent_dir(&a.csv);
    let mut doc = run.to_kv();
    doc.set("profile", "n_list", patchdiff_core::kv::join_list(&a.n_list));
    doc.set("profile", "steps", a.steps);
    stamp(&dir, &doc.to_string())?;
    fs::write(&a.csv, &csv)?;
    memprofile::parse_csv(&fs::read_to_string(&a.csv)?)?;
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let samples = data::read_images(&a.samples_dir)?;
    let reference = data::read_images(&a.ref_dir)?;
    if samples.is_empty() || reference.is_empty() {
        bail!("no PGM/PPM images in the samples or reference directory");
    }
    let model = a.model.clone().unwrap_or_else(|| {
        a.samples_dir
            .file_name()
            .and_then(|n| n.to_str())
            .unwrap_or("samples")
            .to_string()
    });
    let row = eval::evaluate(&model, a.n_divisions, &samples, &reference)?;
    let report = eval::report_csv(&[row.clone()]);
    let mut doc = patchdiff_core::kv::KvDoc::new();
    doc.set("eval", "samples_dir", a.samples_dir.display());
    doc.set("eval", "ref_dir", a.ref_dir.display());
    doc.set("eval", "n_divisions", a.n_divisions);
    doc.set("eval", "model", &model);
    stamp(&parent_dir(&a.csv), &doc.to_string())?;
    fs::write(&a.csv, &report)?;
    eval::parse_report_csv(&fs::read_to_string(&a.csv)?)?;
    print!("{report}");
    Ok(())
}
