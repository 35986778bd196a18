//! Checkpoint directories.
//!
//! ```text
//! manifest.json        name, role, shape, file and data offset per tensor
//! config.txt           [model], [train] and [schedule] sections
//! state.txt            iteration, optimizer step, RNG position, epoch order
//! params/<name>.pdtn   one tensor file per parameter
//! adam/<name>.{m,v}.pdtn
//! ```

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::kv::{join_list, KvDoc};
use crate::numerics::{io, Adam, AdamConfig, Scalar, Tensor};
use crate::schedule::ScheduleParams;
use crate::training::{TrainConfig, TrainState};

pub const MANIFEST: &str = "manifest.json";
pub const CONFIG: &str = "config.txt";
pub const STATE: &str = "state.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    /// `param`, `adam_m` or `adam_v`.
    pub role: String,
    pub shape: Vec<usize>,
    /// Relative to the checkpoint directory.
    pub file: String,
    /// Byte offset of the first value inside `file`.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub tensors: Vec<ManifestEntry>,
}

fn write_entry<T: Scalar>(dir: &Path, role: &str, name: &str, file: String, t: &Tensor<T>) -> Result<ManifestEntry> {
    let path = dir.join(&file);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(&path, io::encode(t))?;
    Ok(ManifestEntry {
        name: name.to_string(),
        role: role.to_string(),
        shape: t.shape().to_vec(),
        file,
        offset: io::header_len(t.rank()),
    })
}

pub fn schedule_kv(sched: &ScheduleParams, doc: &mut KvDoc) {
    doc.set("schedule", "steps", sched.steps());
    doc.set("schedule", "betas", join_list(sched.betas()));
}

pub fn schedule_from_kv(doc: &KvDoc) -> Result<ScheduleParams> {
    let betas: Vec<f64> = doc
        .get_list("schedule", "betas")?
        .ok_or_else(|| Error::Config("[schedule] betas is required".into()))?;
    let sched = ScheduleParams::from_betas(betas)?;
    let steps: usize = doc.require("schedule", "steps")?;
    if steps != sched.steps() {
        return Err(Error::Config(format!("[schedule] lists {} betas for {steps} steps", sched.steps())));
    }
    Ok(sched)
}

/// Writes `state` and its configuration under `dir`, replacing any
/// previous checkpoint there.
pub fn save<T: Scalar>(dir: &Path, state: &TrainState<T>, train: &TrainConfig, sched: &ScheduleParams) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::new();
    for (k, (name, var)) in state.model.named_params().iter().enumerate() {
        entries.push(write_entry(dir, "param", name, format!("params/{name}.pdtn"), &var.value())?);
        entries.push(write_entry(dir, "adam_m", name, format!("adam/{name}.m.pdtn"), &state.optimizer.m[k])?);
        entries.push(write_entry(dir, "adam_v", name, format!("adam/{name}.v.pdtn"), &state.optimizer.v[k])?);
    }

    let mut cfg = KvDoc::new();
    state.model.config().write_kv(&mut cfg, "model");
    train.write_kv(&mut cfg, "train");
    schedule_kv(sched, &mut cfg);
    fs::write(dir.join(CONFIG), cfg.to_string())?;

    let mut st = KvDoc::new();
    st.set("state", "iteration", state.iteration);
    st.set("state", "adam_step", state.optimizer.step);
    st.set("state", "rng_seed", hex(&state.rng.get_seed()));
    st.set("state", "rng_stream", state.rng.get_stream());
    st.set("state", "rng_word_pos", state.rng.get_word_pos());
    st.set("state", "cursor", state.cursor);
    st.set("state", "order", join_list(&state.order));
    fs::write(dir.join(STATE), st.to_string())?;

    let manifest = Manifest {
        format: "pdtn-f32".into(),
        tensors: entries,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join(MANIFEST), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{MANIFEST}: {e}")))
}

fn read_role<T: Scalar>(dir: &Path, manifest: &Manifest, role: &str) -> Result<Vec<(String, Tensor<T>)>> {
    let mut out = Vec::new();
    for e in manifest.tensors.iter().filter(|e| e.role == role) {
        let bytes = fs::read(dir.join(&e.file))?;
        let t: Tensor<T> = io::decode(&bytes)?;
        if t.shape() != e.shape.as_slice() || io::header_len(t.rank()) != e.offset {
            return Err(Error::Format(format!("{} does not match its manifest entry", e.file)));
        }
        out.push((e.name.clone(), t));
    }
    Ok(out)
}

/// Configuration stored with a checkpoint.
pub fn read_config(dir: &Path) -> Result<(DenoiserConfig, TrainConfig, ScheduleParams)> {
    let doc = KvDoc::parse(&fs::read_to_string(dir.join(CONFIG))?)?;
    let model = DenoiserConfig::read_kv(&doc, "model")?;
    let train = TrainConfig::read_kv(&doc, "train", TrainConfig::desk())?;
    let sched = schedule_from_kv(&doc)?;
    Ok((model, train, sched))
}

/// Trained network and its schedule, without optimizer state.
pub fn load_model<T: Scalar>(dir: &Path) -> Result<(Denoiser<T>, ScheduleParams)> {
    let (model_cfg, _, sched) = read_config(dir)?;
    let model = Denoiser::new(model_cfg, 0)?;
    let manifest = read_manifest(dir)?;
    model.load(&read_role(dir, &manifest, "param")?)?;
    Ok((model, sched))
}

/// Full training state for resuming.
pub fn load<T: Scalar>(dir: &Path) -> Result<(TrainState<T>, TrainConfig, ScheduleParams)> {
    let (model_cfg, train, sched) = read_config(dir)?;
    let mut state = TrainState::new(model_cfg, &train)?;
    let manifest = read_manifest(dir)?;
    state.model.load(&read_role(dir, &manifest, "param")?)?;
    let moments = |role: &str| -> Result<Vec<Tensor<T>>> {
        let found = read_role::<T>(dir, &manifest, role)?;
        state
            .model
            .named_params()
            .iter()
            .map(|(name, var)| {
                let (_, t) = found
                    .iter()
                    .find(|(n, _)| n == name)
                    .ok_or_else(|| Error::Format(format!("missing {role} for {name}")))?;
                t.expect_shape(&var.shape())?;
                Ok(t.clone())
            })
            .collect()
    };
    let m = moments("adam_m")?;
    let v = moments("adam_v")?;

    let st = KvDoc::parse(&fs::read_to_string(dir.join(STATE))?)?;
    let mut rng = ChaCha8Rng::from_seed(unhex(&st.require::<String>("state", "rng_seed")?)?);
    rng.set_stream(st.require("state", "rng_stream")?);
    rng.set_word_pos(st.require("state", "rng_word_pos")?);
    state.optimizer = Adam {
        config: AdamConfig {
            lr: train.lr,
            ..AdamConfig::default()
        },
        step: st.require("state", "adam_step")?,
        m,
        v,
    };
    state.iteration = st.require("state", "iteration")?;
    state.rng = rng;
    state.cursor = st.require("state", "cursor")?;
    state.order = st.get_list("state", "order")?.unwrap_or_default();
    Ok((state, train, sched))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn unhex(s: &str) -> Result<[u8; 32]> {
    let bad = || Error::Format(format!("bad RNG seed {s:?}"));
    if s.len() != 64 {
        return Err(bad());
    }
    let mut out = [0u8; 32];
    for (k, o) in out.iter_mut().enumerate() {
        *o = u8::from_str_radix(s.get(2 * k..2 * k + 2).ok_or_else(bad)?, 16).map_err(|_| bad())?;
    }
    Ok(out)
}
