//! Peak activation memory of one patch-wise reverse step: an analytical
//! replay of the allocation sequence, and a measurement through the
//! allocation counter.

use std::fmt::Write as _;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::numerics::{scoped_peak, Scalar, Tensor};
use crate::patching::PatchGrid;
use crate::sampling::{image_rng, sample_step};
use crate::schedule::ScheduleParams;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerPeak {
    pub layer: String,
    /// Highest live activation bytes while the layer ran.
    pub peak_bytes: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry {
    pub divisions: usize,
    pub analytical_bytes: usize,
    pub measured_bytes: Option<usize>,
    pub per_layer: Vec<LayerPeak>,
}

/// Symbolic allocator: tracks live bytes and the running maximum, and
/// attributes every allocation to the layer that is currently open.
struct Replay {
    elem: usize,
    live: usize,
    peak: usize,
    layers: Vec<LayerPeak>,
}

impl Replay {
    fn alloc(&mut self, elems: usize) {
        self.live += elems * self.elem;
        self.peak = self.peak.max(self.live);
        if let Some(l) = self.layers.last_mut() {
            l.peak_bytes = l.peak_bytes.max(self.live);
        }
    }

    fn free(&mut self, elems: usize) {
        self.live -= elems * self.elem;
    }

    fn layer(&mut self, name: impl Into<String>) {
        self.layers.push(LayerPeak {
            layer: name.into(),
            peak_bytes: self.live,
        });
    }

    /// Output plus, for kernels wider than one pixel, the unfolded input.
    fn conv(&mut self, cin: usize, cout: usize, k: usize, hw: usize) {
        self.alloc(cout * hw);
        if k > 1 {
            self.alloc(cin * k * k * hw);
            self.free(cin * k * k * hw);
        }
    }

    /// An elementwise layer whose result replaces its input.
    fn replace(&mut self, elems: usize) {
        self.alloc(elems);
        self.free(elems);
    }

    fn res_block(&mut self, name: &str, cin: usize, cout: usize, hw: usize) {
        self.layer(format!("{name}.norm1"));
        self.alloc(cin * hw);
        self.layer(format!("{name}.silu1"));
        self.replace(cin * hw);
        self.layer(format!("{name}.conv1"));
        self.conv(cin, cout, 3, hw);
        self.free(cin * hw);
        self.layer(format!("{name}.cond"));
        self.alloc(cout);
        self.replace(cout * hw);
        self.free(cout);
        self.layer(format!("{name}.norm2"));
        self.replace(cout * hw);
        self.layer(format!("{name}.silu2"));
        self.replace(cout * hw);
        self.layer(format!("{name}.conv2"));
        self.conv(cout, cout, 3, hw);
        self.free(cout * hw);
        self.layer(format!("{name}.residual"));
        if cin != cout {
            self.conv(cin, cout, 1, hw);
            self.alloc(cout * hw);
            self.free(cout * hw);
        } else {
            self.alloc(cout * hw);
        }
        self.free(cout * hw);
    }

    fn attention(&mut self, c: usize, l: usize) {
        self.layer("mid.attn.norm");
        self.alloc(c * l);
        self.layer("mid.attn");
        self.alloc(c * l);
        self.alloc(3 * c * l + l * l + c * l);
        self.free(3 * c * l + l * l + c * l);
        self.free(c * l);
        self.layer("mid.attn.residual");
        self.alloc(c * l);
        self.free(c * l);
    }
}

/// Replays the allocations of one sequential reverse step over a single
/// image with element size `elem_bytes`. Live at entry: nothing (the
/// incoming latent belongs to the caller). Held for the whole step: the
/// step noise and the output latent (`C H W` each) and the pooled global
/// content (`C H' W'`). Per patch: the cropped patch and its `2C`-channel
/// conditioned copy, then the network, whose intermediates are released as
/// soon as their last consumer has run, except skip tensors, which live
/// until the decoder concatenates them.
pub fn analytical_peak(config: &DenoiserConfig, grid: &PatchGrid, elem_bytes: usize) -> Result<MemoryEntry> {
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    config.validate_patch(ph, pw)?;
    let c = config.image_channels;
    let full = c * grid.height() * grid.width();
    let p = c * ph * pw;
    let e = config.embed_dim;
    let mut r = Replay {
        elem: elem_bytes,
        live: 0,
        peak: 0,
        layers: Vec::new(),
    };

    r.layer("step.noise");
    r.alloc(full);
    r.layer("gcc");
    r.alloc(p);
    r.layer("step.output");
    r.alloc(full);

    // every patch allocates and releases the same sequence
    r.layer("patch.crop");
    r.alloc(p);
    r.layer("patch.condition");
    r.alloc(2 * p);

    r.layer("embedding");
    r.alloc(2 * e);
    let hw0 = ph * pw;
    let base = config.base_channels;
    r.layer("conv_in");
    r.conv(config.in_channels(), base, 3, hw0);

    let levels = config.levels();
    let mut ch = base;
    let mut hw = hw0;
    let mut skips = Vec::new();
    for l in 0..levels {
        let out = config.level_channels(l);
        r.res_block(&format!("down{l}"), ch, out, hw);
        r.free(ch * hw);
        ch = out;
        if l + 1 < levels {
            skips.push((ch, hw));
            r.layer(format!("down{l}.pool"));
            hw /= 4;
            r.alloc(ch * hw);
        }
    }
    if config.attention {
        r.attention(ch, hw);
        r.free(ch * hw);
    }
    r.res_block("mid.res", ch, ch, hw);
    r.free(ch * hw);
    for l in (0..levels - 1).rev() {
        let (sc, shw) = skips.pop().expect("one skip per level");
        r.layer(format!("up{l}.upsample"));
        r.alloc(ch * shw);
        r.free(ch * hw);
        hw = shw;
        r.layer(format!("up{l}.concat"));
        r.alloc((ch + sc) * hw);
        r.free(ch * hw);
        r.free(sc * hw);
        r.res_block(&format!("up{l}"), ch + sc, sc, hw);
        r.free((ch + sc) * hw);
        ch = sc;
    }
    r.layer("norm_out");
    r.replace(ch * hw);
    r.layer("silu_out");
    r.replace(ch * hw);
    r.layer("conv_out");
    r.conv(ch, c, 3, hw);
    r.free(ch * hw);
    r.free(2 * e);
    r.free(2 * p);

    r.layer("patch.update");
    r.alloc(p);
    r.free(p);
    r.alloc(p);
    r.alloc(p);
    r.free(3 * p);
    r.free(p);

    Ok(MemoryEntry {
        divisions: grid.divisions(),
        analytical_bytes: r.peak,
        measured_bytes: None,
        per_layer: r.layers,
    })
}

/// Largest counted allocation peak over `steps` consecutive reverse steps
/// starting at `T`, on one image drawn from `seed`. The incoming latent is
/// allocated outside the measured scope.
pub fn measured_peak<T: Scalar>(
    model: &Denoiser<T>,
    grid: &PatchGrid,
    sched: &ScheduleParams,
    steps: usize,
    seed: u64,
) -> Result<usize> {
    if steps == 0 || steps > sched.steps() {
        return Err(Error::Config(format!("cannot measure {steps} of {} steps", sched.steps())));
    }
    let c = model.config().image_channels;
    let mut rngs = vec![image_rng(seed, 0)];
    let mut x = Tensor::<T>::randn(&[1, c, grid.height(), grid.width()], &mut rngs[0]);
    let mut peak = 0;
    for t in (sched.steps() + 1 - steps..=sched.steps()).rev() {
        let (next, counter) = scoped_peak(|| sample_step(model, &x, t, grid, sched, &mut rngs));
        peak = peak.max(counter.peak_bytes);
        x = next?;
    }
    Ok(peak)
}

/// Analytical and measured peaks of `config`'s architecture for each N.
/// Memory does not depend on weight values, so every N gets a freshly
/// initialized network whose position layer has the matching width.
pub fn profile<T: Scalar>(
    config: &DenoiserConfig,
    size: (usize, usize),
    divisions: &[usize],
    sched: &ScheduleParams,
    steps: usize,
    seed: u64,
) -> Result<Vec<MemoryEntry>> {
    divisions
        .iter()
        .map(|&n| {
            let grid = PatchGrid::new(n, size.0, size.1)?;
            let cfg = DenoiserConfig {
                divisions: n,
                ..config.clone()
            };
            let mut entry = analytical_peak(&cfg, &grid, std::mem::size_of::<T>())?;
            let model = Denoiser::<T>::new(cfg, seed)?;
            entry.measured_bytes = Some(measured_peak(&model, &grid, sched, steps, seed)?);
            Ok(entry)
        })
        .collect()
}

pub const CSV_HEADER: &str = "N,analytical_bytes,measured_bytes,ratio_vs_baseline";

/// Bytes used for ratios: measured when available, else analytical.
fn reference_bytes(e: &MemoryEntry) -> usize {
    e.measured_bytes.unwrap_or(e.analytical_bytes)
}

/// Ratios are against the `N = 1` entry, or the first entry without one.
pub fn ratios(entries: &[MemoryEntry]) -> Vec<f64> {
    let base = entries
        .iter()
        .find(|e| e.divisions == 1)
        .or(entries.first())
        .map(reference_bytes)
        .unwrap_or(1)
        .max(1) as f64;
    entries.iter().map(|e| reference_bytes(e) as f64 / base).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub divisions: usize,
    pub analytical_bytes: usize,
    pub measured_bytes: Option<usize>,
    pub ratio_vs_baseline: f64,
}

/// Text table and CSV for the full-vs-patch comparison.
pub fn compare_report(entries: &[MemoryEntry]) -> (String, String) {
    let r = ratios(entries);
    let mut table = format!("{:>4} {:>16} {:>16} {:>10}\n", "N", "analytical (B)", "measured (B)", "ratio");
    let mut csv = format!("{CSV_HEADER}\n");
    for (e, ratio) in entries.iter().zip(r) {
        let measured = e.measured_bytes.map(|m| m.to_string()).unwrap_or_default();
        let _ = writeln!(
            table,
            "{:>4} {:>16} {:>16} {:>10.4}",
            e.divisions,
            e.analytical_bytes,
            if measured.is_empty() { "-" } else { &measured },
            ratio
        );
        let _ = writeln!(csv, "{},{},{},{}", e.divisions, e.analytical_bytes, measured, ratio);
    }
    (table, csv)
}

pub fn parse_csv(text: &str) -> Result<Vec<CsvRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Format("memory report header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad memory report row {l:?}"));
            if f.len() != 4 {
                return Err(bad());
            }
            Ok(CsvRow {
                divisions: f[0].parse().map_err(|_| bad())?,
                analytical_bytes: f[1].parse().map_err(|_| bad())?,
                measured_bytes: if f[2].is_empty() {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| bad())?)
                },
                ratio_vs_baseline: f[3].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
