//! Desk-scale quality metrics: a Fréchet distance between Gaussians fit to
//! fixed block descriptors ("proxy-FD", not FID), a patch-seam score, and
//! a blob detector for the synthetic blob data.

use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::numerics::Tensor;
use crate::patching::PatchGrid;

pub const BLOCK: usize = 4;

/// Block descriptor of a `C x H x W` image: the mean of every 4x4 block
/// (channel-major, then row, then column) followed by the population
/// standard deviation of every block in the same order.
pub fn features(image: &Tensor<f32>) -> Result<Vec<f64>> {
    let s = image.shape();
    if s.len() != 3 || s[1] % BLOCK != 0 || s[2] % BLOCK != 0 || s[1] == 0 || s[2] == 0 {
        return Err(Error::DimensionMismatch(format!(
            "descriptor needs C x H x W with H, W multiples of {BLOCK}, got {s:?}"
        )));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (bh, bw) = (h / BLOCK, w / BLOCK);
    let n = (BLOCK * BLOCK) as f64;
    let mut means = Vec::with_capacity(c * bh * bw);
    let mut stds = Vec::with_capacity(c * bh * bw);
    let d = image.data();
    for ch in 0..c {
        for by in 0..bh {
            for bx in 0..bw {
                let px = (0..BLOCK * BLOCK).map(|k| {
                    let (y, x) = (by * BLOCK + k / BLOCK, bx * BLOCK + k % BLOCK);
                    d[ch * h * w + y * w + x] as f64
                });
                let mean = px.clone().sum::<f64>() / n;
                let var = px.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                means.push(mean);
                stds.push(var.sqrt());
            }
        }
    }
    means.extend(stds);
    Ok(means)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianStats {
    pub dim: usize,
    pub mean: Vec<f64>,
    /// Row-major `dim x dim`, unbiased (`n - 1`) estimate; zero for a
    /// single sample.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn from_vectors(rows: &[Vec<f64>]) -> Result<Self> {
        let first = rows.first().ok_or_else(|| Error::Config("no feature vectors".into()))?;
        let d = first.len();
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::DimensionMismatch("feature vectors differ in length".into()));
        }
        let n = rows.len();
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut cov = vec![0.0; d * d];
        if n > 1 {
            let centred: Vec<Vec<f64>> = rows
                .iter()
                .map(|r| r.iter().zip(&mean).map(|(v, m)| v - m).collect())
                .collect();
            for i in 0..d {
                for j in i..d {
                    let s: f64 = centred.iter().map(|r| r[i] * r[j]).sum::<f64>() / (n - 1) as f64;
                    cov[i * d + j] = s;
                    cov[j * d + i] = s;
                }
            }
        }
        Ok(Self { dim: d, mean, cov })
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, &self.cov)
    }
}

/// Gaussian fit to the block descriptors of `images`.
pub fn fit_stats(images: &[Tensor<f32>]) -> Result<GaussianStats> {
    let rows = images.iter().map(features).collect::<Result<Vec<_>>>()?;
    GaussianStats::from_vectors(&rows)
}

fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`. The trace of the
/// cross term is taken as the sum of square roots of the eigenvalues of
/// the symmetric `S_a^(1/2) S_b S_a^(1/2)`, which has the same spectrum as
/// `S_a S_b`.
pub fn frechet_distance(a: &GaussianStats, b: &GaussianStats) -> Result<f64> {
    if a.dim != b.dim {
        return Err(Error::DimensionMismatch(format!("stats of dimension {} vs {}", a.dim, b.dim)));
    }
    let dmu: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y) * (x - y)).sum();
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let ra = psd_sqrt(&sa);
    let m = &ra * &sb * &ra;
    let m = (&m + m.transpose()) * 0.5;
    let cross: f64 = SymmetricEigen::new(m).eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((dmu + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// Mean absolute difference over adjacent pixel pairs that straddle a patch
/// boundary, minus the same mean over pairs inside a patch. Zero when the
/// grid has a single patch.
pub fn seam_score(image: &Tensor<f32>, grid: &PatchGrid) -> Result<f64> {
    let s = image.shape();
    if s.len() != 3 || s[1] != grid.height() || s[2] != grid.width() {
        return Err(Error::DimensionMismatch(format!(
            "image {s:?} does not match a {}x{} grid",
            grid.height(),
            grid.width()
        )));
    }
    if grid.divisions() == 1 {
        return Ok(0.0);
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    let d = image.data();
    let (mut seam, mut n_seam, mut inner, mut n_inner) = (0.0, 0usize, 0.0, 0usize);
    let mut visit = |diff: f64, across: bool| {
        if across {
            seam += diff;
            n_seam += 1;
        } else {
            inner += diff;
            n_inner += 1;
        }
    };
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x] as f64;
                if x + 1 < w {
                    visit((plane[y * w + x + 1] as f64 - v).abs(), (x + 1) % pw == 0);
                }
                if y + 1 < h {
                    visit((plane[(y + 1) * w + x] as f64 - v).abs(), (y + 1) % ph == 0);
                }
            }
        }
    }
    let mean = |s: f64, n: usize| if n == 0 { 0.0 } else { s / n as f64 };
    Ok(mean(seam, n_seam) - mean(inner, n_inner))
}

/// Sizes of the 4-connected components of pixels above `threshold` in the
/// channel mean of a `C x H x W` image, largest first.
pub fn bright_components(image: &Tensor<f32>, threshold: f32) -> Result<Vec<usize>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected C x H x W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let d = image.data();
    let on: Vec<bool> = (0..h * w)
        .map(|k| (0..c).map(|ch| d[ch * h * w + k]).sum::<f32>() / c as f32 > threshold)
        .collect();
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if !on[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        let mut stack = vec![start];
        let mut size = 0;
        while let Some(k) = stack.pop() {
            size += 1;
            let (y, x) = (k / w, k % w);
            let mut push = |nk: usize| {
                if on[nk] && !seen[nk] {
                    seen[nk] = true;
                    stack.push(nk);
                }
            };
            if x > 0 {
                push(k - 1);
            }
            if x + 1 < w {
                push(k + 1);
            }
            if y > 0 {
                push(k - w);
            }
            if y + 1 < h {
                push(k + w);
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(sizes)
}

/// Blob detector: exactly one bright component of at least `min_area`
/// pixels, and no other bright pixels at all.
pub fn has_single_blob(image: &Tensor<f32>, threshold: f32, min_area: usize) -> Result<bool> {
    let sizes = bright_components(image, threshold)?;
    Ok(sizes.len() == 1 && sizes[0] >= min_area)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub model: String,
    pub divisions: usize,
    pub proxy_fd: f64,
    pub mean_seam_score: f64,
    pub n_samples: usize,
}

pub const REPORT_HEADER: &str = "model,N,proxy_fd,mean_seam_score,n_samples";

/// Proxy-FD of `samples` against `reference` plus their mean seam score
/// under the `divisions` grid.
pub fn evaluate(model: &str, divisions: usize, samples: &[Tensor<f32>], reference: &[Tensor<f32>]) -> Result<EvalRow> {
    let first = samples.first().ok_or_else(|| Error::Config("no samples to evaluate".into()))?;
    let grid = PatchGrid::new(divisions, first.shape()[1], first.shape()[2])?;
    let fd = frechet_distance(&fit_stats(samples)?, &fit_stats(reference)?)?;
    let seams = samples.iter().map(|s| seam_score(s, &grid)).collect::<Result<Vec<_>>>()?;
    Ok(EvalRow {
        model: model.to_string(),
        divisions,
        proxy_fd: fd,
        mean_seam_score: seams.iter().sum::<f64>() / seams.len() as f64,
        n_samples: samples.len(),
    })
}

pub fn report_csv(rows: &[EvalRow]) -> String {
    let mut out = format!("{REPORT_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{},{}", r.model, r.divisions, r.proxy_fd, r.mean_seam_score, r.n_samples);
    }
    out
}

pub fn parse_report_csv(text: &str) -> Result<Vec<EvalRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_HEADER) {
        return Err(Error::Format("eval report header mismatch".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Format(format!("bad eval row {l:?}"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(EvalRow {
                model: f[0].to_string(),
                divisions: f[1].parse().map_err(|_| bad())?,
                proxy_fd: f[2].parse().map_err(|_| bad())?,
                mean_seam_score: f[3].parse().map_err(|_| bad())?,
                n_samples: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}
