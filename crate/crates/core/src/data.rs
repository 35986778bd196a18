//! Synthetic datasets, Netpbm image files, and the train/val/test split.
//!
//! Images are `C x H x W` tensors with values in `[-1, 1]`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const DEFAULT_SPLIT: [f64; 3] = [0.64, 0.16, 0.20];
pub const BLOB_SIGMA: f64 = 4.0;
pub const MANIFEST: &str = "manifest.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub seed: u64,
    pub images: Vec<Tensor<f32>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    fn subset(&self, suffix: &str, idx: &[usize]) -> Dataset {
        Dataset {
            name: format!("{}-{suffix}", self.name),
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            seed: self.seed,
            images: Vec::new(),
        }
    }
}

fn check_shape(shape: [usize; 3]) -> Result<()> {
    if shape.contains(&0) {
        return Err(Error::Config(format!("image shape {shape:?} has a zero dimension")));
    }
    Ok(())
}

/// A single blob image: `-1 + 2 exp(-r^2 / 2 sigma^2)` around `(cy, cx)`,
/// identical in every channel. The peak pixel is exactly 1.
pub fn blob_image(shape: [usize; 3], cy: usize, cx: usize, sigma: f64) -> Tensor<f32> {
    let [c, h, w] = shape;
    let plane: Vec<f32> = (0..h * w)
        .map(|k| {
            let (dy, dx) = ((k / w) as f64 - cy as f64, (k % w) as f64 - cx as f64);
            (-1.0 + 2.0 * (-(dy * dy + dx * dx) / (2.0 * sigma * sigma)).exp()) as f32
        })
        .collect();
    let data = plane.iter().copied().cycle().take(c * h * w).collect();
    Tensor::from_vec(&[c, h, w], data).expect("shape matches data")
}

/// One bright Gaussian blob per image on a dark background, centred on a
/// uniformly drawn pixel.
pub fn gen_blobs(count: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    check_shape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|_| {
            let cy = rng.gen_range(0..shape[1]);
            let cx = rng.gen_range(0..shape[2]);
            blob_image(shape, cy, cx, BLOB_SIGMA)
        })
        .collect();
    Ok(Dataset {
        name: "blobs".into(),
        channels: shape[0],
        height: shape[1],
        width: shape[2],
        seed,
        images,
    })
}

/// Linear ramp `offset_c + cos(theta) u + sin(theta) v`, clamped to
/// `[-1, 1]`, where `u` and `v` are pixel-centre coordinates rescaled to
/// `[-1, 1]` along the width and height.
pub fn ramp_image(shape: [usize; 3], theta: f64, offsets: &[f64]) -> Result<Tensor<f32>> {
    let [c, h, w] = shape;
    if offsets.len() != c {
        return Err(Error::Config(format!("{} offsets for {c} channels", offsets.len())));
    }
    let (ct, st) = (theta.cos(), theta.sin());
    Ok(Tensor::from_fn(&[c, h, w], |k| {
        let ch = k / (h * w);
        let (y, x) = ((k / w) % h, k % w);
        let u = (2 * x + 1) as f64 / w as f64 - 1.0;
        let v = (2 * y + 1) as f64 / h as f64 - 1.0;
        (offsets[ch] + ct * u + st * v).clamp(-1.0, 1.0) as f32
    }))
}

/// Ramps with uniform orientation and per-channel offsets in `[-0.5, 0.5]`.
pub fn gen_gradients(count: usize, shape: [usize; 3], seed: u64) -> Result<Dataset> {
    check_shape(shape)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = (0..count)
        .map(|_| {
            let theta = rng.gen_range(0.0..std::f64::consts::TAU);
            let offsets: Vec<f64> = (0..shape[0]).map(|_| rng.gen_range(-0.5..=0.5)).collect();
            ramp_image(shape, theta, &offsets)
        })
        .collect::<Result<_>>()?;
    Ok(Dataset {
        name: "gradients".into(),
        channels: shape[0],
        height: shape[1],
        width: shape[2],
        seed,
        images,
    })
}

pub fn to_normalized(p: u8) -> f32 {
    p as f32 / 127.5 - 1.0
}

/// Clamps to `[-1, 1]` and maps affinely onto `0..=255`.
pub fn to_pixel(v: f32) -> u8 {
    let v = if v.is_nan() { -1.0 } else { v.clamp(-1.0, 1.0) };
    ((v + 1.0) * 127.5).round() as u8
}

/// Index lists for the three parts. A seeded permutation is cut into
/// pieces of `round(n f_train)`, `round(n f_val)` and the remainder.
pub fn split_indices(n: usize, fractions: [f64; 3], seed: u64) -> Result<[Vec<usize>; 3]> {
    let total: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split fractions {fractions:?} must be in [0, 1] and sum to 1")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64 * fractions[0]).round() as usize).min(n);
    let n_val = ((n as f64 * fractions[1]).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok([order, val, test])
}

pub fn split(dataset: &Dataset, fractions: [f64; 3], seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    let [a, b, c] = split_indices(dataset.len(), fractions, seed)?;
    Ok((dataset.subset("train", &a), dataset.subset("val", &b), dataset.subset("test", &c)))
}

/// Decoded Netpbm raster: interleaved samples, `channels` per pixel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub pixels: Vec<u8>,
}

impl Raster {
    pub fn to_tensor(&self) -> Tensor<f32> {
        let (c, hw) = (self.channels, self.height * self.width);
        Tensor::from_fn(&[c, self.height, self.width], |k| to_normalized(self.pixels[(k % hw) * c + k / hw]))
    }

    /// Expects a 1- or 3-channel `C x H x W` tensor.
    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || !(s[0] == 1 || s[0] == 3) {
            return Err(Error::ShapeMismatch(format!("cannot encode {s:?} as PGM/PPM")));
        }
        let (c, hw) = (s[0], s[1] * s[2]);
        let mut pixels = vec![0u8; c * hw];
        for (k, &v) in t.data().iter().enumerate() {
            pixels[(k % hw) * c + k / hw] = to_pixel(v);
        }
        Ok(Self {
            channels: c,
            height: s[1],
            width: s[2],
            pixels,
        })
    }
}

/// Binary P5 (grayscale) or P6 (RGB) with maxval 255.
pub fn encode_pnm(r: &Raster) -> Result<Vec<u8>> {
    let magic = match r.channels {
        1 => "P5",
        3 => "P6",
        c => return Err(Error::Format(format!("{c} channels cannot be written as PGM/PPM"))),
    };
    let mut out = format!("{magic}\n{} {}\n255\n", r.width, r.height).into_bytes();
    out.extend_from_slice(&r.pixels);
    Ok(out)
}

pub fn decode_pnm(bytes: &[u8]) -> Result<Raster> {
    let bad = |m: &str| Error::Format(format!("not a binary PGM/PPM: {m}"));
    let mut pos = 0;
    let mut fields = Vec::new();
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() && bytes[pos] != b'#' {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?);
    }
    let channels = match fields[0] {
        "P5" => 1,
        "P6" => 3,
        m => return Err(bad(&format!("magic {m:?}"))),
    };
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("field {s:?}")));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval != 255 {
        return Err(bad(&format!("maxval {maxval}, only 255 is supported")));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing separator after maxval"));
    }
    let data = &bytes[pos + 1..];
    let need = channels * width * height;
    if data.len() < need {
        return Err(bad(&format!("expected {need} samples, found {}", data.len())));
    }
    Ok(Raster {
        channels,
        height,
        width,
        pixels: data[..need].to_vec(),
    })
}

pub fn write_image(path: &Path, image: &Tensor<f32>) -> Result<()> {
    fs::write(path, encode_pnm(&Raster::from_tensor(image)?)?)?;
    Ok(())
}

pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    decode_pnm(&bytes)
        .map(|r| r.to_tensor())
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

/// File extension matching the channel count.
pub fn image_extension(channels: usize) -> &'static str {
    if channels == 1 {
        "pgm"
    } else {
        "ppm"
    }
}

/// Largest centred square.
pub fn center_crop(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(Error::ShapeMismatch(format!("expected C x H x W, got {s:?}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    Ok(Tensor::from_fn(&[c, side, side], |k| {
        let (ch, y, x) = (k / (side * side), (k / side) % side, k % side);
        image.data()[ch * h * w + (y0 + y) * w + x0 + x]
    }))
}

/// Weights of each source cell inside each destination cell when `src`
/// unit cells are squeezed into `dst` equal bins.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let (lo, hi) = (d as f64 * scale, (d + 1) as f64 * scale);
            let mut ws = Vec::new();
            let mut k = lo.floor() as usize;
            while (k as f64) < hi && k < src {
                let overlap = (hi.min(k as f64 + 1.0) - lo.max(k as f64)).max(0.0);
                if overlap > 0.0 {
                    ws.push((k, overlap / scale));
                }
                k += 1;
            }
            ws
        })
        .collect()
}

/// Area-averaging resize. Each output pixel is the mean of the input
/// area it covers, with fractional coverage at the edges.
pub fn resize_area(image: &Tensor<f32>, height: usize, width: usize) -> Result<Tensor<f32>> {
    let s = image.shape();
    if s.len() != 3 || height == 0 || width == 0 {
        return Err(Error::ShapeMismatch(format!("cannot resize {s:?} to {height}x{width}")));
    }
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (height, width) {
        return Ok(image.clone());
    }
    let (wy, wx) = (area_weights(h, height), area_weights(w, width));
    let src = image.data();
    Ok(Tensor::from_fn(&[c, height, width], |k| {
        let (ch, y, x) = (k / (height * width), (k / width) % height, k % width);
        let mut acc = 0.0;
        for &(sy, ay) in &wy[y] {
            for &(sx, ax) in &wx[x] {
                acc += ay * ax * src[ch * h * w + sy * w + sx] as f64;
            }
        }
        acc as f32
    }))
}

/// Reads one PGM/PPM, centre-crops to its short side and area-resizes.
pub fn load_image(path: &Path, target: (usize, usize)) -> Result<Tensor<f32>> {
    resize_area(&center_crop(&read_image(path)?)?, target.0, target.1)
}

fn is_pnm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("pgm" | "ppm" | "pnm")
    )
}

/// Every `.pgm`/`.ppm`/`.pnm` file in `dir`, in file-name order, cropped
/// and resized to `target`. All files must have the same channel count.
pub fn load_image_dir(dir: &Path, target: (usize, usize)) -> Result<Dataset> {
    let images = read_images(dir)?
        .iter()
        .map(|img| resize_area(&center_crop(img)?, target.0, target.1))
        .collect::<Result<Vec<_>>>()?;
    let channels = images.first().map_or(1, |i| i.shape()[0]);
    if images.iter().any(|i| i.shape()[0] != channels) {
        return Err(Error::Format(format!("{} mixes grayscale and colour images", dir.display())));
    }
    Ok(Dataset {
        name: dir.file_name().and_then(|n| n.to_str()).unwrap_or("images").to_string(),
        channels,
        height: target.0,
        width: target.1,
        seed: 0,
        images,
    })
}

/// Every `.pgm`/`.ppm`/`.pnm` file in `dir` at its stored size, in
/// file-name order.
pub fn read_images(dir: &Path) -> Result<Vec<Tensor<f32>>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_pnm(p))
        .collect();
    paths.sort();
    paths.iter().map(|p| read_image(p)).collect()
}

/// Writes `img_00000.pgm`, ... plus a manifest whose header records the
/// shape and seed and whose remaining lines are the relative paths.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    fs::create_dir_all(dir)?;
    let ext = image_extension(ds.channels);
    let mut manifest = format!(
        "# name={} channels={} height={} width={} seed={} count={}\n",
        ds.name,
        ds.channels,
        ds.height,
        ds.width,
        ds.seed,
        ds.len()
    );
    for (k, img) in ds.images.iter().enumerate() {
        let file = format!("img_{k:05}.{ext}");
        write_image(&dir.join(&file), img)?;
        manifest.push_str(&file);
        manifest.push('\n');
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(())
}

/// Reads a directory written by [`write_dataset`]. Pixel values come back
/// quantized to 8 bits.
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(dir.join(MANIFEST))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .and_then(|l| l.strip_prefix('#'))
        .ok_or_else(|| Error::Format(format!("{MANIFEST} has no header")))?;
    let field = |key: &str| -> Result<&str> {
        header
            .split_whitespace()
            .find_map(|kv| kv.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .ok_or_else(|| Error::Format(format!("{MANIFEST} header lacks {key}")))
    };
    let num = |key: &str| -> Result<u64> {
        field(key)?
            .parse()
            .map_err(|_| Error::Format(format!("{MANIFEST}: bad {key}")))
    };
    let ds_shape = [num("channels")? as usize, num("height")? as usize, num("width")? as usize];
    let images = lines
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| {
            let img = read_image(&dir.join(l))?;
            img.expect_shape(&ds_shape)?;
            Ok(img)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        name: field("name")?.to_string(),
        channels: ds_shape[0],
        height: ds_shape[1],
        width: ds_shape[2],
        seed: num("seed")?,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_peak_and_range() {
        let img = blob_image([1, 32, 32], 5, 30, BLOB_SIGMA);
        let d = img.data();
        assert!(d.iter().all(|&v| (-1.0..=1.0).contains(&v)));
        assert_eq!(d[5 * 32 + 30], 1.0);
        assert!(d[31 * 32] < -0.999);
    }

    #[test]
    fn normalization_round_trip_is_exact() {
        for p in 0..=255u8 {
            assert_eq!(to_pixel(to_normalized(p)), p);
        }
        assert_eq!(to_pixel(3.0), 255);
        assert_eq!(to_pixel(f32::NAN), 0);
    }

    #[test]
    fn split_counts() {
        let [a, b, c] = split_indices(100, DEFAULT_SPLIT, 1).unwrap();
        assert_eq!((a.len(), b.len(), c.len()), (64, 16, 20));
        let mut all: Vec<usize> = a.into_iter().chain(b).chain(c).collect();
        all.sort();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_indices(10, [0.5, 0.5, 0.5], 1).is_err());
    }

    #[test]
    fn pnm_header_with_comment() {
        let bytes = b"P5 # a comment\n2 1\n255\n\x00\xff";
        let r = decode_pnm(bytes).unwrap();
        assert_eq!((r.width, r.height, r.channels), (2, 1, 1));
        assert_eq!(r.pixels, vec![0, 255]);
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n2 2\n255\n\x00").is_err());
        assert!(decode_pnm(b"P5\n1 1\n65535\n\x00\x00").is_err());
    }

    #[test]
    fn area_weights_sum_to_one() {
        for (s, d) in [(10, 3), (7, 7), (100, 32), (5, 2)] {
            for ws in area_weights(s, d) {
                let t: f64 = ws.iter().map(|w| w.1).sum();
                assert!((t - 1.0).abs() < 1e-12);
            }
        }
    }
}
