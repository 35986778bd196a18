//! Patch grid geometry, flat-index / one-hot position codes, and global
//! content pooling.
//!
//! Image tensors may carry any number of leading axes (`C x H x W` or
//! `B x C x H x W`); only the last two are spatial.

use crate::error::{shape_err, Error, Result};
use crate::numerics::ops::avg_pool_planes;
use crate::numerics::{Scalar, Tensor};

/// Non-overlapping `N x N` partition of an `H x W` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGrid {
    divisions: usize,
    height: usize,
    width: usize,
}

impl PatchGrid {
    pub fn new(divisions: usize, height: usize, width: usize) -> Result<Self> {
        if divisions == 0 || height % divisions != 0 || width % divisions != 0 || height == 0 || width == 0 {
            return Err(Error::DimensionMismatch(format!(
                "{divisions} divisions do not evenly split a {height}x{width} image"
            )));
        }
        Ok(Self {
            divisions,
            height,
            width,
        })
    }

    pub fn divisions(&self) -> usize {
        self.divisions
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn patch_height(&self) -> usize {
        self.height / self.divisions
    }

    pub fn patch_width(&self) -> usize {
        self.width / self.divisions
    }

    /// `N^2`.
    pub fn patch_count(&self) -> usize {
        self.divisions * self.divisions
    }

    pub fn index(&self, s: usize) -> Result<PatchIndex> {
        PatchIndex::from_flat(s, self.divisions)
    }

    pub fn indices(&self) -> impl Iterator<Item = PatchIndex> + '_ {
        (0..self.patch_count()).map(|s| PatchIndex {
            i: s / self.divisions,
            j: s % self.divisions,
            s,
        })
    }

    fn check_image<T: Scalar>(&self, image: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (planes, h, w) = image.planes()?;
        if h != self.height || w != self.width {
            return Err(Error::DimensionMismatch(format!(
                "image is {h}x{w}, grid expects {}x{}",
                self.height, self.width
            )));
        }
        Ok((planes, h, w))
    }

    fn patch_shape<T: Scalar>(&self, image: &Tensor<T>) -> Vec<usize> {
        let mut shape = image.shape().to_vec();
        let r = shape.len();
        shape[r - 2] = self.patch_height();
        shape[r - 1] = self.patch_width();
        shape
    }
}

/// Grid coordinates of a patch together with its flat index `s = i N + j`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PatchIndex {
    pub i: usize,
    pub j: usize,
    pub s: usize,
}

impl PatchIndex {
    pub fn new(i: usize, j: usize, divisions: usize) -> Result<Self> {
        Ok(Self {
            i,
            j,
            s: flat_index(i, j, divisions)?,
        })
    }

    pub fn from_flat(s: usize, divisions: usize) -> Result<Self> {
        let bound = divisions * divisions;
        if s >= bound {
            return Err(Error::IndexOutOfRange { index: s, bound });
        }
        Ok(Self {
            i: s / divisions,
            j: s % divisions,
            s,
        })
    }
}

pub fn flat_index(i: usize, j: usize, divisions: usize) -> Result<usize> {
    for v in [i, j] {
        if v >= divisions {
            return Err(Error::IndexOutOfRange {
                index: v,
                bound: divisions,
            });
        }
    }
    Ok(i * divisions + j)
}

/// Length-`N^2` vector with a single one at position `s`.
pub fn one_hot<T: Scalar>(s: usize, divisions: usize) -> Result<Vec<T>> {
    let n = divisions * divisions;
    if s >= n {
        return Err(Error::IndexOutOfRange { index: s, bound: n });
    }
    let mut v = vec![T::zero(); n];
    v[s] = T::one();
    Ok(v)
}

/// Copies patch `s` out of every plane of `image`.
pub fn crop<T: Scalar>(image: &Tensor<T>, grid: &PatchGrid, s: usize) -> Result<Tensor<T>> {
    let (planes, _, w) = grid.check_image(image)?;
    let idx = grid.index(s)?;
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    let mut data = Vec::with_capacity(planes * ph * pw);
    let plane_len = grid.height * w;
    for p in 0..planes {
        let plane = &image.data()[p * plane_len..(p + 1) * plane_len];
        for y in idx.i * ph..(idx.i + 1) * ph {
            data.extend_from_slice(&plane[y * w + idx.j * pw..][..pw]);
        }
    }
    Tensor::from_vec(&grid.patch_shape(image), data)
}

/// Crops a different patch from each batch item: `image` is
/// `B x C x H x W`, `indices[b]` selects the patch for item `b`.
pub fn crop_each<T: Scalar>(image: &Tensor<T>, grid: &PatchGrid, indices: &[usize]) -> Result<Tensor<T>> {
    grid.check_image(image)?;
    let shape = image.shape();
    if shape.len() != 4 || shape[0] != indices.len() {
        return Err(shape_err(format!(
            "crop_each needs B x C x H x W with B = {}, got {shape:?}",
            indices.len()
        )));
    }
    let item = image.numel() / shape[0].max(1);
    let mut data = Vec::with_capacity(indices.len() * shape[1] * grid.patch_height() * grid.patch_width());
    for (b, &s) in indices.iter().enumerate() {
        let one = Tensor::from_vec(&shape[1..], image.data()[b * item..(b + 1) * item].to_vec())?;
        data.extend_from_slice(crop(&one, grid, s)?.data());
    }
    Tensor::from_vec(&grid.patch_shape(image), data)
}

/// Writes `patch` into position `s` of `image`.
pub fn paste<T: Scalar>(image: &mut Tensor<T>, grid: &PatchGrid, s: usize, patch: &Tensor<T>) -> Result<()> {
    let (planes, _, w) = grid.check_image(image)?;
    patch.expect_shape(&grid.patch_shape(image))?;
    let idx = grid.index(s)?;
    let (ph, pw) = (grid.patch_height(), grid.patch_width());
    let plane_len = grid.height * w;
    let data = image.data_mut();
    for p in 0..planes {
        for (r, y) in (idx.i * ph..(idx.i + 1) * ph).enumerate() {
            let src = &patch.data()[(p * ph + r) * pw..][..pw];
            data[p * plane_len + y * w + idx.j * pw..][..pw].copy_from_slice(src);
        }
    }
    Ok(())
}

/// Splits an image into its `N^2` patches in row-major order of `s`.
pub fn partition<T: Scalar>(image: &Tensor<T>, grid: &PatchGrid) -> Result<Vec<(PatchIndex, Tensor<T>)>> {
    grid.check_image(image)?;
    grid.indices()
        .map(|idx| Ok((idx, crop(image, grid, idx.s)?)))
        .collect()
}

/// Inverse of [`partition`]. Patches may arrive in any order.
pub fn reassemble<T: Scalar>(patches: &[(PatchIndex, Tensor<T>)], grid: &PatchGrid) -> Result<Tensor<T>> {
    let mut slots: Vec<Option<&Tensor<T>>> = vec![None; grid.patch_count()];
    for (idx, patch) in patches {
        if idx.s >= slots.len() {
            return Err(Error::IndexOutOfRange {
                index: idx.s,
                bound: slots.len(),
            });
        }
        if slots[idx.s].is_some() {
            return Err(Error::DuplicatePatch(idx.s));
        }
        slots[idx.s] = Some(patch);
    }
    if let Some(missing) = slots.iter().position(Option::is_none) {
        return Err(Error::MissingPatch(missing));
    }
    let first = slots[0].expect("checked above");
    let pshape = first.shape();
    let r = pshape.len();
    if r < 2 || pshape[r - 2] != grid.patch_height() || pshape[r - 1] != grid.patch_width() {
        return Err(shape_err(format!(
            "patch shape {pshape:?} does not match grid patch {}x{}",
            grid.patch_height(),
            grid.patch_width()
        )));
    }
    let mut shape = pshape.to_vec();
    shape[r - 2] = grid.height;
    shape[r - 1] = grid.width;
    let mut image = Tensor::zeros(&shape);
    for (s, patch) in slots.iter().enumerate() {
        let patch = patch.expect("checked above");
        if patch.shape() != pshape {
            return Err(shape_err(format!("non-uniform patch shapes {:?} vs {pshape:?}", patch.shape())));
        }
        paste(&mut image, grid, s, patch)?;
    }
    Ok(image)
}

/// Whole-image summary at patch resolution, one channel per image channel.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalContent<T: Scalar> {
    pub g: Tensor<T>,
}

/// Block means over non-overlapping `N x N` windows: maps `H x W` to
/// `H/N x W/N`. Parameter-free.
pub fn global_content<T: Scalar>(image: &Tensor<T>, grid: &PatchGrid) -> Result<GlobalContent<T>> {
    grid.check_image(image)?;
    Ok(GlobalContent {
        g: avg_pool_planes(image, grid.divisions)?,
    })
}

/// Stacks `patch` and `g` along the channel axis (third from last):
/// channels `[0, C)` are the patch, `[C, 2C)` the global content.
pub fn assemble_condition<T: Scalar>(patch: &Tensor<T>, g: &GlobalContent<T>) -> Result<Tensor<T>> {
    let (ps, gs) = (patch.shape(), g.g.shape());
    let r = ps.len();
    if r < 3 || gs.len() != r || ps[..r - 3] != gs[..r - 3] || ps[r - 2..] != gs[r - 2..] {
        return Err(shape_err(format!("cannot stack patch {ps:?} with global content {gs:?}")));
    }
    let outer: usize = ps[..r - 3].iter().product();
    let (pc, gc) = (patch.numel() / outer.max(1), g.g.numel() / outer.max(1));
    let mut data = Vec::with_capacity(patch.numel() + g.g.numel());
    for o in 0..outer {
        data.extend_from_slice(&patch.data()[o * pc..(o + 1) * pc]);
        data.extend_from_slice(&g.g.data()[o * gc..(o + 1) * gc]);
    }
    let mut shape = ps.to_vec();
    shape[r - 3] += gs[r - 3];
    Tensor::from_vec(&shape, data)
}
