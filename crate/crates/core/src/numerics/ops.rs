//! Differentiable layer primitives.
//!
//! Image tensors are `B x C x H x W`. Reductions accumulate in `f64`.

use super::autograd::{BackwardOp, Var};
use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{shape_err, Result};

fn dims4(t: &Tensor<impl Scalar>, what: &str) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [b, c, h, w] => Ok((b, c, h, w)),
        ref s => Err(shape_err(format!("{what}: expected B x C x H x W, got {s:?}"))),
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

// ---------------------------------------------------------------------------
// elementwise

struct AddOp;

impl<T: Scalar> BackwardOp<T> for AddOp {
    fn name(&self) -> &'static str {
        "add"
    }
    fn backward(&self, _: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(g.clone()), Some(g.clone())]
    }
}

pub fn add<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(&b.value(), |x, y| x + y)?;
    Ok(Var::from_op(out, AddOp, vec![a.clone(), b.clone()]))
}

struct MulOp;

impl<T: Scalar> BackwardOp<T> for MulOp {
    fn name(&self) -> &'static str {
        "mul"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let a = inputs[0].value();
        let b = inputs[1].value();
        vec![
            g.zip_map(&b, |g, b| g * b).ok(),
            g.zip_map(&a, |g, a| g * a).ok(),
        ]
    }
}

pub fn mul<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let out = a.value().zip_map(&b.value(), |x, y| x * y)?;
    Ok(Var::from_op(out, MulOp, vec![a.clone(), b.clone()]))
}

struct SumOp;

impl<T: Scalar> BackwardOp<T> for SumOp {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        vec![Some(Tensor::full(&inputs[0].shape(), g.item()))]
    }
}

/// Sum of all elements as a scalar.
pub fn sum<T: Scalar>(a: &Var<T>) -> Var<T> {
    let s = T::of(a.value().sum_f64());
    Var::from_op(Tensor::scalar(s), SumOp, vec![a.clone()])
}

struct SiluOp;

fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Scalar> BackwardOp<T> for SiluOp {
    fn name(&self) -> &'static str {
        "silu"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].value();
        let dx = g.zip_map(&x, |g, x| {
            let s = sigmoid(x);
            g * s * (T::one() + x * (T::one() - s))
        });
        vec![dx.ok()]
    }
}

/// `x * sigmoid(x)`.
pub fn silu<T: Scalar>(x: &Var<T>) -> Var<T> {
    let out = x.value().map(|v| v * sigmoid(v));
    Var::from_op(out, SiluOp, vec![x.clone()])
}

struct MseOp {
    target: Tensor<f64>,
}

impl<T: Scalar> BackwardOp<T> for MseOp {
    fn name(&self) -> &'static str {
        "mse"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let p = inputs[0].value();
        let n = p.numel().max(1) as f64;
        let k = 2.0 * to_f64(g.item()) / n;
        let dx = Tensor::from_fn(p.shape(), |i| {
            T::of(k * (to_f64(p.data()[i]) - self.target.data()[i]))
        });
        vec![Some(dx)]
    }
}

/// Mean squared error against a fixed target.
pub fn mse_loss<T: Scalar>(pred: &Var<T>, target: &Tensor<T>) -> Result<Var<T>> {
    let p = pred.value();
    p.expect_shape(target.shape())?;
    let n = p.numel().max(1) as f64;
    let s: f64 = p
        .data()
        .iter()
        .zip(target.data())
        .map(|(&a, &b)| {
            let d = to_f64(a) - to_f64(b);
            d * d
        })
        .sum();
    let out = Tensor::scalar(T::of(s / n));
    drop(p);
    Ok(Var::from_op(
        out,
        MseOp {
            target: target.cast(),
        },
        vec![pred.clone()],
    ))
}

// ---------------------------------------------------------------------------
// linear

struct LinearOp {
    rows: usize,
    fan_in: usize,
    fan_out: usize,
}

impl<T: Scalar> BackwardOp<T> for LinearOp {
    fn name(&self) -> &'static str {
        "linear"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let (b, n, m) = (self.rows, self.fan_in, self.fan_out);
        let x = inputs[0].value();
        let w = inputs[1].value();
        let mut dx = Tensor::zeros(x.shape());
        // dX (b x n) = dY (b x m) * W (m x n)
        T::gemm(b, m, n, T::one(), g.data(), m as isize, 1, w.data(), n as isize, 1, T::zero(), dx.data_mut(), n as isize, 1);
        let mut dw = Tensor::zeros(w.shape());
        // dW (m x n) = dY^T (m x b) * X (b x n)
        T::gemm(m, b, n, T::one(), g.data(), 1, m as isize, x.data(), n as isize, 1, T::zero(), dw.data_mut(), n as isize, 1);
        let mut db = Tensor::zeros(&[m]);
        for row in g.data().chunks(m) {
            for (d, &v) in db.data_mut().iter_mut().zip(row) {
                *d += v;
            }
        }
        vec![Some(dx), Some(dw), Some(db)]
    }
}

/// Affine map `y = W x + b` applied to `x` of shape `n` or `B x n`, with
/// `W` of shape `m x n`.
pub fn linear<T: Scalar>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let xv = x.value();
    let wv = w.value();
    let bv = b.value();
    let (m, n) = match *wv.shape() {
        [m, n] => (m, n),
        ref s => return Err(shape_err(format!("linear weight must be m x n, got {s:?}"))),
    };
    bv.expect_shape(&[m])?;
    let (rows, out_shape) = match *xv.shape() {
        [k] if k == n => (1, vec![m]),
        [r, k] if k == n => (r, vec![r, m]),
        ref s => return Err(shape_err(format!("linear input {s:?} incompatible with weight {m}x{n}"))),
    };
    let mut y = Tensor::zeros(&out_shape);
    for row in y.data_mut().chunks_mut(m) {
        row.copy_from_slice(bv.data());
    }
    // Y (rows x m) += X (rows x n) * W^T (n x m)
    T::gemm(rows, n, m, T::one(), xv.data(), n as isize, 1, wv.data(), 1, n as isize, T::one(), y.data_mut(), m as isize, 1);
    drop((xv, wv, bv));
    Ok(Var::from_op(
        y,
        LinearOp {
            rows,
            fan_in: n,
            fan_out: m,
        },
        vec![x.clone(), w.clone(), b.clone()],
    ))
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.ho * self.wo
    }
}

/// Output spatial size of a convolution, or an error when the geometry is
/// not integral.
pub fn conv_output_size(size: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    let span = size + 2 * pad;
    if stride == 0 || span < k || (span - k) % stride != 0 {
        return Err(shape_err(format!(
            "conv geometry not integral: size {size}, kernel {k}, stride {stride}, padding {pad}"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` lies
/// inside `0..w`.
fn valid_cols(g: &ConvGeom, kx: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if kx >= p { 0 } else { (p - kx).div_ceil(s) };
    let hi = if g.w + p > kx { ((g.w + p - kx - 1) / s + 1).min(g.wo) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds one image into columns `offset..offset + ho * wo` of a column
/// matrix whose rows are `stride` long.
fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T], stride: usize, offset: usize) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let n = g.col_cols();
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * stride + offset..row * stride + offset + n];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.h {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[(iy - p) * g.w..(iy - p + 1) * g.w];
                    line[..lo].fill(T::zero());
                    line[hi..].fill(T::zero());
                    if s == 1 {
                        line[lo..hi].copy_from_slice(&src[lo + kx - p..hi + kx - p]);
                    } else {
                        for (ox, d) in line[lo..hi].iter_mut().enumerate() {
                            *d = src[(lo + ox) * s + kx - p];
                        }
                    }
                }
            }
        }
    }
}

/// Batch unfolding for narrow planes, where per-line copies cost more than
/// a gather: rows are `(channel, tap)`, columns `(image, pixel)`.
fn unfold_gather<T: Scalar>(x: &[T], g: &ConvGeom, batch: usize) -> Vec<T> {
    const PAD: u32 = u32::MAX;
    let (k, n, plane) = (g.k, g.col_cols(), g.h * g.w);
    let taps: Vec<u32> = (0..k * k)
        .flat_map(|r| {
            (0..n).map(move |q| {
                let iy = (q / g.wo * g.stride + r / k) as isize - g.pad as isize;
                let ix = (q % g.wo * g.stride + r % k) as isize - g.pad as isize;
                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                    PAD
                } else {
                    (iy as usize * g.w + ix as usize) as u32
                }
            })
        })
        .collect();
    let mut cols = Vec::with_capacity(g.col_rows() * batch * n);
    for ci in 0..g.cin {
        for tap in taps.chunks(n) {
            for b in 0..batch {
                let src = &x[(b * g.cin + ci) * plane..(b * g.cin + ci + 1) * plane];
                cols.extend(tap.iter().map(|&i| if i == PAD { T::zero() } else { src[i as usize] }));
            }
        }
    }
    cols
}

fn col2im_add<T: Scalar>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let (k, s, p) = (g.k, g.stride, g.pad);
    let n = g.col_cols();
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * n..(row + 1) * n];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.ho {
                    let iy = oy * s + ky;
                    if iy < p || iy - p >= g.h {
                        continue;
                    }
                    let line = &mut plane[(iy - p) * g.w..(iy - p + 1) * g.w];
                    let from = &src[oy * g.wo + lo..oy * g.wo + hi];
                    if s == 1 {
                        for (d, &v) in line[lo + kx - p..hi + kx - p].iter_mut().zip(from) {
                            *d += v;
                        }
                    } else {
                        for (ox, &v) in from.iter().enumerate() {
                            line[(lo + ox) * s + kx - p] += v;
                        }
                    }
                }
            }
        }
    }
}

struct Conv2dOp {
    geom: ConvGeom,
}

impl<T: Scalar> BackwardOp<T> for Conv2dOp {
    fn name(&self) -> &'static str {
        "conv2d"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let geo = self.geom;
        let x = inputs[0].value();
        let w = inputs[1].value();
        let batch = x.shape()[0];
        let cout = w.shape()[0];
        let (kr, n) = (geo.col_rows(), geo.col_cols());
        let in_plane = geo.cin * geo.h * geo.w;
        let mut dx = Tensor::zeros(x.shape());
        let mut dw = Tensor::zeros(w.shape());
        let mut db = Tensor::zeros(&[cout]);
        let mut cols = Tensor::zeros(&[kr, n]);
        let mut dcols = Tensor::zeros(&[kr, n]);
        for b in 0..batch {
            let xb = &x.data()[b * in_plane..(b + 1) * in_plane];
            let gb = &g.data()[b * cout * n..(b + 1) * cout * n];
            let col_src: &[T] = if geo.is_pointwise() {
                xb
            } else {
                im2col(xb, &geo, cols.data_mut(), n, 0);
                cols.data()
            };
            // dW (cout x kr) += dY_b (cout x n) * cols^T (n x kr)
            T::gemm(cout, n, kr, T::one(), gb, n as isize, 1, col_src, 1, n as isize, T::one(), dw.data_mut(), kr as isize, 1);
            for (co, d) in db.data_mut().iter_mut().enumerate() {
                *d += T::of(super::scalar::sum_f64(&gb[co * n..(co + 1) * n]));
            }
            let dxb = &mut dx.data_mut()[b * in_plane..(b + 1) * in_plane];
            if geo.is_pointwise() {
                // dX_b (kr x n) = W^T (kr x cout) * dY_b
                T::gemm(kr, cout, n, T::one(), w.data(), 1, kr as isize, gb, n as isize, 1, T::zero(), dxb, n as isize, 1);
            } else {
                T::gemm(kr, cout, n, T::one(), w.data(), 1, kr as isize, gb, n as isize, 1, T::zero(), dcols.data_mut(), n as isize, 1);
                col2im_add(dcols.data(), &geo, dxb);
            }
        }
        vec![Some(dx), Some(dw), Some(db)]
    }
}

/// 2-D cross-correlation with bias. `weight` is `C_out x C_in x k x k`
/// with odd `k`.
pub fn conv2d<T: Scalar>(
    x: &Var<T>,
    weight: &Var<T>,
    bias: &Var<T>,
    stride: usize,
    padding: usize,
) -> Result<Var<T>> {
    let xv = x.value();
    let wv = weight.value();
    let bv = bias.value();
    let (batch, cin, h, w) = dims4(&xv, "conv2d input")?;
    let (cout, wcin, k, k2) = dims4(&wv, "conv2d weight")?;
    if wcin != cin || k != k2 || k % 2 == 0 {
        return Err(shape_err(format!(
            "conv2d weight {:?} incompatible with input {:?} (odd square kernel required)",
            wv.shape(),
            xv.shape()
        )));
    }
    bv.expect_shape(&[cout])?;
    let geom = ConvGeom {
        cin,
        h,
        w,
        k,
        stride,
        pad: padding,
        ho: conv_output_size(h, k, stride, padding)?,
        wo: conv_output_size(w, k, stride, padding)?,
    };
    let (kr, n) = (geom.col_rows(), geom.col_cols());
    let in_plane = cin * h * w;
    let total = batch * n;
    // The whole batch is unfolded side by side and multiplied once; bias
    // is added after the product so every batch size rounds alike.
    let mut y = Tensor::zeros(&[batch, cout, geom.ho, geom.wo]);
    let cols = if geom.is_pointwise() && batch == 1 {
        None
    } else if !geom.is_pointwise() && geom.wo < 8 {
        Some(Tensor::from_vec(&[kr, total], unfold_gather(xv.data(), &geom, batch))?)
    } else {
        let mut c = Tensor::zeros(&[kr, total]);
        for b in 0..batch {
            let xb = &xv.data()[b * in_plane..(b + 1) * in_plane];
            if geom.is_pointwise() {
                for ci in 0..cin {
                    c.data_mut()[ci * total + b * n..ci * total + (b + 1) * n].copy_from_slice(&xb[ci * n..(ci + 1) * n]);
                }
            } else {
                im2col(xb, &geom, c.data_mut(), total, b * n);
            }
        }
        Some(c)
    };
    let col_src = cols.as_ref().map_or(xv.data(), |c| c.data());
    let mut staged = (batch > 1).then(|| Tensor::<T>::zeros(&[cout, total]));
    {
        let out = match staged.as_mut() {
            Some(t) => t.data_mut(),
            None => y.data_mut(),
        };
        // Y (cout x B n) = W (cout x kr) * cols (kr x B n)
        T::gemm(cout, kr, total, T::one(), wv.data(), kr as isize, 1, col_src, total as isize, 1, T::zero(), out, total as isize, 1);
    }
    let bvals = bv.data();
    match staged {
        Some(t) => {
            for b in 0..batch {
                for co in 0..cout {
                    let src = &t.data()[co * total + b * n..co * total + (b + 1) * n];
                    let dst = &mut y.data_mut()[(b * cout + co) * n..(b * cout + co + 1) * n];
                    for (d, &v) in dst.iter_mut().zip(src) {
                        *d = v + bvals[co];
                    }
                }
            }
        }
        None => {
            for (co, row) in y.data_mut().chunks_mut(n).enumerate() {
                for v in row {
                    *v += bvals[co];
                }
            }
        }
    }
    drop(cols);
    drop((xv, wv, bv));
    Ok(Var::from_op(
        y,
        Conv2dOp { geom },
        vec![x.clone(), weight.clone(), bias.clone()],
    ))
}

// ---------------------------------------------------------------------------
// normalization

struct GroupNormOp {
    groups: usize,
    eps: f64,
}

fn group_stats<T: Scalar>(xs: &[T], eps: f64) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().map(|&v| to_f64(v)).sum::<f64>() / n;
    let var = xs
        .iter()
        .map(|&v| {
            let d = to_f64(v) - mean;
            d * d
        })
        .sum::<f64>()
        / n;
    (mean, 1.0 / (var + eps).sqrt())
}

impl<T: Scalar> BackwardOp<T> for GroupNormOp {
    fn name(&self) -> &'static str {
        "group_norm"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].value();
        let gamma = inputs[1].value();
        let (batch, c, h, w) = dims4(&x, "group_norm").expect("validated in forward");
        let cg = c / self.groups;
        let hw = h * w;
        let m = (cg * hw) as f64;
        let mut dx = Tensor::zeros(x.shape());
        let mut dgamma = vec![0.0f64; c];
        let mut dbeta = vec![0.0f64; c];
        for b in 0..batch {
            for grp in 0..self.groups {
                let lo = (b * c + grp * cg) * hw;
                let hi = lo + cg * hw;
                let xs = &x.data()[lo..hi];
                let gs = &g.data()[lo..hi];
                let (mean, rstd) = group_stats(xs, self.eps);
                let mut sum_d = 0.0;
                let mut sum_dx = 0.0;
                for (i, (&xv, &gv)) in xs.iter().zip(gs).enumerate() {
                    let ch = grp * cg + i / hw;
                    let xhat = (to_f64(xv) - mean) * rstd;
                    let gv = to_f64(gv);
                    dgamma[ch] += gv * xhat;
                    dbeta[ch] += gv;
                    let d = gv * to_f64(gamma.data()[ch]);
                    sum_d += d;
                    sum_dx += d * xhat;
                }
                let (mean_d, mean_dx) = (sum_d / m, sum_dx / m);
                let out = &mut dx.data_mut()[lo..hi];
                for (i, o) in out.iter_mut().enumerate() {
                    let ch = grp * cg + i / hw;
                    let xhat = (to_f64(xs[i]) - mean) * rstd;
                    let d = to_f64(gs[i]) * to_f64(gamma.data()[ch]);
                    *o = T::of(rstd * (d - mean_d - xhat * mean_dx));
                }
            }
        }
        vec![
            Some(dx),
            Some(Tensor::from_fn(&[c], |i| T::of(dgamma[i]))),
            Some(Tensor::from_fn(&[c], |i| T::of(dbeta[i]))),
        ]
    }
}

/// Group normalization with per-channel affine parameters.
pub fn group_norm<T: Scalar>(
    x: &Var<T>,
    gamma: &Var<T>,
    beta: &Var<T>,
    groups: usize,
    eps: f64,
) -> Result<Var<T>> {
    let xv = x.value();
    let (batch, c, h, w) = dims4(&xv, "group_norm input")?;
    if groups == 0 || c % groups != 0 {
        return Err(shape_err(format!("{c} channels not divisible into {groups} groups")));
    }
    let gv = gamma.value();
    let bv = beta.value();
    gv.expect_shape(&[c])?;
    bv.expect_shape(&[c])?;
    let cg = c / groups;
    let hw = h * w;
    let mut y = Tensor::zeros(xv.shape());
    for b in 0..batch {
        for grp in 0..groups {
            let lo = (b * c + grp * cg) * hw;
            let hi = lo + cg * hw;
            let (mean, rstd) = group_stats(&xv.data()[lo..hi], eps);
            for ci in 0..cg {
                let ch = grp * cg + ci;
                let (ga, be) = (to_f64(gv.data()[ch]), to_f64(bv.data()[ch]));
                let off = lo + ci * hw;
                for (o, &v) in y.data_mut()[off..off + hw]
                    .iter_mut()
                    .zip(&xv.data()[off..off + hw])
                {
                    *o = T::of((to_f64(v) - mean) * rstd * ga + be);
                }
            }
        }
    }
    drop((xv, gv, bv));
    Ok(Var::from_op(
        y,
        GroupNormOp { groups, eps },
        vec![x.clone(), gamma.clone(), beta.clone()],
    ))
}

// ---------------------------------------------------------------------------
// shape plumbing

struct ChannelBiasOp;

impl<T: Scalar> BackwardOp<T> for ChannelBiasOp {
    fn name(&self) -> &'static str {
        "add_channel_bias"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let vshape = inputs[1].shape();
        let planes = vshape[0] * vshape[1];
        let hw = g.numel() / planes.max(1);
        let dv = Tensor::from_fn(&vshape, |i| {
            T::of(super::scalar::sum_f64(&g.data()[i * hw..(i + 1) * hw]))
        });
        vec![Some(g.clone()), Some(dv)]
    }
}

/// Adds `v[b, c]` to every pixel of channel `c` of image `b`.
pub fn add_channel_bias<T: Scalar>(x: &Var<T>, v: &Var<T>) -> Result<Var<T>> {
    let xv = x.value();
    let (batch, c, h, w) = dims4(&xv, "add_channel_bias input")?;
    let vv = v.value();
    vv.expect_shape(&[batch, c])?;
    let hw = h * w;
    let mut y = xv.clone();
    for (plane, &bias) in y.data_mut().chunks_mut(hw).zip(vv.data()) {
        for p in plane {
            *p += bias;
        }
    }
    drop((xv, vv));
    Ok(Var::from_op(y, ChannelBiasOp, vec![x.clone(), v.clone()]))
}

struct ConcatOp {
    outer: usize,
    a_chunk: usize,
    b_chunk: usize,
}

impl<T: Scalar> BackwardOp<T> for ConcatOp {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let mut da = Vec::with_capacity(self.outer * self.a_chunk);
        let mut db = Vec::with_capacity(self.outer * self.b_chunk);
        for row in g.data().chunks(self.a_chunk + self.b_chunk) {
            da.extend_from_slice(&row[..self.a_chunk]);
            db.extend_from_slice(&row[self.a_chunk..]);
        }
        vec![
            Tensor::from_vec(&inputs[0].shape(), da).ok(),
            Tensor::from_vec(&inputs[1].shape(), db).ok(),
        ]
    }
}

/// Concatenates along axis 1 (channels for images, features for `B x n`).
pub fn concat<T: Scalar>(a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let av = a.value();
    let bv = b.value();
    let (sa, sb) = (av.shape(), bv.shape());
    if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
        return Err(shape_err(format!("cannot concatenate {sa:?} and {sb:?} on axis 1")));
    }
    let outer = sa[0];
    let (a_chunk, b_chunk) = (av.numel() / outer.max(1), bv.numel() / outer.max(1));
    let mut shape = sa.to_vec();
    shape[1] += sb[1];
    let mut out = Vec::with_capacity(av.numel() + bv.numel());
    for i in 0..outer {
        out.extend_from_slice(&av.data()[i * a_chunk..(i + 1) * a_chunk]);
        out.extend_from_slice(&bv.data()[i * b_chunk..(i + 1) * b_chunk]);
    }
    let y = Tensor::from_vec(&shape, out)?;
    drop((av, bv));
    Ok(Var::from_op(
        y,
        ConcatOp {
            outer,
            a_chunk,
            b_chunk,
        },
        vec![a.clone(), b.clone()],
    ))
}

struct UpsampleOp;

impl<T: Scalar> BackwardOp<T> for UpsampleOp {
    fn name(&self) -> &'static str {
        "upsample_nearest2x"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        vec![avg_pool_planes(g, 2).ok().map(|t| {
            let t = t.map(|v| v * T::of(4.0));
            t.reshape(&shape).expect("pooled gradient matches input")
        })]
    }
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_nearest2x<T: Scalar>(x: &Var<T>) -> Result<Var<T>> {
    let xv = x.value();
    let (planes, h, w) = xv.planes()?;
    let mut shape = xv.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = 2 * h;
    shape[r - 1] = 2 * w;
    let mut y = Tensor::zeros(&shape);
    let yd = y.data_mut();
    for p in 0..planes {
        let src = &xv.data()[p * h * w..(p + 1) * h * w];
        let dst = &mut yd[p * 4 * h * w..(p + 1) * 4 * h * w];
        for oy in 0..2 * h {
            for ox in 0..2 * w {
                dst[oy * 2 * w + ox] = src[(oy / 2) * w + ox / 2];
            }
        }
    }
    drop(xv);
    Ok(Var::from_op(y, UpsampleOp, vec![x.clone()]))
}

/// Exact block means over non-overlapping `window x window` tiles of the
/// last two axes. Shared by the pooling layer and global content pooling.
pub fn avg_pool_planes<T: Scalar>(x: &Tensor<T>, window: usize) -> Result<Tensor<T>> {
    let (planes, h, w) = x.planes()?;
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(crate::error::Error::DimensionMismatch(format!(
            "pooling window {window} does not divide {h}x{w}"
        )));
    }
    let (ho, wo) = (h / window, w / window);
    let mut shape = x.shape().to_vec();
    let r = shape.len();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    let inv = 1.0 / (window * window) as f64;
    let mut y = Tensor::zeros(&shape);
    let yd = y.data_mut();
    for p in 0..planes {
        let src = &x.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0f64;
                for dy in 0..window {
                    let row = &src[(oy * window + dy) * w + ox * window..][..window];
                    acc += row.iter().map(|&v| to_f64(v)).sum::<f64>();
                }
                yd[(p * ho + oy) * wo + ox] = T::of(acc * inv);
            }
        }
    }
    Ok(y)
}

struct AvgPoolOp {
    window: usize,
}

impl<T: Scalar> BackwardOp<T> for AvgPoolOp {
    fn name(&self) -> &'static str {
        "avg_pool2d"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let shape = inputs[0].shape();
        let r = shape.len();
        let (h, w) = (shape[r - 2], shape[r - 1]);
        let k = self.window;
        let (ho, wo) = (h / k, w / k);
        let inv = T::of(1.0 / (k * k) as f64);
        let dx = Tensor::from_fn(&shape, |i| {
            let plane = i / (h * w);
            let rem = i % (h * w);
            let (y, x) = (rem / w, rem % w);
            g.data()[(plane * ho + y / k) * wo + x / k] * inv
        });
        vec![Some(dx)]
    }
}

/// Average pooling with stride equal to the window.
pub fn avg_pool2d<T: Scalar>(x: &Var<T>, window: usize) -> Result<Var<T>> {
    let y = avg_pool_planes(&x.value(), window)?;
    Ok(Var::from_op(y, AvgPoolOp { window }, vec![x.clone()]))
}

// ---------------------------------------------------------------------------
// attention

/// Projection weights of single-head self-attention; each weight is
/// `C x C`, each bias `C`.
#[derive(Clone, Debug)]
pub struct AttentionWeights<T: Scalar> {
    pub wq: Var<T>,
    pub bq: Var<T>,
    pub wk: Var<T>,
    pub bk: Var<T>,
    pub wv: Var<T>,
    pub bv: Var<T>,
    pub wo: Var<T>,
    pub bo: Var<T>,
}

impl<T: Scalar> AttentionWeights<T> {
    fn as_vec(&self) -> Vec<Var<T>> {
        vec![
            self.wq.clone(),
            self.bq.clone(),
            self.wk.clone(),
            self.bk.clone(),
            self.wv.clone(),
            self.bv.clone(),
            self.wo.clone(),
            self.bo.clone(),
        ]
    }
}

/// `W x + b` for `x` of shape `C x L`, into `out` (`C x L`).
fn project<T: Scalar>(w: &[T], b: &[T], x: &[T], c: usize, l: usize, out: &mut [T]) {
    for (row, &bias) in out.chunks_mut(l).zip(b) {
        row.fill(bias);
    }
    T::gemm(c, c, l, T::one(), w, c as isize, 1, x, l as isize, 1, T::one(), out, l as isize, 1);
}

/// Row-wise softmax of an `L x L` score matrix, in place.
fn softmax_rows<T: Scalar>(s: &mut [T], l: usize) {
    for row in s.chunks_mut(l) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = 0.0f64;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += to_f64(*v);
        }
        let inv = T::of(1.0 / z);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Attention probabilities for one image: `softmax(Q^T K / sqrt(C))`.
fn attention_probs<T: Scalar>(q: &[T], k: &[T], c: usize, l: usize, probs: &mut [T]) {
    let scale = T::of(1.0 / (c as f64).sqrt());
    // S (l x l) = Q^T (l x c) * K (c x l)
    T::gemm(l, c, l, scale, q, 1, l as isize, k, l as isize, 1, T::zero(), probs, l as isize, 1);
    softmax_rows(probs, l);
}

/// The row-normalized attention matrix of one image (`C x L` input), as
/// used inside [`self_attention`].
pub fn attention_matrix<T: Scalar>(x: &Tensor<T>, w: &AttentionWeights<T>) -> Result<Tensor<T>> {
    let (c, l) = match *x.shape() {
        [c, l] => (c, l),
        ref s => return Err(shape_err(format!("expected C x L, got {s:?}"))),
    };
    let mut q = Tensor::zeros(&[c, l]);
    let mut k = Tensor::zeros(&[c, l]);
    project(w.wq.value().data(), w.bq.value().data(), x.data(), c, l, q.data_mut());
    project(w.wk.value().data(), w.bk.value().data(), x.data(), c, l, k.data_mut());
    let mut a = Tensor::zeros(&[l, l]);
    attention_probs(q.data(), k.data(), c, l, a.data_mut());
    Ok(a)
}

struct AttentionOp;

impl<T: Scalar> BackwardOp<T> for AttentionOp {
    fn name(&self) -> &'static str {
        "self_attention"
    }
    fn backward(&self, inputs: &[Var<T>], _: &Tensor<T>, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].value();
        let ws: Vec<_> = inputs[1..].iter().map(|v| v.value()).collect();
        let (wq, bq, wk, bk, wv, bv, wo, _bo) =
            (&ws[0], &ws[1], &ws[2], &ws[3], &ws[4], &ws[5], &ws[6], &ws[7]);
        let shape = x.shape().to_vec();
        let (batch, c) = (shape[0], shape[1]);
        let l = x.numel() / (batch * c);
        let cl = c * l;
        let scale = T::of(1.0 / (c as f64).sqrt());

        let mut dx = Tensor::zeros(&shape);
        let mut dws: Vec<Tensor<T>> = (0..8).map(|i| Tensor::zeros(ws[i].shape())).collect();
        let mut q = Tensor::zeros(&[c, l]);
        let mut k = Tensor::zeros(&[c, l]);
        let mut v = Tensor::zeros(&[c, l]);
        let mut o = Tensor::zeros(&[c, l]);
        let mut a = Tensor::zeros(&[l, l]);
        let mut da = Tensor::zeros(&[l, l]);
        let mut d_o = Tensor::zeros(&[c, l]);
        let mut dq = Tensor::zeros(&[c, l]);
        let mut dk = Tensor::zeros(&[c, l]);
        let mut dv = Tensor::zeros(&[c, l]);
        let ci = c as isize;
        let li = l as isize;
        for b in 0..batch {
            let xb = &x.data()[b * cl..(b + 1) * cl];
            let gb = &g.data()[b * cl..(b + 1) * cl];
            project(wq.data(), bq.data(), xb, c, l, q.data_mut());
            project(wk.data(), bk.data(), xb, c, l, k.data_mut());
            project(wv.data(), bv.data(), xb, c, l, v.data_mut());
            attention_probs(q.data(), k.data(), c, l, a.data_mut());
            // O (c x l) = V (c x l) * A^T (l x l)
            T::gemm(c, l, l, T::one(), v.data(), li, 1, a.data(), 1, li, T::zero(), o.data_mut(), li, 1);

            // output projection
            T::gemm(c, l, c, T::one(), gb, li, 1, o.data(), 1, li, T::one(), dws[6].data_mut(), ci, 1);
            for (co, d) in dws[7].data_mut().iter_mut().enumerate() {
                *d += T::of(super::scalar::sum_f64(&gb[co * l..(co + 1) * l]));
            }
            T::gemm(c, c, l, T::one(), wo.data(), 1, ci, gb, li, 1, T::zero(), d_o.data_mut(), li, 1);

            // dV = dO * A ; dA = dO^T * V
            T::gemm(c, l, l, T::one(), d_o.data(), li, 1, a.data(), li, 1, T::zero(), dv.data_mut(), li, 1);
            T::gemm(l, c, l, T::one(), d_o.data(), 1, li, v.data(), li, 1, T::zero(), da.data_mut(), li, 1);

            // softmax backward, in place into dA
            for (arow, drow) in a.data().chunks(l).zip(da.data_mut().chunks_mut(l)) {
                let dot: f64 = arow.iter().zip(drow.iter()).map(|(&p, &d)| to_f64(p) * to_f64(d)).sum();
                let dot = T::of(dot);
                for (d, &p) in drow.iter_mut().zip(arow) {
                    *d = p * (*d - dot);
                }
            }
            // dQ = scale * K * dS^T ; dK = scale * Q * dS
            T::gemm(c, l, l, scale, k.data(), li, 1, da.data(), 1, li, T::zero(), dq.data_mut(), li, 1);
            T::gemm(c, l, l, scale, q.data(), li, 1, da.data(), li, 1, T::zero(), dk.data_mut(), li, 1);

            let dxb = &mut dx.data_mut()[b * cl..(b + 1) * cl];
            for (slot, (dproj, w)) in [(0usize, (&dq, wq)), (2, (&dk, wk)), (4, (&dv, wv))] {
                // dW += dP * X^T ; db += rowsum dP ; dX += W^T * dP
                T::gemm(c, l, c, T::one(), dproj.data(), li, 1, xb, 1, li, T::one(), dws[slot].data_mut(), ci, 1);
                for (co, d) in dws[slot + 1].data_mut().iter_mut().enumerate() {
                    *d += T::of(super::scalar::sum_f64(&dproj.data()[co * l..(co + 1) * l]));
                }
                T::gemm(c, c, l, T::one(), w.data(), 1, ci, dproj.data(), li, 1, T::one(), dxb, li, 1);
            }
        }
        let mut out = vec![Some(dx)];
        out.extend(dws.into_iter().map(Some));
        out
    }
}

/// Single-head scaled dot-product self-attention over the `L = H * W`
/// positions of each image, with query/key/value/output projections.
/// Returns the projected attention output (no residual).
pub fn self_attention<T: Scalar>(x: &Var<T>, w: &AttentionWeights<T>) -> Result<Var<T>> {
    let xv = x.value();
    let shape = xv.shape().to_vec();
    if shape.len() < 2 {
        return Err(shape_err(format!("attention input must be B x C x ..., got {shape:?}")));
    }
    let (batch, c) = (shape[0], shape[1]);
    let l = xv.numel() / (batch * c).max(1);
    if l == 0 {
        return Err(shape_err("attention over zero positions"));
    }
    for (p, s) in w.as_vec().iter().zip([
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
        vec![c, c],
        vec![c],
    ]) {
        p.value().expect_shape(&s)?;
    }
    let cl = c * l;
    let li = l as isize;
    let mut y = Tensor::zeros(&shape);
    {
        let (wq, bq) = (w.wq.value(), w.bq.value());
        let (wk, bk) = (w.wk.value(), w.bk.value());
        let (wv, bv) = (w.wv.value(), w.bv.value());
        let (wo, bo) = (w.wo.value(), w.bo.value());
        for b in 0..batch {
            let xb = &xv.data()[b * cl..(b + 1) * cl];
            let mut q = Tensor::zeros(&[c, l]);
            let mut k = Tensor::zeros(&[c, l]);
            let mut v = Tensor::zeros(&[c, l]);
            project(wq.data(), bq.data(), xb, c, l, q.data_mut());
            project(wk.data(), bk.data(), xb, c, l, k.data_mut());
            project(wv.data(), bv.data(), xb, c, l, v.data_mut());
            let mut a = Tensor::zeros(&[l, l]);
            attention_probs(q.data(), k.data(), c, l, a.data_mut());
            let mut o = Tensor::zeros(&[c, l]);
            T::gemm(c, l, l, T::one(), v.data(), li, 1, a.data(), 1, li, T::zero(), o.data_mut(), li, 1);
            project(wo.data(), bo.data(), o.data(), c, l, &mut y.data_mut()[b * cl..(b + 1) * cl]);
        }
    }
    drop(xv);
    let mut inputs = vec![x.clone()];
    inputs.extend(w.as_vec());
    Ok(Var::from_op(y, AttentionOp, inputs))
}
