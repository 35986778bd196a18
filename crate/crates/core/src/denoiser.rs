//! Noise-prediction U-Net conditioned on the diffusion step and the patch
//! position.
//!
//! Input is a patch stacked with the pooled global content (`2C` channels);
//! output is the predicted noise for the patch (`C` channels). The step
//! embedding (sinusoid + two-layer MLP) and the position embedding (one
//! fully connected layer on the one-hot patch index) are concatenated into
//! one conditioning vector, which every residual block projects to its
//! channel count and adds to its feature maps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::kv::{join_list, KvDoc};
use crate::numerics::ops::{self, AttentionWeights};
use crate::numerics::{no_grad, Scalar, Tensor, Var};
use crate::patching::one_hot;

pub const NORM_GROUPS: usize = 8;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenoiserConfig {
    /// Channels of the generated image (`C`); the network sees `2C`.
    pub image_channels: usize,
    pub base_channels: usize,
    /// One entry per resolution level; level `l` runs at
    /// `base_channels * channel_mults[l]` channels and half the spatial
    /// size of level `l - 1`.
    pub channel_mults: Vec<usize>,
    /// Self-attention at the lowest resolution.
    pub attention: bool,
    /// Width of the step embedding and of the position embedding.
    pub embed_dim: usize,
    /// Patch divisions per axis; the one-hot position code has `N^2` entries.
    pub divisions: usize,
}

impl DenoiserConfig {
    /// Two levels, 32 base channels, multipliers (1, 2), bottom attention,
    /// 64-wide embeddings.
    pub fn desk(image_channels: usize, divisions: usize) -> Self {
        Self {
            image_channels,
            base_channels: 32,
            channel_mults: vec![1, 2],
            attention: true,
            embed_dim: 64,
            divisions,
        }
    }

    pub fn in_channels(&self) -> usize {
        2 * self.image_channels
    }

    pub fn position_width(&self) -> usize {
        self.divisions * self.divisions
    }

    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels * self.channel_mults[level]
    }

    /// Spatial downsampling factor between the input and the lowest level.
    pub fn reduction(&self) -> usize {
        1 << (self.levels().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.image_channels == 0 || self.base_channels == 0 || self.divisions == 0 {
            return bad("channel counts and divisions must be positive".into());
        }
        if self.channel_mults.is_empty() || self.channel_mults.contains(&0) {
            return bad(format!("invalid channel multipliers {:?}", self.channel_mults));
        }
        if self.embed_dim < 2 || self.embed_dim % 2 != 0 {
            return bad(format!("embedding width {} must be even and >= 2", self.embed_dim));
        }
        Ok(())
    }

    /// Checks that every level has an integral spatial size for patches of
    /// the given shape.
    pub fn validate_patch(&self, height: usize, width: usize) -> Result<()> {
        self.validate()?;
        let r = self.reduction();
        if height == 0 || width == 0 || height % r != 0 || width % r != 0 {
            return Err(Error::Config(format!(
                "{height}x{width} patches cannot be halved {} times",
                self.levels() - 1
            )));
        }
        Ok(())
    }

    pub fn write_kv(&self, doc: &mut KvDoc, section: &str) {
        doc.set(section, "image_channels", self.image_channels);
        doc.set(section, "base_channels", self.base_channels);
        doc.set(section, "channel_mults", join_list(&self.channel_mults));
        doc.set(section, "attention", self.attention);
        doc.set(section, "embed_dim", self.embed_dim);
        doc.set(section, "divisions", self.divisions);
    }

    pub fn read_kv(doc: &KvDoc, section: &str) -> Result<Self> {
        let cfg = Self {
            image_channels: doc.require(section, "image_channels")?,
            base_channels: doc.require(section, "base_channels")?,
            channel_mults: doc
                .get_list(section, "channel_mults")?
                .ok_or_else(|| Error::Config(format!("[{section}] channel_mults is required")))?,
            attention: doc.require(section, "attention")?,
            embed_dim: doc.require(section, "embed_dim")?,
            divisions: doc.require(section, "divisions")?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Group count for `channels`: eight when it divides evenly, otherwise one
/// group per channel.
pub fn norm_groups(channels: usize) -> usize {
    if channels % NORM_GROUPS == 0 {
        NORM_GROUPS
    } else {
        channels
    }
}

/// Sinusoidal step features: `dim / 2` sines then `dim / 2` cosines at
/// geometrically spaced frequencies `10000^(-k / (dim / 2))`.
pub fn step_features(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for k in 0..half {
        let freq = (-(10000f64.ln()) * k as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[k] = arg.sin();
        out[half + k] = arg.cos();
    }
    out
}

struct ParamFactory {
    rng: ChaCha8Rng,
}

impl ParamFactory {
    fn make<T: Scalar>(&mut self, params: &mut Vec<(String, Var<T>)>, name: String, t: Tensor<T>) -> Var<T> {
        let v = Var::parameter(t);
        params.push((name, v.clone()));
        v
    }

    fn uniform<T: Scalar>(&mut self, params: &mut Vec<(String, Var<T>)>, name: String, shape: &[usize], fan_in: usize) -> Var<T> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::uniform(shape, -bound, bound, &mut self.rng);
        self.make(params, name, t)
    }
}

#[derive(Clone)]
struct Dense<T: Scalar> {
    w: Var<T>,
    b: Var<T>,
}

impl<T: Scalar> Dense<T> {
    fn new(f: &mut ParamFactory, p: &mut Vec<(String, Var<T>)>, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: f.uniform(p, format!("{name}.weight"), &[fan_out, fan_in], fan_in),
            b: f.uniform(p, format!("{name}.bias"), &[fan_out], fan_in),
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        ops::linear(x, &self.w, &self.b)
    }
}

#[derive(Clone)]
struct Conv<T: Scalar> {
    w: Var<T>,
    b: Var<T>,
    padding: usize,
}

impl<T: Scalar> Conv<T> {
    fn new(f: &mut ParamFactory, p: &mut Vec<(String, Var<T>)>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let fan_in = cin * k * k;
        Self {
            w: f.uniform(p, format!("{name}.weight"), &[cout, cin, k, k], fan_in),
            b: f.uniform(p, format!("{name}.bias"), &[cout], fan_in),
            padding: k / 2,
        }
    }

    fn zeroed(f: &mut ParamFactory, p: &mut Vec<(String, Var<T>)>, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        Self {
            w: f.make(p, format!("{name}.weight"), Tensor::zeros(&[cout, cin, k, k])),
            b: f.make(p, format!("{name}.bias"), Tensor::zeros(&[cout])),
            padding: k / 2,
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        ops::conv2d(x, &self.w, &self.b, 1, self.padding)
    }
}

#[derive(Clone)]
struct Norm<T: Scalar> {
    gamma: Var<T>,
    beta: Var<T>,
    groups: usize,
}

impl<T: Scalar> Norm<T> {
    fn new(f: &mut ParamFactory, p: &mut Vec<(String, Var<T>)>, name: &str, channels: usize) -> Self {
        Self {
            gamma: f.make(p, format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: f.make(p, format!("{name}.beta"), Tensor::zeros(&[channels])),
            groups: norm_groups(channels),
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        ops::group_norm(x, &self.gamma, &self.beta, self.groups, NORM_EPS)
    }
}

#[derive(Clone)]
struct ResBlock<T: Scalar> {
    norm1: Norm<T>,
    conv1: Conv<T>,
    cond: Dense<T>,
    norm2: Norm<T>,
    conv2: Conv<T>,
    skip: Option<Conv<T>>,
}

impl<T: Scalar> ResBlock<T> {
    fn new(f: &mut ParamFactory, p: &mut Vec<(String, Var<T>)>, name: &str, cin: usize, cout: usize, cond_dim: usize) -> Self {
        Self {
            norm1: Norm::new(f, p, &format!("{name}.norm1"), cin),
            conv1: Conv::new(f, p, &format!("{name}.conv1"), cin, cout, 3),
            cond: Dense::new(f, p, &format!("{name}.cond"), cond_dim, cout),
            norm2: Norm::new(f, p, &format!("{name}.norm2"), cout),
            conv2: Conv::new(f, p, &format!("{name}.conv2"), cout, cout, 3),
            skip: (cin != cout).then(|| Conv::new(f, p, &format!("{name}.skip"), cin, cout, 1)),
        }
    }

    fn forward(&self, x: &Var<T>, cond: &Var<T>) -> Result<Var<T>> {
        let mut h = self.norm1.forward(x)?;
        h = ops::silu(&h);
        h = self.conv1.forward(&h)?;
        let c = self.cond.forward(cond)?;
        h = ops::add_channel_bias(&h, &c)?;
        drop(c);
        h = self.norm2.forward(&h)?;
        h = ops::silu(&h);
        h = self.conv2.forward(&h)?;
        match &self.skip {
            Some(conv) => {
                let s = conv.forward(x)?;
                ops::add(&s, &h)
            }
            None => ops::add(x, &h),
        }
    }
}

#[derive(Clone)]
struct AttnBlock<T: Scalar> {
    norm: Norm<T>,
    weights: AttentionWeights<T>,
}

impl<T: Scalar> AttnBlock<T> {
    fn new(f: &mut ParamFactory, p: &mut Vec<(String, Var<T>)>, name: &str, c: usize) -> Self {
        let mut proj = |tag: &str| Dense::new(f, p, &format!("{name}.{tag}"), c, c);
        let (q, k, v, o) = (proj("q"), proj("k"), proj("v"), proj("out"));
        Self {
            norm: Norm::new(f, p, &format!("{name}.norm"), c),
            weights: AttentionWeights {
                wq: q.w,
                bq: q.b,
                wk: k.w,
                bk: k.b,
                wv: v.w,
                bv: v.b,
                wo: o.w,
                bo: o.b,
            },
        }
    }

    fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let mut h = self.norm.forward(x)?;
        h = ops::self_attention(&h, &self.weights)?;
        ops::add(x, &h)
    }
}

/// The noise-prediction network `eps_theta(x_t, t)` with position
/// conditioning.
#[derive(Clone)]
pub struct Denoiser<T: Scalar> {
    config: DenoiserConfig,
    params: Vec<(String, Var<T>)>,
    time1: Dense<T>,
    time2: Dense<T>,
    position: Dense<T>,
    conv_in: Conv<T>,
    down: Vec<ResBlock<T>>,
    mid_attn: Option<AttnBlock<T>>,
    mid: ResBlock<T>,
    up: Vec<ResBlock<T>>,
    norm_out: Norm<T>,
    conv_out: Conv<T>,
}

impl<T: Scalar> Denoiser<T> {
    /// Freshly initialized network. The output convolution starts at zero,
    /// so the initial prediction is identically zero.
    pub fn new(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut f = ParamFactory {
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let p = &mut Vec::new();
        let e = config.embed_dim;
        let cond_dim = 2 * e;
        let time1 = Dense::new(&mut f, p, "time.fc1", e, e);
        let time2 = Dense::new(&mut f, p, "time.fc2", e, e);
        let position = Dense::new(&mut f, p, "position.fc", config.position_width(), e);
        let base = config.base_channels;
        let conv_in = Conv::new(&mut f, p, "conv_in", config.in_channels(), base, 3);
        let mut down = Vec::new();
        let mut ch = base;
        for l in 0..config.levels() {
            let out = config.level_channels(l);
            down.push(ResBlock::new(&mut f, p, &format!("down{l}"), ch, out, cond_dim));
            ch = out;
        }
        let mid_attn = config.attention.then(|| AttnBlock::new(&mut f, p, "mid.attn", ch));
        let mid = ResBlock::new(&mut f, p, "mid.res", ch, ch, cond_dim);
        let mut up = Vec::new();
        for l in (0..config.levels().saturating_sub(1)).rev() {
            let skip = config.level_channels(l);
            up.push(ResBlock::new(&mut f, p, &format!("up{l}"), ch + skip, skip, cond_dim));
            ch = skip;
        }
        let norm_out = Norm::new(&mut f, p, "norm_out", ch);
        let conv_out = Conv::zeroed(&mut f, p, "conv_out", ch, config.image_channels, 3);
        Ok(Self {
            config,
            params: std::mem::take(p),
            time1,
            time2,
            position,
            conv_in,
            down,
            mid_attn,
            mid,
            up,
            norm_out,
            conv_out,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Named parameters in construction order.
    pub fn named_params(&self) -> &[(String, Var<T>)] {
        &self.params
    }

    pub fn params(&self) -> Vec<Var<T>> {
        self.params.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn param(&self, name: &str) -> Option<&Var<T>> {
        self.params.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, v)| v.value().numel()).sum()
    }

    pub fn zero_grad(&self) {
        for (_, v) in &self.params {
            v.zero_grad();
        }
    }

    /// Owned copies of all parameter values, e.g. to rebuild the network
    /// on another worker.
    pub fn snapshot(&self) -> Vec<(String, Tensor<T>)> {
        self.params
            .iter()
            .map(|(n, v)| (n.clone(), v.value().clone()))
            .collect()
    }

    /// Overwrites parameter values by name; every parameter must be
    /// present with a matching shape.
    pub fn load(&self, values: &[(String, Tensor<T>)]) -> Result<()> {
        for (name, var) in &self.params {
            let (_, t) = values
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("missing parameter {name}")))?;
            let mut v = var.value_mut();
            t.expect_shape(v.shape())?;
            *v = t.clone();
        }
        Ok(())
    }

    /// Step embedding for a batch: sinusoid features through the MLP.
    pub fn time_embedding(&self, steps: &[usize]) -> Result<Var<T>> {
        let e = self.config.embed_dim;
        let feats = Tensor::from_vec(
            &[steps.len(), e],
            steps.iter().flat_map(|&t| step_features(t, e)).map(T::of).collect(),
        )?;
        let mut h = self.time1.forward(&Var::constant(feats))?;
        h = ops::silu(&h);
        self.time2.forward(&h)
    }

    /// Position embedding for a batch of flat patch indices: the fully
    /// connected layer applied to each one-hot code.
    pub fn position_embedding(&self, positions: &[usize]) -> Result<Var<T>> {
        let n = self.config.divisions;
        let mut codes = Vec::with_capacity(positions.len() * n * n);
        for &s in positions {
            codes.extend(one_hot::<T>(s, n)?);
        }
        let codes = Tensor::from_vec(&[positions.len(), n * n], codes)?;
        self.position.forward(&Var::constant(codes))
    }

    /// Applies the position layer to an arbitrary code vector. Only exact
    /// one-hot codes are accepted.
    pub fn position_embedding_of(&self, code: &[T]) -> Result<Var<T>> {
        let ones = code.iter().filter(|&&v| v == T::one()).count();
        let zeros = code.iter().filter(|&&v| v == T::zero()).count();
        if code.len() != self.config.position_width() || ones != 1 || zeros + 1 != code.len() {
            return Err(Error::Config(format!(
                "position code must be one-hot of length {}",
                self.config.position_width()
            )));
        }
        let codes = Tensor::from_vec(&[1, code.len()], code.to_vec())?;
        self.position.forward(&Var::constant(codes))
    }

    /// Batched forward pass. `x` is `B x 2C x H' x W'`; `steps` and
    /// `positions` hold one entry per batch item.
    pub fn forward(&self, x: &Var<T>, steps: &[usize], positions: &[usize]) -> Result<Var<T>> {
        let shape = x.shape();
        let cfg = &self.config;
        if shape.len() != 4 || shape[1] != cfg.in_channels() {
            return Err(Error::ShapeMismatch(format!(
                "denoiser expects B x {} x H x W input, got {shape:?}",
                cfg.in_channels()
            )));
        }
        if steps.len() != shape[0] || positions.len() != shape[0] {
            return Err(Error::ShapeMismatch(format!(
                "batch of {} with {} steps and {} positions",
                shape[0],
                steps.len(),
                positions.len()
            )));
        }
        if steps.contains(&0) {
            return Err(Error::StepOutOfRange { step: 0, steps: usize::MAX });
        }
        cfg.validate_patch(shape[2], shape[3])?;

        let cond = {
            let t = self.time_embedding(steps)?;
            let p = self.position_embedding(positions)?;
            let c = ops::concat(&t, &p)?;
            drop((t, p));
            ops::silu(&c)
        };

        let mut h = self.conv_in.forward(x)?;
        let mut skips = Vec::new();
        let last = cfg.levels() - 1;
        for (l, block) in self.down.iter().enumerate() {
            h = block.forward(&h, &cond)?;
            if l < last {
                skips.push(h.clone());
                h = ops::avg_pool2d(&h, 2)?;
            }
        }
        if let Some(attn) = &self.mid_attn {
            h = attn.forward(&h)?;
        }
        h = self.mid.forward(&h, &cond)?;
        for block in &self.up {
            h = ops::upsample_nearest2x(&h)?;
            let skip = skips.pop().expect("one skip per upsampling level");
            h = ops::concat(&h, &skip)?;
            drop(skip);
            h = block.forward(&h, &cond)?;
        }
        h = self.norm_out.forward(&h)?;
        h = ops::silu(&h);
        self.conv_out.forward(&h)
    }

    /// Inference for one conditioned patch (`2C x H' x W'`) at step `t` and
    /// flat position `s`. Runs without recording a tape.
    pub fn predict_noise(&self, x_cond: &Tensor<T>, t: usize, s: usize) -> Result<Tensor<T>> {
        let shape = x_cond.shape();
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch(format!("expected 2C x H x W, got {shape:?}")));
        }
        let batched = x_cond.clone().reshape(&[1, shape[0], shape[1], shape[2]])?;
        let out = self.predict_noise_batch(batched, &[t], &[s])?;
        let c = self.config.image_channels;
        out.reshape(&[c, shape[1], shape[2]])
    }

    /// Tape-free batched inference.
    pub fn predict_noise_batch(&self, x_cond: Tensor<T>, steps: &[usize], positions: &[usize]) -> Result<Tensor<T>> {
        let _guard = no_grad();
        let out = self.forward(&Var::constant(x_cond), steps, positions)?;
        let t = out.value().clone();
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro(divisions: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_channels: 1,
            base_channels: 8,
            channel_mults: vec![1, 2],
            attention: true,
            embed_dim: 8,
            divisions,
        }
    }

    #[test]
    fn step_features_at_zero() {
        let f = step_features(0, 6);
        assert_eq!(f, vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn step_features_are_distinct() {
        let feats: Vec<Vec<f64>> = (1..=200).map(|t| step_features(t, 16)).collect();
        for a in 0..feats.len() {
            for b in a + 1..feats.len() {
                assert_ne!(feats[a], feats[b]);
            }
        }
    }

    #[test]
    fn output_shape_and_zero_init() {
        let cfg = DenoiserConfig::desk(3, 2);
        let net = Denoiser::<f32>::new(cfg, 1).unwrap();
        let x = Tensor::randn(&[6, 16, 16], &mut ChaCha8Rng::seed_from_u64(3));
        let y = net.predict_noise(&x, 5, 1).unwrap();
        assert_eq!(y.shape(), &[3, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn position_embedding_selects_weight_column() {
        let net = Denoiser::<f64>::new(micro(2), 4).unwrap();
        let e = net.position_embedding(&[2]).unwrap();
        let w = net.param("position.fc.weight").unwrap().value().clone();
        let b = net.param("position.fc.bias").unwrap().value().clone();
        for r in 0..8 {
            assert_eq!(e.value().data()[r], w.data()[r * 4 + 2] + b.data()[r]);
        }
        let e0 = net.position_embedding(&[0]).unwrap();
        assert_ne!(*e0.value(), *e.value());
        assert!(net.position_embedding_of(&[0.0, 0.0, 0.0, 0.0]).is_err());
        assert!(net.position_embedding_of(&[0.0, 1.0, 0.0, 0.0]).is_ok());
    }

    #[test]
    fn param_count_depends_on_divisions_only_through_position_layer() {
        let counts: Vec<usize> = [2usize, 4, 8]
            .iter()
            .map(|&n| Denoiser::<f32>::new(DenoiserConfig::desk(1, n), 0).unwrap().param_count())
            .collect();
        let e = 64;
        for (k, &n) in [2usize, 4, 8].iter().enumerate() {
            assert_eq!(counts[k] - n * n * e, counts[0] - 4 * e);
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let net = Denoiser::<f32>::new(micro(2), 0).unwrap();
        let x = Tensor::zeros(&[3, 8, 8]);
        assert!(net.predict_noise(&x, 1, 0).is_err());
        let x = Tensor::zeros(&[2, 7, 7]);
        assert!(net.predict_noise(&x, 1, 0).is_err());
        let x = Tensor::zeros(&[2, 8, 8]);
        assert!(net.predict_noise(&x, 1, 4).is_err());
        assert!(net.predict_noise(&x, 0, 0).is_err());
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = DenoiserConfig::desk(3, 4);
        let mut doc = KvDoc::new();
        cfg.write_kv(&mut doc, "model");
        assert_eq!(DenoiserConfig::read_kv(&doc, "model").unwrap(), cfg);
    }
}
