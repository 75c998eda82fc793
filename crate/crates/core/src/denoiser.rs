//! Conditional noise predictor: a small U-Net with residual blocks, a
//! sinusoidal timestep embedding, and a learned per-condition embedding added
//! to it.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::kernels::{timestep_embedding, ConvGeom};
use crate::nn::{ConvParams, Eval, LinearParams, NormParams, Ops, ParamId, ParamStore, Tape};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub channels: usize,
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub embed_dim: usize,
    pub num_conditions: usize,
    /// Levels (0 = full resolution) that get self-attention after each block.
    pub attention_levels: BTreeSet<usize>,
    /// Largest timestep the model accepts.
    pub max_timestep: usize,
}

/// The architecture part of [`DenoiserConfig`]: everything not implied by
/// the data and the noise schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Architecture {
    pub base_width: usize,
    pub channel_multipliers: Vec<usize>,
    pub blocks_per_level: usize,
    pub embed_dim: usize,
    pub attention_levels: BTreeSet<usize>,
}

impl Default for Architecture {
    fn default() -> Self {
        let c = DenoiserConfig::new(1);
        Architecture {
            base_width: c.base_width,
            channel_multipliers: c.channel_multipliers,
            blocks_per_level: c.blocks_per_level,
            embed_dim: c.embed_dim,
            attention_levels: c.attention_levels,
        }
    }
}

impl DenoiserConfig {
    pub fn new(num_conditions: usize) -> Self {
        DenoiserConfig {
            image_size: 32,
            channels: 3,
            base_width: 64,
            channel_multipliers: vec![1, 2, 2],
            blocks_per_level: 2,
            embed_dim: 128,
            num_conditions,
            attention_levels: BTreeSet::from([2]),
            max_timestep: 1000,
        }
    }

    /// Full config for data of the given shape and label count.
    pub fn from_architecture(
        arch: &Architecture,
        image_shape: [usize; 3],
        num_conditions: usize,
        max_timestep: usize,
    ) -> Result<Self> {
        let [channels, h, w] = image_shape;
        if h != w {
            return Err(Error::Config(format!("images must be square, got {h}x{w}")));
        }
        let config = DenoiserConfig {
            image_size: h,
            channels,
            base_width: arch.base_width,
            channel_multipliers: arch.channel_multipliers.clone(),
            blocks_per_level: arch.blocks_per_level,
            embed_dim: arch.embed_dim,
            num_conditions,
            attention_levels: arch.attention_levels.clone(),
            max_timestep,
        };
        config.validate()?;
        Ok(config)
    }

    pub fn levels(&self) -> usize {
        self.channel_multipliers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.channel_multipliers.is_empty() || self.channel_multipliers.contains(&0) {
            return bad("channel_multipliers must be non-empty and positive".into());
        }
        let factor = 1usize << (self.levels() - 1);
        if self.image_size == 0 || !self.image_size.is_multiple_of(factor) {
            return bad(format!("image_size {} is not divisible by {factor}", self.image_size));
        }
        if self.num_conditions == 0 {
            return bad("num_conditions must be at least 1".into());
        }
        if self.channels == 0 || self.base_width == 0 || self.blocks_per_level == 0 {
            return bad("channels, base_width and blocks_per_level must be positive".into());
        }
        if self.embed_dim < 2 || !self.embed_dim.is_multiple_of(2) {
            return bad(format!("embed_dim {} must be even and at least 2", self.embed_dim));
        }
        if let Some(&l) = self.attention_levels.iter().find(|&&l| l >= self.levels()) {
            return bad(format!("attention level {l} does not exist"));
        }
        if self.max_timestep == 0 {
            return bad("max_timestep must be positive".into());
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Number of normalization groups for a channel count: 8 when it divides.
pub fn norm_groups(channels: usize) -> usize {
    gcd(channels, 8)
}

#[derive(Clone, Debug)]
struct ResBlock {
    norm1: NormParams,
    conv1: ConvParams,
    emb: LinearParams,
    norm2: NormParams,
    conv2: ConvParams,
    skip: Option<ConvParams>,
}

#[derive(Clone, Debug)]
struct AttnBlock {
    norm: NormParams,
    q: ConvParams,
    k: ConvParams,
    v: ConvParams,
    proj: ConvParams,
}

#[derive(Clone, Debug)]
struct Stage {
    res: ResBlock,
    attn: Option<AttnBlock>,
}

#[derive(Clone, Debug)]
enum DownStep {
    Stage(Box<Stage>),
    Downsample(ConvParams),
}

#[derive(Clone, Debug)]
enum UpStep {
    Stage(Box<Stage>),
    Upsample(ConvParams),
}

#[derive(Clone, Debug)]
struct Layout {
    time1: LinearParams,
    time2: LinearParams,
    cond_table: ParamId,
    conv_in: ConvParams,
    down: Vec<DownStep>,
    mid1: ResBlock,
    mid_attn: Option<AttnBlock>,
    mid2: ResBlock,
    up: Vec<UpStep>,
    norm_out: NormParams,
    conv_out: ConvParams,
}

/// Creates parameters in a fixed order, drawing initial values from a seeded
/// ChaCha8 stream: fan-in-scaled uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
/// for convolution and linear weights, zero biases, unit/zero normalization
/// affines, standard normal condition embeddings, and an all-zero output
/// convolution.
struct Builder<T> {
    store: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn uniform(&mut self, name: String, shape: Vec<usize>, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-bound..bound))).collect();
        self.store.push(name, shape, data)
    }

    fn constant(&mut self, name: String, shape: Vec<usize>, v: f64) -> ParamId {
        let n = shape.iter().product();
        self.store.push(name, shape, vec![T::of(v); n])
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize) -> ConvParams {
        let weight = self.uniform(format!("{name}.weight"), vec![cout, cin, kernel, kernel], cin * kernel * kernel);
        let bias = self.constant(format!("{name}.bias"), vec![cout], 0.0);
        ConvParams { weight, bias, geom: ConvGeom { in_ch: cin, out_ch: cout, kernel, stride, pad: kernel / 2 } }
    }

    fn zero_conv(&mut self, name: &str, cin: usize, cout: usize) -> ConvParams {
        let weight = self.constant(format!("{name}.weight"), vec![cout, cin, 3, 3], 0.0);
        let bias = self.constant(format!("{name}.bias"), vec![cout], 0.0);
        ConvParams { weight, bias, geom: ConvGeom { in_ch: cin, out_ch: cout, kernel: 3, stride: 1, pad: 1 } }
    }

    fn norm(&mut self, name: &str, ch: usize) -> NormParams {
        let gamma = self.constant(format!("{name}.gamma"), vec![ch], 1.0);
        let beta = self.constant(format!("{name}.beta"), vec![ch], 0.0);
        NormParams { gamma, beta, groups: norm_groups(ch) }
    }

    fn linear(&mut self, name: &str, din: usize, dout: usize) -> LinearParams {
        let weight = self.uniform(format!("{name}.weight"), vec![dout, din], din);
        let bias = self.constant(format!("{name}.bias"), vec![dout], 0.0);
        LinearParams { weight, bias, dout }
    }

    fn res(&mut self, name: &str, cin: usize, cout: usize, emb: usize) -> ResBlock {
        ResBlock {
            norm1: self.norm(&format!("{name}.norm1"), cin),
            conv1: self.conv(&format!("{name}.conv1"), cin, cout, 3, 1),
            emb: self.linear(&format!("{name}.emb"), emb, cout),
            norm2: self.norm(&format!("{name}.norm2"), cout),
            conv2: self.conv(&format!("{name}.conv2"), cout, cout, 3, 1),
            skip: (cin != cout).then(|| self.conv(&format!("{name}.skip"), cin, cout, 1, 1)),
        }
    }

    fn attn(&mut self, name: &str, ch: usize) -> AttnBlock {
        AttnBlock {
            norm: self.norm(&format!("{name}.norm"), ch),
            q: self.conv(&format!("{name}.q"), ch, ch, 1, 1),
            k: self.conv(&format!("{name}.k"), ch, ch, 1, 1),
            v: self.conv(&format!("{name}.v"), ch, ch, 1, 1),
            proj: self.conv(&format!("{name}.proj"), ch, ch, 1, 1),
        }
    }
}

fn build<T: Scalar>(config: &DenoiserConfig, seed: u64) -> (Layout, ParamStore<T>) {
    let mut b = Builder { store: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
    let e = config.embed_dim;
    let time1 = b.linear("time.0", e, e);
    let time2 = b.linear("time.1", e, e);
    let cond_table = {
        let n = config.num_conditions * e;
        let data = (0..n).map(|_| T::of(b.rng.sample::<f64, _>(StandardNormal))).collect();
        b.store.push("cond_embed", vec![config.num_conditions, e], data)
    };
    let base = config.base_width;
    let conv_in = b.conv("conv_in", config.channels, base, 3, 1);

    let mut skips = vec![base];
    let mut ch = base;
    let mut down = Vec::new();
    let last = config.levels() - 1;
    for (level, &mult) in config.channel_multipliers.iter().enumerate() {
        let out = base * mult;
        for i in 0..config.blocks_per_level {
            let name = format!("down.{level}.{i}");
            let res = b.res(&name, ch, out, e);
            ch = out;
            let attn = config.attention_levels.contains(&level).then(|| b.attn(&format!("{name}.attn"), ch));
            down.push(DownStep::Stage(Box::new(Stage { res, attn })));
            skips.push(ch);
        }
        if level != last {
            down.push(DownStep::Downsample(b.conv(&format!("down.{level}.downsample"), ch, ch, 3, 2)));
            skips.push(ch);
        }
    }

    let mid1 = b.res("mid.0", ch, ch, e);
    let mid_attn = config.attention_levels.contains(&last).then(|| b.attn("mid.attn", ch));
    let mid2 = b.res("mid.1", ch, ch, e);

    let mut up = Vec::new();
    for (level, &mult) in config.channel_multipliers.iter().enumerate().rev() {
        let out = base * mult;
        for i in 0..=config.blocks_per_level {
            let name = format!("up.{level}.{i}");
            let skip = skips.pop().expect("skip stack matches decoder");
            let res = b.res(&name, ch + skip, out, e);
            ch = out;
            let attn = config.attention_levels.contains(&level).then(|| b.attn(&format!("{name}.attn"), ch));
            up.push(UpStep::Stage(Box::new(Stage { res, attn })));
        }
        if level != 0 {
            up.push(UpStep::Upsample(b.conv(&format!("up.{level}.upsample"), ch, ch, 3, 1)));
        }
    }
    let norm_out = b.norm("norm_out", ch);
    let conv_out = b.zero_conv("conv_out", ch, config.channels);
    let layout = Layout { time1, time2, cond_table, conv_in, down, mid1, mid_attn, mid2, up, norm_out, conv_out };
    (layout, b.store)
}

fn res_forward<T: Scalar, B: Ops<T>>(ops: &mut B, blk: &ResBlock, x: &B::V, emb: &B::V) -> B::V {
    let h = ops.group_norm(x, &blk.norm1);
    let h = ops.silu(&h);
    let h = ops.conv(&h, &blk.conv1);
    let e = ops.linear(emb, &blk.emb);
    let h = ops.channel_bias(&h, &e);
    let h = ops.group_norm(&h, &blk.norm2);
    let h = ops.silu(&h);
    let h = ops.conv(&h, &blk.conv2);
    match &blk.skip {
        Some(p) => {
            let s = ops.conv(x, p);
            ops.add(&s, &h)
        }
        None => ops.add(x, &h),
    }
}

fn attn_forward<T: Scalar, B: Ops<T>>(ops: &mut B, blk: &AttnBlock, x: &B::V) -> B::V {
    let h = ops.group_norm(x, &blk.norm);
    let q = ops.conv(&h, &blk.q);
    let k = ops.conv(&h, &blk.k);
    let v = ops.conv(&h, &blk.v);
    let a = ops.attention(&q, &k, &v);
    let o = ops.conv(&a, &blk.proj);
    ops.add(x, &o)
}

fn stage_forward<T: Scalar, B: Ops<T>>(ops: &mut B, st: &Stage, x: &B::V, emb: &B::V) -> B::V {
    let h = res_forward(ops, &st.res, x, emb);
    match &st.attn {
        Some(a) => attn_forward(ops, a, &h),
        None => h,
    }
}

/// The noise predictor `eps(x_t, t, y)`.
#[derive(Clone, Debug)]
pub struct ConditionalDenoiser<T: Scalar = f32> {
    config: DenoiserConfig,
    layout: Layout,
    params: ParamStore<T>,
}

impl<T: Scalar> PartialEq for ConditionalDenoiser<T> {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl<T: Scalar> ConditionalDenoiser<T> {
    pub fn init(config: DenoiserConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, params) = build(&config, seed);
        Ok(ConditionalDenoiser { config, layout, params })
    }

    /// Wraps existing parameters, which must match the layout `config` implies.
    pub fn from_params(config: DenoiserConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let (layout, reference) = build::<T>(&config, 0);
        reference.ensure_same_layout(&params)?;
        Ok(ConditionalDenoiser { config, layout, params })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> ConditionalDenoiser<U> {
        ConditionalDenoiser { config: self.config.clone(), layout: self.layout.clone(), params: self.params.cast() }
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.config.channels, self.config.image_size, self.config.image_size]
    }

    fn check_inputs(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<()> {
        let [c, h, w] = self.image_shape();
        x.ensure_shape([x.batch(), c, h, w])?;
        if t.len() != x.batch() || y.len() != x.batch() {
            return Err(Error::Shape { expected: vec![x.batch()], got: vec![t.len(), y.len()] });
        }
        if let Some(&bad) = t.iter().find(|&&v| v == 0 || v > self.config.max_timestep) {
            return Err(Error::TimestepRange { t: bad, total: self.config.max_timestep });
        }
        if let Some(&bad) = y.iter().find(|&&v| v >= self.config.num_conditions) {
            return Err(Error::Label { label: bad, num_conditions: self.config.num_conditions });
        }
        Ok(())
    }

    fn forward<B: Ops<T>>(&self, ops: &mut B, x: Tensor<T>, t: &[usize], y: &[usize]) -> B::V {
        let l = &self.layout;
        let temb = ops.input(timestep_embedding(t, self.config.embed_dim));
        let h = ops.linear(&temb, &l.time1);
        let h = ops.silu(&h);
        let h = ops.linear(&h, &l.time2);
        let c = ops.embed(l.cond_table, self.config.embed_dim, y);
        let emb = ops.add(&h, &c);
        let emb = ops.silu(&emb);

        let x = ops.input(x);
        let mut skips = vec![ops.conv(&x, &l.conv_in)];
        for step in &l.down {
            let h = skips.last().expect("non-empty");
            let next = match step {
                DownStep::Stage(st) => stage_forward(ops, st, h, &emb),
                DownStep::Downsample(p) => ops.conv(h, p),
            };
            skips.push(next);
        }
        let mut h = res_forward(ops, &l.mid1, skips.last().expect("non-empty"), &emb);
        if let Some(a) = &l.mid_attn {
            h = attn_forward(ops, a, &h);
        }
        h = res_forward(ops, &l.mid2, &h, &emb);
        for step in &l.up {
            h = match step {
                UpStep::Stage(st) => {
                    let s = skips.pop().expect("skip stack matches decoder");
                    let cat = ops.concat(&h, &s);
                    stage_forward(ops, st, &cat, &emb)
                }
                UpStep::Upsample(p) => {
                    let u = ops.upsample(&h);
                    ops.conv(&u, p)
                }
            };
        }
        let h = ops.group_norm(&h, &l.norm_out);
        let h = ops.silu(&h);
        ops.conv(&h, &l.conv_out)
    }

    /// Predicted noise for a batch; output shape equals input shape.
    pub fn predict_noise(&self, x: &Tensor<T>, t: &[usize], y: &[usize]) -> Result<Tensor<T>> {
        self.check_inputs(x, t, y)?;
        let mut ops = Eval::new(&self.params);
        Ok(self.forward(&mut ops, x.clone(), t, y))
    }

    /// Mean squared error between the prediction and `target`, and its
    /// gradient with respect to every parameter.
    pub fn mse_and_grad(
        &self,
        x: &Tensor<T>,
        t: &[usize],
        y: &[usize],
        target: &Tensor<T>,
    ) -> Result<(f64, Vec<f64>, ParamStore<T>)> {
        self.check_inputs(x, t, y)?;
        target.ensure_shape(x.shape())?;
        let mut tape = Tape::new(&self.params);
        let out = self.forward(&mut tape, x.clone(), t, y);
        let pred = tape.value(&out);
        let n = pred.len() as f64;
        let per_item = pred.item_len() as f64;
        let mut seed = Tensor::zeros(pred.shape());
        let mut item_losses = vec![0.0; x.batch()];
        for (i, item_loss) in item_losses.iter_mut().enumerate() {
            let (p, g) = (pred.item(i), target.item(i));
            let s = seed.item_mut(i);
            let mut acc = 0.0;
            for j in 0..p.len() {
                let d = p[j] - g[j];
                acc += d.f64() * d.f64();
                s[j] = T::of(2.0 * d.f64() / n);
            }
            *item_loss = acc / per_item;
        }
        let loss = item_losses.iter().sum::<f64>() * per_item / n;
        let grads = tape.backward(out, seed);
        Ok((loss, item_losses, grads))
    }
}

/// Anything that can play the role of `eps(x_t, t, y)` for the sampler and
/// the loss. Images are exchanged in double precision.
pub trait NoisePredictor {
    fn image_shape(&self) -> [usize; 3];
    fn num_conditions(&self) -> usize;
    fn predict(&self, x: &Tensor<f64>, t: &[usize], y: &[usize]) -> Result<Tensor<f64>>;
}

impl<T: Scalar> NoisePredictor for ConditionalDenoiser<T> {
    fn image_shape(&self) -> [usize; 3] {
        ConditionalDenoiser::image_shape(self)
    }
    fn num_conditions(&self) -> usize {
        self.config.num_conditions
    }
    fn predict(&self, x: &Tensor<f64>, t: &[usize], y: &[usize]) -> Result<Tensor<f64>> {
        Ok(self.predict_noise(&x.cast(), t, y)?.cast())
    }
}

impl<P: NoisePredictor + ?Sized> NoisePredictor for &P {
    fn image_shape(&self) -> [usize; 3] {
        (**self).image_shape()
    }
    fn num_conditions(&self) -> usize {
        (**self).num_conditions()
    }
    fn predict(&self, x: &Tensor<f64>, t: &[usize], y: &[usize]) -> Result<Tensor<f64>> {
        (**self).predict(x, t, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn tiny(num_conditions: usize) -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            channels: 3,
            base_width: 8,
            channel_multipliers: vec![1, 2],
            blocks_per_level: 1,
            embed_dim: 16,
            num_conditions,
            attention_levels: BTreeSet::from([1]),
            max_timestep: 100,
        }
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let a = ConditionalDenoiser::<f32>::init(tiny(3), 7).unwrap();
        let b = ConditionalDenoiser::<f32>::init(tiny(3), 7).unwrap();
        let c = ConditionalDenoiser::<f32>::init(tiny(3), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params().all_finite());
    }

    #[test]
    fn fresh_model_predicts_zero() {
        let m = ConditionalDenoiser::<f32>::init(tiny(3), 1).unwrap();
        let x = Tensor::from_vec([2, 3, 8, 8], (0..384).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let out = m.predict_noise(&x, &[5, 99], &[0, 2]).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_config_size_and_shape() {
        let cfg = DenoiserConfig::new(13);
        let m = ConditionalDenoiser::<f32>::init(cfg, 0).unwrap();
        let n = m.params().num_scalars();
        assert!((2_000_000..=8_000_000).contains(&n), "{n} parameters");
    }

    #[test]
    fn rejects_invalid_configs() {
        let mut cfg = DenoiserConfig::new(13);
        cfg.channel_multipliers = vec![1, 2, 2, 2];
        cfg.image_size = 48;
        assert!(cfg.validate().is_ok());
        cfg.image_size = 36;
        assert!(ConditionalDenoiser::<f32>::init(cfg, 0).is_err());
        assert!(ConditionalDenoiser::<f32>::init(DenoiserConfig::new(0), 0).is_err());
        let mut cfg = tiny(2);
        cfg.attention_levels.insert(5);
        assert!(ConditionalDenoiser::<f32>::init(cfg, 0).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = ConditionalDenoiser::<f32>::init(tiny(3), 1).unwrap();
        let x = Tensor::zeros([1, 3, 8, 8]);
        assert!(matches!(m.predict_noise(&x, &[0], &[0]), Err(Error::TimestepRange { .. })));
        assert!(matches!(m.predict_noise(&x, &[101], &[0]), Err(Error::TimestepRange { .. })));
        assert!(matches!(m.predict_noise(&x, &[1], &[3]), Err(Error::Label { .. })));
        assert!(matches!(m.predict_noise(&Tensor::zeros([1, 3, 4, 4]), &[1], &[0]), Err(Error::Shape { .. })));
    }

    #[test]
    fn from_params_checks_layout() {
        let m = ConditionalDenoiser::<f32>::init(tiny(3), 1).unwrap();
        assert!(ConditionalDenoiser::from_params(tiny(3), m.params().clone()).is_ok());
        assert!(ConditionalDenoiser::from_params(tiny(4), m.params().clone()).is_err());
    }
}
