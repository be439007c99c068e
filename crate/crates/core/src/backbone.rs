//! Toy latent autoencoder and the latent controller that maps a noisy latent
//! plus a control latent to a predicted clean latent.
//!
//! Encoder layer `i` halves the resolution and emits feature `f_i`; the
//! latent is a pixel-shuffled projection of the last feature, so for the
//! default config a 64×64 image gives features at 32, 16 and 8 pixels and a
//! `(B,4,16,16)` latent. The decoder mirrors the encoder: decoder layer `i`
//! works at the resolution of encoder feature `M-1-i` (0-based), which is
//! where the fusion hook pairs them.

use crate::autograd::Var;
use crate::error::{bail, Result};
use crate::nn::{Builder, Conv2d, ConvInit, Linear, NafBlock, Scope, Session};
use crate::tensor::{ConvGeom, Tensor};

pub const ENCODER: &str = "encoder";
pub const DECODER: &str = "decoder";
pub const CONTROLLER: &str = "controller";
pub const TUNER: &str = "tuner";

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct EncoderConfig {
    pub layers: usize,
    pub channels: Vec<usize>,
    pub image_size: usize,
    pub latent_channels: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { layers: 3, channels: vec![16, 32, 64], image_size: 64, latent_channels: 4 }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            bail!(Config, "encoder needs at least 2 layers, got {}", self.layers);
        }
        if self.channels.len() != self.layers {
            bail!(Config, "{} channel widths given for {} layers", self.channels.len(), self.layers);
        }
        if self.channels.windows(2).any(|w| w[0] >= w[1]) || self.channels[0] == 0 {
            bail!(Config, "encoder channels must be positive and strictly increasing: {:?}", self.channels);
        }
        if self.image_size == 0 || !self.image_size.is_multiple_of(1 << self.layers) {
            bail!(Config, "image size {} is not divisible by 2^{}", self.image_size, self.layers);
        }
        if self.latent_channels == 0 {
            bail!(Config, "latent_channels must be positive");
        }
        Ok(())
    }

    /// Spatial size of encoder feature `i` (0-based).
    pub fn feature_size(&self, i: usize) -> usize {
        self.image_size >> (i + 1)
    }

    pub fn feature_shape(&self, i: usize, batch: usize) -> [usize; 4] {
        let s = self.feature_size(i);
        [batch, self.channels[i], s, s]
    }

    pub fn latent_size(&self) -> usize {
        self.feature_size(self.layers - 1) * 2
    }

    pub fn latent_shape(&self, batch: usize) -> [usize; 4] {
        let s = self.latent_size();
        [batch, self.latent_channels, s, s]
    }
}

/// Per-layer encoder features, shallowest first.
#[derive(Clone, Debug)]
pub struct FeaturePyramid<'t> {
    pub features: Vec<Var<'t>>,
}

impl<'t> FeaturePyramid<'t> {
    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn values(&self) -> Vec<Tensor> {
        self.features.iter().map(|f| (*f.value()).clone()).collect()
    }
}

/// Anything that rewrites encoder features layer by layer as they are
/// produced (the restoration module, or nothing).
pub trait FeatureHook<'t> {
    fn apply(&self, s: &Session<'t>, layer: usize, f: Var<'t>) -> Var<'t>;
}

/// Called after each decoder layer with its features.
pub trait DecoderHook<'t> {
    fn fuse(&mut self, s: &Session<'t>, layer: usize, latent: Var<'t>) -> Var<'t>;
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    down: Conv2d,
    refine: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    layers: Vec<EncoderLayer>,
    to_latent: Conv2d,
}

fn stride2(b: &mut Builder, scope: &Scope, cin: usize, cout: usize) -> Conv2d {
    let geom = ConvGeom { stride: 2, padding: 1, groups: 1 };
    Conv2d::new(b, scope, cin, cout, 3, geom, true, ConvInit::He)
}

impl Encoder {
    pub fn new(b: &mut Builder, config: &EncoderConfig) -> Self {
        let scope = Scope::new(ENCODER);
        let mut cin = 3;
        let layers = config
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let sc = scope.pp(format!("layer{i}"));
                let layer = EncoderLayer {
                    down: stride2(b, &sc.pp("down"), cin, c),
                    refine: Conv2d::same(b, &sc.pp("refine"), c, c, 3, ConvInit::He),
                };
                cin = c;
                layer
            })
            .collect();
        let to_latent = Conv2d::same(b, &scope.pp("to_latent"), cin, config.latent_channels * 4, 3, ConvInit::Default);
        Encoder { config: config.clone(), layers, to_latent }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn check_input(&self, x: &[usize]) -> Result<()> {
        let n = self.config.image_size;
        match x {
            &[_, 3, h, w] if h == n && w == n => Ok(()),
            s => bail!(Shape, "encoder expects (B,3,{n},{n}), got {s:?}"),
        }
    }

    /// Runs every layer, passing each feature through `hook` before it
    /// feeds the next layer. Returns the (possibly restored) pyramid and
    /// the latent computed from its last level.
    pub fn encode<'t>(
        &self,
        s: &Session<'t>,
        x: Var<'t>,
        hook: Option<&dyn FeatureHook<'t>>,
    ) -> Result<(FeaturePyramid<'t>, Var<'t>)> {
        self.check_input(&x.shape())?;
        let mut h = x;
        let mut features = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.down.forward(s, h).gelu();
            h = h.add(layer.refine.forward(s, h).gelu());
            if let Some(hook) = hook {
                h = hook.apply(s, i, h);
            }
            features.push(h);
        }
        let z = self.to_latent.forward(s, h).pixel_shuffle(2);
        Ok((FeaturePyramid { features }, z))
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    conv_a: Conv2d,
    conv_b: Conv2d,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    config: EncoderConfig,
    from_latent: Conv2d,
    layers: Vec<DecoderLayer>,
    to_image: Conv2d,
}

impl Decoder {
    pub fn new(b: &mut Builder, config: &EncoderConfig) -> Self {
        let scope = Scope::new(DECODER);
        let m = config.layers;
        let top = config.channels[m - 1];
        let from_latent = Conv2d::same(b, &scope.pp("from_latent"), config.latent_channels * 4, top, 3, ConvInit::He);
        let mut cin = top;
        let layers = (0..m)
            .map(|i| {
                let c = config.channels[m - 1 - i];
                let sc = scope.pp(format!("layer{i}"));
                let layer = DecoderLayer {
                    conv_a: Conv2d::same(b, &sc.pp("a"), cin, c, 3, ConvInit::He),
                    conv_b: Conv2d::same(b, &sc.pp("b"), c, c, 3, ConvInit::He),
                };
                cin = c;
                layer
            })
            .collect();
        let to_image = Conv2d::same(b, &scope.pp("to_image"), cin, 12, 3, ConvInit::Default);
        Decoder { config: config.clone(), from_latent, layers, to_image }
    }

    /// Channels of decoder layer `i`, equal to those of encoder feature `M-1-i`.
    pub fn layer_channels(&self, i: usize) -> usize {
        self.config.channels[self.config.layers - 1 - i]
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Latent to image in `[0,1]`. Layers after the first start with a 2×
    /// nearest upsample; `hook` sees each layer's output.
    pub fn decode<'t>(
        &self,
        s: &Session<'t>,
        z: Var<'t>,
        mut hook: Option<&mut dyn DecoderHook<'t>>,
    ) -> Result<Var<'t>> {
        let expect = self.config.latent_shape(z.shape()[0]);
        if z.shape() != expect {
            bail!(Shape, "decoder expects latent {expect:?}, got {:?}", z.shape());
        }
        let mut h = self.from_latent.forward(s, z.pixel_unshuffle(2)).gelu();
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.upsample2x();
            }
            h = layer.conv_a.forward(s, h).gelu();
            h = h.add(layer.conv_b.forward(s, h).gelu());
            if let Some(hook) = hook.as_deref_mut() {
                h = hook.fuse(s, i, h);
            }
        }
        Ok(self.to_image.forward(s, h).pixel_shuffle(2).sigmoid())
    }
}

/// Linear-beta diffusion schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    alpha_bar: Vec<f64>,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule::linear(50, 0.002, 0.4)
    }
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Self {
        assert!(steps >= 2 && 0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0);
        let mut acc = 1.0;
        let alpha_bar = (0..steps)
            .map(|t| {
                let beta = beta_start + (beta_end - beta_start) * t as f64 / (steps - 1) as f64;
                acc *= 1.0 - beta;
                acc
            })
            .collect();
        NoiseSchedule { alpha_bar }
    }

    pub fn steps(&self) -> usize {
        self.alpha_bar.len()
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        match self.alpha_bar.get(t) {
            Some(&a) => Ok(a),
            None => bail!(Argument, "timestep {t} outside schedule [0,{})", self.steps()),
        }
    }

    /// `sqrt(ᾱ_t) z0 + sqrt(1-ᾱ_t) ε`.
    pub fn add_noise(&self, z0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        let a = self.alpha_bar(t)?;
        Ok(z0.scale(a.sqrt()).add(&eps.scale((1.0 - a).sqrt())))
    }
}

/// A latent at diffusion step `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentState {
    pub z: Tensor,
    pub t: usize,
}

const TIME_DIM: usize = 16;

fn timestep_embedding(t: usize) -> Tensor {
    let half = TIME_DIM / 2;
    let mut v = vec![0.0; TIME_DIM];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        v[i] = (t as f64 * freq).sin();
        v[half + i] = (t as f64 * freq).cos();
    }
    Tensor::new(&[1, TIME_DIM], v)
}

/// Channel-attention modulation of the control features (the `tuner` group):
/// squeeze, excite with the timestep embedding added, then a 1×1 injection.
#[derive(Clone, Debug)]
struct Tuner {
    squeeze: Linear,
    excite: Linear,
    inject: Conv2d,
}

impl Tuner {
    fn new(b: &mut Builder, hidden: usize) -> Self {
        let sc = Scope::new(TUNER);
        Tuner {
            squeeze: Linear::new(b, &sc.pp("squeeze"), hidden, hidden / 4, ConvInit::Default),
            excite: Linear::new(b, &sc.pp("excite"), hidden / 4, hidden, ConvInit::Default),
            inject: Conv2d::same(b, &sc.pp("inject"), hidden, hidden, 1, ConvInit::Default),
        }
    }

    fn forward<'t>(&self, s: &Session<'t>, c: Var<'t>, temb: Var<'t>) -> Var<'t> {
        let sh = c.shape();
        let pooled = c.mean_axes(&[2, 3], false);
        let a = self.excite.forward(s, self.squeeze.forward(s, pooled).gelu()).add(temb).sigmoid();
        let a = a.reshape(&[sh[0], sh[1], 1, 1]);
        self.inject.forward(s, c.mul(a))
    }
}

/// Predicts the clean latent `ẑ0` from a noisy latent, its timestep and a
/// control latent. The prediction is residual on the control latent.
#[derive(Clone, Debug)]
pub struct Controller {
    latent_shape: [usize; 3],
    schedule: NoiseSchedule,
    z_in: Conv2d,
    control_in: Conv2d,
    time: Linear,
    tuner: Tuner,
    blocks: Vec<NafBlock>,
    out: Conv2d,
}

impl Controller {
    pub fn new(b: &mut Builder, config: &EncoderConfig, hidden: usize, schedule: NoiseSchedule) -> Self {
        let sc = Scope::new(CONTROLLER);
        let lc = config.latent_channels;
        let z_in = Conv2d::same(b, &sc.pp("z_in"), lc, hidden, 3, ConvInit::Default);
        let control_in = Conv2d::same(b, &sc.pp("control_in"), lc, hidden, 3, ConvInit::Default);
        let time = Linear::new(b, &sc.pp("time"), TIME_DIM, hidden, ConvInit::Default);
        let tuner = Tuner::new(b, hidden);
        let blocks = (0..2).map(|i| NafBlock::new(b, &sc.pp(format!("block{i}")), hidden, ConvInit::Default)).collect();
        let out = Conv2d::same(b, &sc.pp("out"), hidden, lc, 3, ConvInit::Default);
        let ls = config.latent_size();
        Controller { latent_shape: [lc, ls, ls], schedule, z_in, control_in, time, tuner, blocks, out }
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn predict<'t>(&self, s: &Session<'t>, z: Var<'t>, t: usize, control: Var<'t>) -> Result<Var<'t>> {
        self.schedule.alpha_bar(t)?;
        let (zs, cs) = (z.shape(), control.shape());
        if zs != cs || zs[1..] != self.latent_shape {
            bail!(Shape, "controller expects latent and control of shape (B,{:?}), got {zs:?} and {cs:?}", self.latent_shape);
        }
        let temb = self.time.forward(s, s.constant(timestep_embedding(t))).gelu();
        let hz = self.z_in.forward(s, z);
        let hc = self.tuner.forward(s, self.control_in.forward(s, control), temb);
        let hidden = temb.shape()[1];
        let mut h = hz.add(hc).add(temb.reshape(&[1, hidden, 1, 1])).gelu();
        for blk in &self.blocks {
            h = blk.forward(s, h);
        }
        Ok(control.add(self.out.forward(s, h)))
    }

    /// Predicts `ẑ0` starting from `noise` taken as the latent at the last
    /// timestep. With `steps > 1`, walks a deterministic strided schedule
    /// down towards `t = 0`.
    pub fn sample<'t>(&self, s: &Session<'t>, control: Var<'t>, noise: Tensor, steps: usize) -> Result<Var<'t>> {
        if steps == 0 || steps > self.schedule.steps() {
            bail!(Argument, "sampling steps must be in 1..={}, got {steps}", self.schedule.steps());
        }
        if noise.shape() != control.shape() {
            bail!(Shape, "initial noise {:?} vs control {:?}", noise.shape(), control.shape());
        }
        let big_t = self.schedule.steps();
        let mut z = s.constant(noise);
        let ts: Vec<usize> = (0..steps).map(|k| (big_t - 1) - k * (big_t - 1) / steps).collect();
        let mut z0 = z;
        for (k, &t) in ts.iter().enumerate() {
            z0 = self.predict(s, z, t, control)?;
            if let Some(&next) = ts.get(k + 1) {
                let (a, an) = (self.schedule.alpha_bar(t)?, self.schedule.alpha_bar(next)?);
                let eps = z.sub(z0.scale(a.sqrt())).scale(1.0 / (1.0 - a).sqrt());
                z = z0.scale(an.sqrt()).add(eps.scale((1.0 - an).sqrt()));
            }
        }
        Ok(z0)
    }
}
