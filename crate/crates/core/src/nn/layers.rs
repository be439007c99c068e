use crate::autograd::Var;
use crate::tensor::{ConvGeom, Tensor};

use super::{Builder, ParamKey, Scope, Session};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvInit {
    /// Uniform in ±1/sqrt(fan_in), the usual framework default.
    Default,
    /// Uniform in ±sqrt(6/fan_in), for convs followed by a rectifier.
    He,
    /// All-zero weight and bias, so the layer starts as a no-op branch.
    Zeros,
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    weight: ParamKey,
    bias: Option<ParamKey>,
    geom: ConvGeom,
    cin: usize,
    cout: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        b: &mut Builder,
        scope: &Scope,
        cin: usize,
        cout: usize,
        kernel: usize,
        geom: ConvGeom,
        bias: bool,
        init: ConvInit,
    ) -> Self {
        assert!(cin.is_multiple_of(geom.groups) && cout.is_multiple_of(geom.groups));
        let shape = [cout, cin / geom.groups, kernel, kernel];
        let fan_in = (cin / geom.groups * kernel * kernel) as f64;
        let bound = match init {
            ConvInit::Default => 1.0 / fan_in.sqrt(),
            ConvInit::He => (6.0 / fan_in).sqrt(),
            ConvInit::Zeros => 0.0,
        };
        let w = Tensor::uniform(&shape, -bound, bound, b.rng);
        let weight = b.add(scope.key("weight"), w);
        let bias = bias.then(|| {
            let bb = if init == ConvInit::He { 0.0 } else { bound };
            let t = Tensor::uniform(&[cout], -bb, bb, b.rng);
            b.add(scope.key("bias"), t)
        });
        Conv2d { weight, bias, geom, cin, cout }
    }

    /// `kernel`×`kernel`, stride 1, "same" padding.
    pub fn same(b: &mut Builder, scope: &Scope, cin: usize, cout: usize, kernel: usize, init: ConvInit) -> Self {
        let geom = ConvGeom { stride: 1, padding: kernel / 2, groups: 1 };
        Conv2d::new(b, scope, cin, cout, kernel, geom, true, init)
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let w = s.param(&self.weight);
        let b = self.bias.as_ref().map(|k| s.param(k));
        x.conv2d(w, b, self.geom)
    }

    pub fn in_channels(&self) -> usize {
        self.cin
    }

    pub fn out_channels(&self) -> usize {
        self.cout
    }
}

/// `y = x W + b` on `(B, in)` inputs.
#[derive(Clone, Debug)]
pub struct Linear {
    weight: ParamKey,
    bias: ParamKey,
}

impl Linear {
    pub fn new(b: &mut Builder, scope: &Scope, din: usize, dout: usize, init: ConvInit) -> Self {
        let bound = match init {
            ConvInit::Default => 1.0 / (din as f64).sqrt(),
            ConvInit::He => (6.0 / din as f64).sqrt(),
            ConvInit::Zeros => 0.0,
        };
        let w = Tensor::uniform(&[din, dout], -bound, bound, b.rng);
        let weight = b.add(scope.key("weight"), w);
        let bt = Tensor::uniform(&[dout], -bound, bound, b.rng);
        let bias = b.add(scope.key("bias"), bt);
        Linear { weight, bias }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        x.matmul(s.param(&self.weight)).add(s.param(&self.bias))
    }
}

/// Normalizes `(B,C,H,W)` over each of `groups` channel groups and the
/// spatial extent, without affine parameters.
fn normalize_groups<'t>(x: Var<'t>, groups: usize, eps: f64) -> Var<'t> {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let xg = x.reshape(&[b, groups, (c / groups) * h * w]);
    let mu = xg.mean_axes(&[2], true);
    let centered = xg.sub(mu);
    let var = centered.sqr().mean_axes(&[2], true);
    centered.div(var.add_scalar(eps).sqrt()).reshape(&s)
}

/// Per-sample, per-channel normalization (no affine).
pub fn instance_norm<'t>(x: Var<'t>) -> Var<'t> {
    let c = x.shape()[1];
    normalize_groups(x, c, 1e-5)
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    groups: usize,
    gamma: ParamKey,
    beta: ParamKey,
}

impl GroupNorm {
    pub fn new(b: &mut Builder, scope: &Scope, groups: usize, channels: usize) -> Self {
        assert_eq!(channels % groups, 0, "group norm: {channels} channels into {groups} groups");
        let gamma = b.add(scope.key("gamma"), Tensor::ones(&[1, channels, 1, 1]));
        let beta = b.add(scope.key("beta"), Tensor::zeros(&[1, channels, 1, 1]));
        GroupNorm { groups, gamma, beta }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        normalize_groups(x, self.groups, 1e-5).mul(s.param(&self.gamma)).add(s.param(&self.beta))
    }
}

/// Layer norm across channels at every pixel.
#[derive(Clone, Debug)]
pub struct LayerNorm2d {
    gamma: ParamKey,
    beta: ParamKey,
}

impl LayerNorm2d {
    pub fn new(b: &mut Builder, scope: &Scope, channels: usize) -> Self {
        let gamma = b.add(scope.key("gamma"), Tensor::ones(&[1, channels, 1, 1]));
        let beta = b.add(scope.key("beta"), Tensor::zeros(&[1, channels, 1, 1]));
        LayerNorm2d { gamma, beta }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let mu = x.mean_axes(&[1], true);
        let centered = x.sub(mu);
        let var = centered.sqr().mean_axes(&[1], true);
        centered.div(var.add_scalar(1e-6).sqrt()).mul(s.param(&self.gamma)).add(s.param(&self.beta))
    }
}

/// Simplified nonlinear-activation-free block:
/// `x + proj(SCA(gate(dw(expand(LN(x))))))`.
///
/// `proj` can be zero-initialised to make the whole block an identity map.
#[derive(Clone, Debug)]
pub struct NafBlock {
    norm: LayerNorm2d,
    expand: Conv2d,
    depthwise: Conv2d,
    sca: Conv2d,
    proj: Conv2d,
}

impl NafBlock {
    pub fn new(b: &mut Builder, scope: &Scope, channels: usize, proj_init: ConvInit) -> Self {
        let c2 = 2 * channels;
        let norm = LayerNorm2d::new(b, &scope.pp("norm"), channels);
        let expand = Conv2d::same(b, &scope.pp("expand"), channels, c2, 1, ConvInit::Default);
        let dw = ConvGeom { stride: 1, padding: 1, groups: c2 };
        let depthwise = Conv2d::new(b, &scope.pp("dw"), c2, c2, 3, dw, true, ConvInit::Default);
        let sca = Conv2d::same(b, &scope.pp("sca"), channels, channels, 1, ConvInit::Default);
        let proj = Conv2d::same(b, &scope.pp("proj"), channels, channels, 1, proj_init);
        NafBlock { norm, expand, depthwise, sca, proj }
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let h = self.norm.forward(s, x);
        let h = self.depthwise.forward(s, self.expand.forward(s, h));
        let c = h.shape()[1] / 2;
        // simple gate: split channels in half and multiply
        let h = h.narrow(1, 0, c).mul(h.narrow(1, c, c));
        let att = self.sca.forward(s, h.mean_axes(&[2, 3], true));
        let h = self.proj.forward(s, h.mul(att));
        x.add(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::ParamStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_norm_normalizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let gn = GroupNorm::new(&mut Builder::new(&mut store, &mut rng), &Scope::new("g"), 2, 4);
        let x = Tensor::randn(&[2, 4, 3, 3], 3.0, &mut rng).map(|v| v + 5.0);
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let y = gn.forward(&s, tape.constant(x)).value();
        for chunk in y.data().chunks(18) {
            let m: f64 = chunk.iter().sum::<f64>() / 18.0;
            let v: f64 = chunk.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 18.0;
            assert!(m.abs() < 1e-10);
            assert!((v - 1.0).abs() < 1e-4);
        }
    }

    #[test]
    fn naf_block_with_zero_projection_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let blk = NafBlock::new(&mut Builder::new(&mut store, &mut rng), &Scope::new("n"), 4, ConvInit::Zeros);
        let x = Tensor::randn(&[1, 4, 5, 5], 1.0, &mut rng);
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let y = blk.forward(&s, tape.constant(x.clone())).value();
        assert_eq!(*y, x);
    }
}
