//! Complementary feature restoration: a residual block applied to every
//! encoder feature map.
//!
//! ```text
//! e   = naf(x)                                  (C',H,W)
//! u   = groupnorm_l(expand(e))                  (4C',H,W) = l groups of C''
//! a_g = sigmoid(gconv2(avgpool(gelu(gconv1(u)))))_g    per-group channel weights (C'',1,1)
//! v   = u * a
//! w   = sigmoid(conv(avgpool(v)))               inter-group weights (l,1,1)
//! out = e + recover(v * w[group])
//! ```
//!
//! With the NAF projection and `recover` zero-initialized (the default) the
//! block is an exact identity.

use crate::autograd::Var;
use crate::backbone::{FeatureHook, FeaturePyramid};
use crate::error::{bail, Result};
use crate::nn::{Builder, Conv2d, ConvInit, GroupNorm, NafBlock, Scope, Session};
use crate::tensor::ConvGeom;

pub const CFRM: &str = "cfrm";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CfrmConfig {
    pub in_channels: usize,
    pub groups: usize,
}

impl CfrmConfig {
    pub fn new(in_channels: usize, groups: usize) -> Result<Self> {
        if in_channels == 0 || groups == 0 || !(4 * in_channels).is_multiple_of(groups) {
            bail!(Config, "4*{in_channels} channels cannot be split into {groups} groups");
        }
        Ok(CfrmConfig { in_channels, groups })
    }

    /// `C'' = 4C'/l`.
    pub fn group_channels(&self) -> usize {
        4 * self.in_channels / self.groups
    }

    pub fn expanded(&self) -> usize {
        4 * self.in_channels
    }
}

#[derive(Clone, Debug)]
pub struct CfrmBlock {
    config: CfrmConfig,
    naf: NafBlock,
    expand: Conv2d,
    norm: GroupNorm,
    intra1: Conv2d,
    intra2: Conv2d,
    inter: Conv2d,
    recover: Conv2d,
}

impl CfrmBlock {
    pub fn new(b: &mut Builder, scope: &Scope, config: CfrmConfig) -> Self {
        let (c, x, l) = (config.in_channels, config.expanded(), config.groups);
        let grouped = ConvGeom { stride: 1, padding: 0, groups: l };
        CfrmBlock {
            config,
            naf: NafBlock::new(b, &scope.pp("naf"), c, ConvInit::Zeros),
            expand: Conv2d::same(b, &scope.pp("expand"), c, x, 1, ConvInit::Default),
            norm: GroupNorm::new(b, &scope.pp("norm"), l, x),
            intra1: Conv2d::new(b, &scope.pp("intra1"), x, x, 1, grouped, true, ConvInit::Default),
            intra2: Conv2d::new(b, &scope.pp("intra2"), x, x, 1, grouped, true, ConvInit::Default),
            inter: Conv2d::same(b, &scope.pp("inter"), x, l, 1, ConvInit::Default),
            recover: Conv2d::same(b, &scope.pp("recover"), x, c, 1, ConvInit::Zeros),
        }
    }

    pub fn config(&self) -> &CfrmConfig {
        &self.config
    }

    /// Enhancement stage: NAF block, then the expanded and group-normalized
    /// features. Returns `(e, u)`.
    pub fn enhance<'t>(&self, s: &Session<'t>, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let e = self.naf.forward(s, x);
        let u = self.norm.forward(s, self.expand.forward(s, e));
        (e, u)
    }

    /// Intra-group channel weights `(B, 4C', 1, 1)`; channels `g*C''..(g+1)*C''`
    /// hold `W_intra^g`.
    pub fn intra_weights<'t>(&self, s: &Session<'t>, u: Var<'t>) -> Var<'t> {
        let h = self.intra1.forward(s, u).gelu().mean_axes(&[2, 3], true);
        self.intra2.forward(s, h).sigmoid()
    }

    /// Inter-group weights `(B, l, 1, 1)`.
    pub fn inter_weights<'t>(&self, s: &Session<'t>, v: Var<'t>) -> Var<'t> {
        self.inter.forward(s, v.mean_axes(&[2, 3], true)).sigmoid()
    }

    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let sh = x.shape();
        if sh.len() != 4 || sh[1] != self.config.in_channels {
            bail!(Shape, "restoration block expects (B,{},H,W), got {sh:?}", self.config.in_channels);
        }
        Ok(self.forward_unchecked(s, x))
    }

    fn forward_unchecked<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let sh = x.shape();
        let (b, h, w) = (sh[0], sh[2], sh[3]);
        let (l, cg) = (self.config.groups, self.config.group_channels());
        let (e, u) = self.enhance(s, x);
        let v = u.mul(self.intra_weights(s, u));
        let wi = self.inter_weights(s, v).reshape(&[b, l, 1]);
        let v = v.reshape(&[b, l, cg * h * w]).mul(wi).reshape(&[b, l * cg, h, w]);
        e.add(self.recover.forward(s, v))
    }
}

/// One block per encoder layer, all in the `cfrm` group.
#[derive(Clone, Debug)]
pub struct CfrmStack {
    blocks: Vec<CfrmBlock>,
}

impl CfrmStack {
    pub fn new(b: &mut Builder, channels: &[usize], groups: usize) -> Result<Self> {
        let scope = Scope::new(CFRM);
        let blocks = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| Ok(CfrmBlock::new(b, &scope.pp(format!("layer{i}")), CfrmConfig::new(c, groups)?)))
            .collect::<Result<_>>()?;
        Ok(CfrmStack { blocks })
    }

    pub fn blocks(&self) -> &[CfrmBlock] {
        &self.blocks
    }
}

impl<'t> FeatureHook<'t> for CfrmStack {
    fn apply(&self, s: &Session<'t>, layer: usize, f: Var<'t>) -> Var<'t> {
        self.blocks[layer].forward_unchecked(s, f)
    }
}

/// `Σ_i λ_i · mean|clear_i - restored_i|`.
pub fn cfrm_feature_loss<'t>(
    restored: &FeaturePyramid<'t>,
    clear: &FeaturePyramid<'t>,
    lambdas: &[f64],
) -> Result<Var<'t>> {
    if restored.len() != clear.len() || lambdas.len() != clear.len() || clear.is_empty() {
        bail!(
            Shape,
            "pyramids of {} and {} levels with {} weights",
            restored.len(),
            clear.len(),
            lambdas.len()
        );
    }
    if lambdas.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
        bail!(Config, "layer weights must be finite and non-negative: {lambdas:?}");
    }
    let mut total = None;
    for ((r, c), &lam) in restored.features.iter().zip(&clear.features).zip(lambdas) {
        if r.shape() != c.shape() {
            bail!(Shape, "restored feature {:?} vs clear {:?}", r.shape(), c.shape());
        }
        let term = c.sub(*r).abs().mean_all().scale(lam);
        total = Some(match total {
            None => term,
            Some(t) => term.add(t),
        });
    }
    Ok(total.expect("non-empty pyramid"))
}
