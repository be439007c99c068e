//! Frozen downstream recognizers and the per-task losses that are
//! back-propagated through them into the restorer.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{bail, Error, Result};
use crate::nn::{instance_norm, Builder, Conv2d, ConvInit, Linear, Scope, Session};
use crate::scenes::{IGNORE_LABEL, NUM_CLASSES, NUM_SEG_CLASSES};
use crate::tensor::{ConvGeom, Tensor};

pub const HEADS: &str = "heads";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Pir,
    Classification,
    Segmentation,
}

impl TaskKind {
    pub fn name(self) -> &'static str {
        match self {
            TaskKind::Pir => "pir",
            TaskKind::Classification => "classification",
            TaskKind::Segmentation => "segmentation",
        }
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pir" => Ok(TaskKind::Pir),
            "classification" | "cls" => Ok(TaskKind::Classification),
            "segmentation" | "seg" => Ok(TaskKind::Segmentation),
            _ => bail!(Argument, "unknown task kind {s:?}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: String,
    pub kind: TaskKind,
    pub beta: f64,
    pub manifest: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head_checkpoint: Option<PathBuf>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            bail!(Config, "task {}: beta must be finite and non-negative, got {}", self.task_id, self.beta);
        }
        Ok(())
    }
}

/// Supervision for one batch.
#[derive(Clone, Debug, PartialEq)]
pub enum Target {
    Clean(Tensor),
    Classes(Vec<usize>),
    /// Row-major `(B,H,W)` labels.
    Masks(Vec<u8>),
}

#[derive(Clone, Debug)]
pub struct Classifier {
    convs: Vec<Conv2d>,
    fc: Linear,
}

impl Classifier {
    pub fn new(b: &mut Builder) -> Self {
        let sc = Scope::new(HEADS).pp("classifier");
        let geom = ConvGeom { stride: 2, padding: 1, groups: 1 };
        let widths = [3, 16, 32, 64, 64];
        let convs = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let g = if i == 0 { ConvGeom { stride: 1, ..geom } } else { geom };
                Conv2d::new(b, &sc.pp(format!("conv{i}")), w[0], w[1], 3, g, true, ConvInit::He)
            })
            .collect();
        let fc = Linear::new(b, &sc.pp("fc"), 64, NUM_CLASSES, ConvInit::Default);
        Classifier { convs, fc }
    }

    /// `(B,3,H,W)` → `(B,K)` logits.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let mut h = instance_norm(x);
        for c in &self.convs {
            h = c.forward(s, h).gelu();
        }
        self.fc.forward(s, h.mean_axes(&[2, 3], false))
    }
}

#[derive(Clone, Debug)]
pub struct Segmenter {
    stem: Conv2d,
    down1: Conv2d,
    down2: Conv2d,
    mid: Conv2d,
    up: Conv2d,
    out: Conv2d,
}

impl Segmenter {
    pub fn new(b: &mut Builder) -> Self {
        let sc = Scope::new(HEADS).pp("segmenter");
        let s2 = ConvGeom { stride: 2, padding: 1, groups: 1 };
        Segmenter {
            stem: Conv2d::same(b, &sc.pp("stem"), 3, 16, 3, ConvInit::He),
            down1: Conv2d::new(b, &sc.pp("down1"), 16, 32, 3, s2, true, ConvInit::He),
            down2: Conv2d::new(b, &sc.pp("down2"), 32, 32, 3, s2, true, ConvInit::He),
            mid: Conv2d::same(b, &sc.pp("mid"), 32, 32, 3, ConvInit::He),
            up: Conv2d::same(b, &sc.pp("up"), 32, 16, 3, ConvInit::He),
            out: Conv2d::same(b, &sc.pp("out"), 32, NUM_SEG_CLASSES, 3, ConvInit::Default),
        }
    }

    /// `(B,3,H,W)` → `(B,S,H,W)` logits.
    pub fn forward<'t>(&self, s: &Session<'t>, x: Var<'t>) -> Var<'t> {
        let full = self.stem.forward(s, x).gelu();
        let h = self.down1.forward(s, full).gelu();
        let h = self.down2.forward(s, h).gelu();
        let h = self.mid.forward(s, h).gelu().upsample2x();
        let h = self.up.forward(s, h).gelu().upsample2x();
        self.out.forward(s, Var::cat(&[full, h], 1))
    }
}

#[derive(Clone, Debug)]
pub struct Heads {
    pub classifier: Classifier,
    pub segmenter: Segmenter,
}

impl Heads {
    pub fn new(b: &mut Builder) -> Self {
        Heads { classifier: Classifier::new(b), segmenter: Segmenter::new(b) }
    }
}

/// Mean cross-entropy of `(B,K)` logits against class ids.
pub fn cross_entropy<'t>(logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let sh = logits.shape();
    if sh.len() != 2 || sh[0] != labels.len() || labels.is_empty() {
        bail!(Shape, "logits {sh:?} for {} labels", labels.len());
    }
    let k = sh[1];
    let mut onehot = Tensor::zeros(&sh);
    for (i, &l) in labels.iter().enumerate() {
        if l >= k {
            bail!(Argument, "class id {l} outside 0..{k}");
        }
        onehot.data_mut()[i * k + l] = 1.0;
    }
    let lp = logits.log_softmax(1);
    Ok(lp.mul(logits.tape().constant(onehot)).sum_all().scale(-1.0 / labels.len() as f64))
}

/// Per-pixel cross-entropy of `(B,S,H,W)` logits against masks, skipping
/// ignore-labelled pixels. Zero (with zero gradient) when every pixel is ignored.
pub fn pixel_cross_entropy<'t>(logits: Var<'t>, masks: &[u8]) -> Result<Var<'t>> {
    let sh = logits.shape();
    let (b, k, h, w) = (sh[0], sh[1], sh[2], sh[3]);
    if masks.len() != b * h * w {
        bail!(Shape, "{} mask pixels for logits {sh:?}", masks.len());
    }
    let mut onehot = Tensor::zeros(&sh);
    let mut valid = 0usize;
    for (p, &m) in masks.iter().enumerate() {
        if m == IGNORE_LABEL {
            continue;
        }
        if usize::from(m) >= k {
            bail!(Argument, "mask label {m} outside 0..{k}");
        }
        let (bi, rest) = (p / (h * w), p % (h * w));
        onehot.data_mut()[(bi * k + usize::from(m)) * h * w + rest] = 1.0;
        valid += 1;
    }
    if valid == 0 {
        return Ok(logits.sum_all().scale(0.0));
    }
    let lp = logits.log_softmax(1);
    Ok(lp.mul(logits.tape().constant(onehot)).sum_all().scale(-1.0 / valid as f64))
}

/// Loss of a restored batch for one task.
pub fn task_loss<'t>(s: &Session<'t>, restored: Var<'t>, kind: TaskKind, target: &Target, heads: &Heads) -> Result<Var<'t>> {
    match (kind, target) {
        (TaskKind::Pir, Target::Clean(clean)) => {
            if restored.shape() != clean.shape() {
                bail!(Shape, "restored {:?} vs clean {:?}", restored.shape(), clean.shape());
            }
            Ok(restored.sub(s.constant(clean.clone())).sqr().mean_all())
        }
        (TaskKind::Classification, Target::Classes(labels)) => {
            cross_entropy(heads.classifier.forward(s, restored), labels)
        }
        (TaskKind::Segmentation, Target::Masks(masks)) => {
            pixel_cross_entropy(heads.segmenter.forward(s, restored), masks)
        }
        (kind, _) => bail!(Argument, "target does not match task kind {kind}"),
    }
}

/// `Σ β_i L_i`.
pub fn combined_stage2_loss<'t>(terms: &[(f64, Var<'t>)]) -> Result<Var<'t>> {
    let Some(first) = terms.first() else {
        bail!(Argument, "at least one task loss is required");
    };
    if let Some((beta, _)) = terms.iter().find(|(b, _)| !(b.is_finite() && *b >= 0.0)) {
        bail!(Config, "task weight must be finite and non-negative, got {beta}");
    }
    let mut total = first.1.scale(first.0);
    for (beta, l) in &terms[1..] {
        total = total.add(l.scale(*beta));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::Tape;
    use crate::nn::ParamStore;
    use crate::rng;

    fn heads() -> (ParamStore, Heads) {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(0);
        let h = Heads::new(&mut Builder::new(&mut store, &mut r));
        (store, h)
    }

    #[test]
    fn pir_loss_is_zero_on_identity() {
        let (store, h) = heads();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let x = Tensor::full(&[1, 3, 8, 8], 0.3);
        let l = task_loss(&s, s.constant(x.clone()), TaskKind::Pir, &Target::Clean(x), &h).unwrap();
        assert_eq!(l.value().item(), 0.0);
    }

    #[test]
    fn two_class_uniform_logits() {
        let tape = Tape::new();
        let l = cross_entropy(tape.constant(Tensor::zeros(&[1, 2])), &[0]).unwrap();
        assert!((l.value().item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_ignored_segmentation_is_zero_with_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::randn(&[1, 4, 3, 3], 1.0, &mut rng::seeded(1)));
        let l = pixel_cross_entropy(x, &[IGNORE_LABEL; 9]).unwrap();
        assert_eq!(l.value().item(), 0.0);
        let g = tape.backward(l);
        assert_eq!(g.get(x).unwrap().abs_max(), 0.0);
    }

    #[test]
    fn segmentation_matches_direct_sum() {
        let mut r = rng::seeded(2);
        let logits = Tensor::randn(&[2, 3, 2, 2], 1.0, &mut r);
        let masks = [0u8, 1, 2, IGNORE_LABEL, 2, 2, 0, 1];
        let tape = Tape::new();
        let l = pixel_cross_entropy(tape.constant(logits.clone()), &masks).unwrap().value().item();
        let mut total = 0.0;
        let mut n = 0.0;
        for (p, &m) in masks.iter().enumerate() {
            if m == IGNORE_LABEL {
                continue;
            }
            let (b, rest) = (p / 4, p % 4);
            let z: Vec<f64> = (0..3).map(|c| logits.data()[(b * 3 + c) * 4 + rest]).collect();
            let lse = z.iter().map(|v| v.exp()).sum::<f64>().ln();
            total += lse - z[m as usize];
            n += 1.0;
        }
        assert!((l - total / n).abs() < 1e-12);
    }

    #[test]
    fn mismatched_target_is_an_argument_error() {
        let (store, h) = heads();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let x = s.constant(Tensor::zeros(&[1, 3, 8, 8]));
        let r = task_loss(&s, x, TaskKind::Classification, &Target::Masks(vec![0; 64]), &h);
        assert!(matches!(r, Err(Error::Argument(_))));
    }

    #[test]
    fn combined_loss_arithmetic() {
        let tape = Tape::new();
        let c = |v: f64| tape.constant(Tensor::scalar(v));
        let l = combined_stage2_loss(&[(1.0, c(0.5)), (1.0, c(0.2)), (1.0, c(0.3))]).unwrap();
        assert!((l.value().item() - 1.0).abs() < 1e-12);
        let x = tape.leaf(Tensor::scalar(2.0));
        let z = combined_stage2_loss(&[(0.0, x.sqr()), (0.0, x)]).unwrap();
        assert_eq!(z.value().item(), 0.0);
        assert_eq!(tape.backward(z).get(x).unwrap().item(), 0.0);
        assert!(matches!(combined_stage2_loss(&[(-1.0, c(1.0))]), Err(Error::Config(_))));
        assert!(combined_stage2_loss(&[]).is_err());
    }

    #[test]
    fn head_shapes() {
        let (store, h) = heads();
        let tape = Tape::new();
        let s = Session::inference(&tape, &store);
        let x = s.constant(Tensor::full(&[2, 3, 64, 64], 0.5));
        assert_eq!(h.classifier.forward(&s, x).shape(), vec![2, NUM_CLASSES]);
        assert_eq!(h.segmenter.forward(&s, x).shape(), vec![2, NUM_SEG_CLASSES, 64, 64]);
    }
}
