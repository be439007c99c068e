//! PSNR / SSIM for restoration, accuracy and mIoU for recognition, and the
//! evaluation report.

use std::collections::BTreeMap;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use sha2::{Digest, Sha256};

use crate::error::{bail, Result};
use crate::tensor::Tensor;

fn image_views(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize, usize)> {
    if a.shape() != b.shape() {
        bail!(Shape, "metric inputs differ in shape: {:?} vs {:?}", a.shape(), b.shape());
    }
    match *a.shape() {
        [c, h, w] => Ok((1, c, h, w)),
        [n, c, h, w] => Ok((n, c, h, w)),
        ref s => bail!(Shape, "expected (C,H,W) or (B,C,H,W), got {s:?}"),
    }
}

/// Per-image `10·log10(max²/MSE)`, averaged over the batch. Identical
/// images give `f64::INFINITY`.
pub fn psnr(a: &Tensor, b: &Tensor, max_val: f64) -> Result<f64> {
    let (n, c, h, w) = image_views(a, b)?;
    let per = c * h * w;
    let mut total = 0.0;
    for i in 0..n {
        let (x, y) = (&a.data()[i * per..(i + 1) * per], &b.data()[i * per..(i + 1) * per]);
        let mse = x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() / per as f64;
        total += if mse == 0.0 { f64::INFINITY } else { 10.0 * (max_val * max_val / mse).log10() };
    }
    Ok(total / n as f64)
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = g.iter().sum();
    g.into_iter().map(|v| v / z).collect()
}

/// Separable "valid" filtering of an `h×w` plane.
fn filter_valid(x: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for xo in 0..ow {
            rows[y * ow + xo] = (0..n).map(|j| k[j] * x[y * w + xo + j]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for yo in 0..oh {
        for xo in 0..ow {
            out[yo * ow + xo] = (0..n).map(|j| k[j] * rows[(yo + j) * ow + xo]).sum();
        }
    }
    out
}

/// Gaussian-window SSIM with `C1=(0.01·max)²`, `C2=(0.03·max)²`, averaged
/// over all valid windows, channels and images.
pub fn ssim(a: &Tensor, b: &Tensor, window: usize, sigma: f64, max_val: f64) -> Result<f64> {
    let (n, c, h, w) = image_views(a, b)?;
    if window == 0 || h < window || w < window {
        bail!(Argument, "image {h}x{w} is smaller than the {window}x{window} window");
    }
    let k = gaussian_window(window, sigma);
    let (c1, c2) = ((0.01 * max_val).powi(2), (0.03 * max_val).powi(2));
    let plane = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n * c {
        let x = &a.data()[p * plane..(p + 1) * plane];
        let y = &b.data()[p * plane..(p + 1) * plane];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
        let (mx, my) = (filter_valid(x, h, w, &k), filter_valid(y, h, w, &k));
        let (sxx, syy, sxy) = (filter_valid(&xx, h, w, &k), filter_valid(&yy, h, w, &k), filter_valid(&xy, h, w, &k));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let (vx, vy, cov) = (sxx[i] - ux * ux, syy[i] - uy * uy, sxy[i] - ux * uy);
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
        }
        count += mx.len();
    }
    Ok(total / count as f64)
}

/// Default-parameter SSIM (11×11 window, σ = 1.5, max 1).
pub fn ssim_default(a: &Tensor, b: &Tensor) -> Result<f64> {
    ssim(a, b, 11, 1.5, 1.0)
}

/// Index of the largest entry, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Fraction of rows of `(B,K)` logits whose argmax equals the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let sh = logits.shape();
    if labels.is_empty() {
        bail!(Argument, "accuracy of an empty batch");
    }
    if sh.len() != 2 || sh[0] != labels.len() {
        bail!(Shape, "logits {sh:?} for {} labels", labels.len());
    }
    let hits = logits.data().chunks(sh[1]).zip(labels).filter(|(row, &l)| argmax(row) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Per-pixel argmax of `(B,S,H,W)` logits as a flat `(B,H,W)` mask.
pub fn predict_mask(logits: &Tensor) -> Vec<u8> {
    let s = logits.shape();
    let (b, k, hw) = (s[0], s[1], s[2] * s[3]);
    let mut out = Vec::with_capacity(b * hw);
    let mut col = vec![0.0; k];
    for bi in 0..b {
        for p in 0..hw {
            for (c, v) in col.iter_mut().enumerate() {
                *v = logits.data()[(bi * k + c) * hw + p];
            }
            out.push(argmax(&col) as u8);
        }
    }
    out
}

/// Mean IoU; `value` is NaN and `defined` false when no pixel is scored.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Miou {
    pub value: f64,
    pub defined: bool,
}

/// Intersection and union counts per class, ignore pixels excluded.
pub fn iou_counts(pred: &[u8], truth: &[u8], num_classes: usize, ignore: u8) -> Result<Vec<(u64, u64)>> {
    if pred.len() != truth.len() {
        bail!(Shape, "prediction has {} pixels, truth {}", pred.len(), truth.len());
    }
    let mut counts = vec![(0u64, 0u64); num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == ignore || t == ignore {
            continue;
        }
        let (pi, ti) = (usize::from(p), usize::from(t));
        if pi >= num_classes || ti >= num_classes {
            bail!(Argument, "class id {} outside 0..{num_classes}", pi.max(ti));
        }
        if pi == ti {
            counts[pi].0 += 1;
            counts[pi].1 += 1;
        } else {
            counts[pi].1 += 1;
            counts[ti].1 += 1;
        }
    }
    Ok(counts)
}

pub fn miou_from_counts(counts: &[(u64, u64)]) -> Miou {
    let ious: Vec<f64> = counts.iter().filter(|(_, u)| *u > 0).map(|&(i, u)| i as f64 / u as f64).collect();
    if ious.is_empty() {
        Miou { value: f64::NAN, defined: false }
    } else {
        Miou { value: ious.iter().sum::<f64>() / ious.len() as f64, defined: true }
    }
}

/// Mean over classes present in prediction or truth of `|∩|/|∪|`.
pub fn miou(pred: &[u8], truth: &[u8], num_classes: usize, ignore: u8) -> Result<Miou> {
    Ok(miou_from_counts(&iou_counts(pred, truth, num_classes, ignore)?))
}

/// A metric value that serializes non-finite numbers as `"inf"`, `"-inf"` or `"nan"`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metric(pub f64);

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self.0 {
            v if v.is_nan() => s.serialize_str("nan"),
            v if v == f64::INFINITY => s.serialize_str("inf"),
            v if v == f64::NEG_INFINITY => s.serialize_str("-inf"),
            v => s.serialize_f64(v),
        }
    }
}

impl<'de> Deserialize<'de> for Metric {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) => Ok(Metric(v)),
            Raw::Str(s) => match s.as_str() {
                "nan" => Ok(Metric(f64::NAN)),
                "inf" => Ok(Metric(f64::INFINITY)),
                "-inf" => Ok(Metric(f64::NEG_INFINITY)),
                other => Err(serde::de::Error::custom(format!("bad metric value {other:?}"))),
            },
        }
    }
}

/// One cell of the evaluation table. `source` is `lq` for the degraded
/// input and `restored` for model output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub source: String,
    pub task: String,
    pub degradation: String,
    pub metric: String,
    pub value: Metric,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_digest: String,
    pub checkpoint_digest: String,
    /// `source/task/metric` → value over all degradations.
    pub summary: BTreeMap<String, Metric>,
    pub rows: Vec<MetricRow>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn summary_value(&self, source: &str, task: &str, metric: &str) -> Option<f64> {
        self.summary.get(&format!("{source}/{task}/{metric}")).map(|m| m.0)
    }

    /// `source,task,degradation,metric,value,samples` lines.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("source,task,degradation,metric,value,samples\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.source, r.task, r.degradation, r.metric, r.value.0, r.samples));
        }
        out
    }
}
