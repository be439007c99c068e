//! Parameterized image corruptions at five severities, and the dataset
//! manifest that records how each degraded sample was produced.
//!
//! Severity schedules (one parameter per level, 1..=5):
//!
//! | kind             | parameter                 | 1    | 2    | 3    | 4    | 5    |
//! |------------------|---------------------------|------|------|------|------|------|
//! | `gaussian_noise` | noise std                 | 0.08 | 0.12 | 0.18 | 0.26 | 0.38 |
//! | `impulse_noise`  | salt-and-pepper fraction  | 0.03 | 0.06 | 0.09 | 0.17 | 0.27 |
//! | `gaussian_blur`  | kernel sigma (pixels)     | 1    | 2    | 3    | 4    | 6    |
//! | `fog`            | haze density              | 0.3  | 0.6  | 0.9  | 1.3  | 1.8  |
//! | `brightness`     | additive offset           | 0.1  | 0.2  | 0.3  | 0.4  | 0.5  |
//! | `contrast`       | contrast factor           | 0.4  | 0.3  | 0.2  | 0.1  | 0.05 |
//!
//! Noise, blur, brightness and contrast follow the common-corruptions
//! benchmark values. Fog blends toward a bright airlight through a
//! transmission `exp(-density * d(x,y))`, where `d` is a smooth random
//! field in `[0.5, 1]`. Severity 0 is accepted and means "no corruption".
//! Outputs are clamped to `[0,1]` after the corruption is applied.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};
use crate::image;
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionType {
    GaussianNoise,
    ImpulseNoise,
    GaussianBlur,
    Fog,
    Brightness,
    Contrast,
}

impl CorruptionType {
    pub const ALL: [CorruptionType; 6] = [
        CorruptionType::GaussianNoise,
        CorruptionType::ImpulseNoise,
        CorruptionType::GaussianBlur,
        CorruptionType::Fog,
        CorruptionType::Brightness,
        CorruptionType::Contrast,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionType::GaussianNoise => "gaussian_noise",
            CorruptionType::ImpulseNoise => "impulse_noise",
            CorruptionType::GaussianBlur => "gaussian_blur",
            CorruptionType::Fog => "fog",
            CorruptionType::Brightness => "brightness",
            CorruptionType::Contrast => "contrast",
        }
    }

    pub fn schedule(self) -> [f64; 5] {
        match self {
            CorruptionType::GaussianNoise => [0.08, 0.12, 0.18, 0.26, 0.38],
            CorruptionType::ImpulseNoise => [0.03, 0.06, 0.09, 0.17, 0.27],
            CorruptionType::GaussianBlur => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionType::Fog => [0.3, 0.6, 0.9, 1.3, 1.8],
            CorruptionType::Brightness => [0.1, 0.2, 0.3, 0.4, 0.5],
            CorruptionType::Contrast => [0.4, 0.3, 0.2, 0.1, 0.05],
        }
    }
}

impl fmt::Display for CorruptionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CorruptionType {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CorruptionType::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Argument(format!("unknown degradation kind {s:?}")))
    }
}

/// A corruption type at a given severity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DegradationKind {
    pub name: CorruptionType,
    pub severity: u8,
}

impl DegradationKind {
    pub fn new(name: CorruptionType, severity: u8) -> Result<Self> {
        if severity > 5 {
            bail!(Argument, "severity must be in 1..=5 (0 = none), got {severity}");
        }
        Ok(DegradationKind { name, severity })
    }

    /// Schedule parameter, `None` at severity 0.
    pub fn parameter(&self) -> Option<f64> {
        (self.severity > 0).then(|| self.name.schedule()[usize::from(self.severity) - 1])
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}_s{}", self.name, self.severity)
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    /// Parses `name:severity`, e.g. `fog:3`.
    fn from_str(s: &str) -> Result<Self> {
        let (name, sev) = s.split_once(':').ok_or_else(|| Error::Argument(format!("expected kind:severity, got {s:?}")))?;
        let severity = sev.trim().parse().map_err(|_| Error::Argument(format!("bad severity in {s:?}")))?;
        DegradationKind::new(name.trim().parse()?, severity)
    }
}

/// Applies `kind` without the final clamp. Accepts `(3,H,W)` or `(B,3,H,W)`;
/// batch items draw from one seeded stream in order.
pub fn apply_unclamped(img: &Tensor, kind: DegradationKind, seed: u64) -> Result<Tensor> {
    image::check_rgb(img)?;
    if kind.severity > 5 {
        bail!(Argument, "severity must be in 1..=5, got {}", kind.severity);
    }
    let Some(p) = kind.parameter() else {
        return Ok(img.clone());
    };
    let mut rng = rng::seeded(seed);
    let s = img.shape().to_vec();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let n_img = img.numel() / (3 * h * w);
    let mut out = img.clone();
    for chunk in out.data_mut().chunks_mut(3 * h * w).take(n_img) {
        match kind.name {
            CorruptionType::GaussianNoise => {
                let dist = Normal::new(0.0, p).expect("finite std");
                chunk.iter_mut().for_each(|v| *v += dist.sample(&mut rng));
            }
            CorruptionType::ImpulseNoise => {
                for v in chunk.iter_mut() {
                    if rng.random::<f64>() < p {
                        *v = if rng.random::<bool>() { 1.0 } else { 0.0 };
                    }
                }
            }
            CorruptionType::GaussianBlur => gaussian_blur(chunk, h, w, p),
            CorruptionType::Fog => fog(chunk, h, w, p, &mut rng),
            CorruptionType::Brightness => chunk.iter_mut().for_each(|v| *v += p),
            CorruptionType::Contrast => {
                for c in chunk.chunks_mut(h * w) {
                    let m = c.iter().sum::<f64>() / (h * w) as f64;
                    c.iter_mut().for_each(|v| *v = (*v - m) * p + m);
                }
            }
        }
    }
    Ok(out)
}

/// Applies `kind` and clamps to `[0,1]`. Deterministic in `(img, kind, seed)`.
pub fn apply_degradation(img: &Tensor, kind: DegradationKind, seed: u64) -> Result<Tensor> {
    let mut out = apply_unclamped(img, kind, seed)?;
    out.map_inplace(|v| v.clamp(0.0, 1.0));
    Ok(out)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let z: f64 = k.iter().sum();
    k.into_iter().map(|v| v / z).collect()
}

/// Separable blur with clamp-to-edge borders, per channel plane.
fn gaussian_blur(chunk: &mut [f64], h: usize, w: usize, sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0; h * w];
    for plane in chunk.chunks_mut(h * w) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * plane[y * w + (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(y as isize + i as isize - r).clamp(0, h as isize - 1) as usize * w + x])
                    .sum();
            }
        }
    }
}

/// Smooth random field in `[0,1]`: bilinear upsampling of a coarse 4x4 grid.
fn haze_field(h: usize, w: usize, rng: &mut rng::Rng) -> Vec<f64> {
    const G: usize = 4;
    let grid: Vec<f64> = (0..G * G).map(|_| rng.random::<f64>()).collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        let gy = y as f64 / (h.max(2) - 1) as f64 * (G - 1) as f64;
        let (y0, ty) = ((gy.floor() as usize).min(G - 2), gy - (gy.floor()).min((G - 2) as f64));
        for x in 0..w {
            let gx = x as f64 / (w.max(2) - 1) as f64 * (G - 1) as f64;
            let (x0, tx) = ((gx.floor() as usize).min(G - 2), gx - (gx.floor()).min((G - 2) as f64));
            let at = |yy: usize, xx: usize| grid[yy * G + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[y * w + x] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

fn fog(chunk: &mut [f64], h: usize, w: usize, density: f64, rng: &mut rng::Rng) {
    const AIRLIGHT: f64 = 0.9;
    let field = haze_field(h, w, rng);
    for plane in chunk.chunks_mut(h * w) {
        for (v, d) in plane.iter_mut().zip(&field) {
            let t = (-density * (0.5 + 0.5 * d)).exp();
            *v = *v * t + AIRLIGHT * (1.0 - t);
        }
    }
}

/// What a manifest entry is labelled with.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    None,
    Class(usize),
    Mask(PathBuf),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub clean_path: PathBuf,
    pub kind: CorruptionType,
    pub severity: u8,
    /// Seed of this entry's corruption realization.
    pub seed: u64,
    pub label: Label,
    /// Pre-rendered degraded image, if one has been written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub degraded_path: Option<PathBuf>,
    /// Class id when the entry has both a mask and a class label.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_id: Option<usize>,
}

impl ManifestEntry {
    pub fn degradation(&self) -> Result<DegradationKind> {
        DegradationKind::new(self.kind, self.severity)
    }

    /// Loads the clean image and the degraded one (rendering it from the
    /// clean image and seed if no file was written).
    pub fn load_pair(&self) -> Result<(Tensor, Tensor)> {
        let clean = image::load_png(&self.clean_path)?;
        let degraded = match &self.degraded_path {
            Some(p) => image::load_png(p)?,
            None => apply_degradation(&clean, self.degradation()?, self.seed)?,
        };
        Ok((clean, degraded))
    }

    pub fn mask_path(&self) -> Option<&Path> {
        match &self.label {
            Label::Mask(p) => Some(p),
            _ => None,
        }
    }

    pub fn class(&self) -> Option<usize> {
        match self.label {
            Label::Class(c) => Some(c),
            _ => self.class_id,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub seed: u64,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    /// SHA-256 of the serialized records.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for e in &self.entries {
            h.update(serde_json::to_vec(e).expect("manifest entries serialize"));
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }

    /// Line-delimited JSON, one record per entry.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
        for e in &self.entries {
            let line = serde_json::to_string(e).expect("manifest entries serialize");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        f.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry =
                serde_json::from_str(&line).map_err(|err| Error::format(path, format!("line {}: {err}", i + 1)))?;
            entries.push(e);
        }
        // the manifest-level seed is not part of the record format
        let mut m = DatasetManifest { seed: 0, entries };
        if let Some(base) = path.parent() {
            m.map_paths(|p| if p.is_relative() { base.join(p) } else { p.to_path_buf() });
        }
        Ok(m)
    }

    fn map_paths(&mut self, f: impl Fn(&Path) -> PathBuf) {
        for e in &mut self.entries {
            e.clean_path = f(&e.clean_path);
            e.degraded_path = e.degraded_path.as_deref().map(&f);
            if let Label::Mask(p) = &e.label {
                e.label = Label::Mask(f(p));
            }
        }
    }

    /// Rewrites paths under `base` as paths relative to it, so the manifest
    /// can live in `base` and be moved with it.
    pub fn relative_to(&mut self, base: &Path) {
        self.map_paths(|p| p.strip_prefix(base).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf()));
    }

    /// Renders every entry into `dir` as `<stem>__<kind>_s<n>.png` and
    /// records the file as the entry's degraded image.
    pub fn render_degraded(&mut self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for e in &mut self.entries {
            let clean = image::load_png(&e.clean_path)?;
            let out = apply_degradation(&clean, e.degradation()?, e.seed)?;
            let stem = e.clean_path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
            let path = dir.join(format!("{stem}__{}.png", e.degradation()?));
            image::save_png(&path, &out)?;
            e.degraded_path = Some(path);
        }
        Ok(())
    }

    /// Every referenced file that does not exist.
    pub fn missing_files(&self) -> Vec<PathBuf> {
        let mut missing = Vec::new();
        for e in &self.entries {
            let mut paths = vec![e.clean_path.clone()];
            paths.extend(e.degraded_path.clone());
            paths.extend(e.mask_path().map(Path::to_path_buf));
            missing.extend(paths.into_iter().filter(|p| !p.exists()));
        }
        missing
    }
}

fn read_class_labels(dir: &Path) -> Result<BTreeMap<String, usize>> {
    let path = dir.join("labels.csv");
    let mut out = BTreeMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (file, class) = line
            .split_once(',')
            .ok_or_else(|| Error::format(&path, format!("line {}: expected file,class_id", i + 1)))?;
        let class = class.trim().parse().map_err(|_| Error::format(&path, format!("line {}: bad class id", i + 1)))?;
        out.insert(file.trim().to_string(), class);
    }
    Ok(out)
}

/// One entry per (image, kind), image-major in file-name order. Masks are
/// picked up from `<stem>.mask.png`, class ids from `labels.csv`.
pub fn build_manifest(clean_dir: &Path, kinds: &[DegradationKind], seed: u64) -> Result<DatasetManifest> {
    let rd = std::fs::read_dir(clean_dir).map_err(|e| Error::io(clean_dir, e))?;
    let mut files: Vec<PathBuf> = Vec::new();
    for entry in rd {
        let p = entry.map_err(|e| Error::io(clean_dir, e))?.path();
        let name = p.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if name.ends_with(".png") && !name.ends_with(".mask.png") {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        bail!(Config, "no PNG images found in {}", clean_dir.display());
    }
    if kinds.is_empty() {
        bail!(Config, "at least one degradation kind is required");
    }
    let classes = read_class_labels(clean_dir)?;
    let mut entries = Vec::with_capacity(files.len() * kinds.len());
    for clean in &files {
        let name = clean.file_name().and_then(|n| n.to_str()).unwrap_or_default().to_string();
        let stem = name.trim_end_matches(".png");
        let mask = clean_dir.join(format!("{stem}.mask.png"));
        let class = classes.get(&name).copied();
        let (label, class_id) = match (mask.exists(), class) {
            (true, c) => (Label::Mask(mask), c),
            (false, Some(c)) => (Label::Class(c), None),
            (false, None) => (Label::None, None),
        };
        for kind in kinds {
            let index = entries.len() as u64;
            entries.push(ManifestEntry {
                clean_path: clean.clone(),
                kind: kind.name,
                severity: kind.severity,
                seed: rng::derive(seed, index),
                label: label.clone(),
                degraded_path: None,
                class_id,
            });
        }
    }
    Ok(DatasetManifest { seed, entries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenes;

    fn kind(name: CorruptionType, s: u8) -> DegradationKind {
        DegradationKind::new(name, s).unwrap()
    }

    #[test]
    fn severity_zero_is_identity_and_six_is_rejected() {
        let img = scenes::generate(16, 1).image;
        for k in CorruptionType::ALL {
            assert_eq!(apply_degradation(&img, kind(k, 0), 3).unwrap(), img);
        }
        assert!(matches!(DegradationKind::new(CorruptionType::Fog, 6), Err(Error::Argument(_))));
        let bad = DegradationKind { name: CorruptionType::Fog, severity: 9 };
        assert!(matches!(apply_degradation(&img, bad, 0), Err(Error::Argument(_))));
    }

    #[test]
    fn non_rgb_is_a_shape_error() {
        let gray = Tensor::zeros(&[1, 8, 8]);
        assert!(matches!(apply_degradation(&gray, kind(CorruptionType::Fog, 1), 0), Err(Error::Shape(_))));
    }

    #[test]
    fn gaussian_noise_std_matches_schedule() {
        // sample-statistics oracle over >= 1e5 pre-clamp pixels
        let img = Tensor::full(&[3, 200, 200], 0.5);
        for s in 1..=5 {
            let k = kind(CorruptionType::GaussianNoise, s);
            let noisy = apply_unclamped(&img, k, 11).unwrap();
            let n = noisy.numel() as f64;
            let resid: Vec<f64> = noisy.data().iter().map(|v| v - 0.5).collect();
            let mean = resid.iter().sum::<f64>() / n;
            let std = (resid.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n).sqrt();
            let sigma = k.parameter().unwrap();
            assert!((std - sigma).abs() / sigma < 0.05, "severity {s}: {std} vs {sigma}");
        }
    }

    #[test]
    fn brightness_on_constant_image() {
        let img = Tensor::full(&[3, 8, 8], 0.2);
        for s in 1..=5 {
            let k = kind(CorruptionType::Brightness, s);
            let out = apply_degradation(&img, k, 0).unwrap();
            let expect = (0.2 + k.parameter().unwrap()).min(1.0);
            assert!(out.data().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn contrast_preserves_channel_mean() {
        let img = scenes::generate(16, 4).image;
        let out = apply_unclamped(&img, kind(CorruptionType::Contrast, 2), 0).unwrap();
        for c in 0..3 {
            let a: f64 = img.data()[c * 256..(c + 1) * 256].iter().sum();
            let b: f64 = out.data()[c * 256..(c + 1) * 256].iter().sum();
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn blur_kernel_is_normalized_and_preserves_constants() {
        let k = gaussian_kernel(2.0);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let img = Tensor::full(&[3, 10, 10], 0.3);
        let out = apply_degradation(&img, kind(CorruptionType::GaussianBlur, 3), 0).unwrap();
        assert!(out.data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn batched_application_is_deterministic() {
        let imgs = image::stack(&[scenes::generate(16, 1).image, scenes::generate(16, 2).image]);
        for k in CorruptionType::ALL {
            let a = apply_degradation(&imgs, kind(k, 3), 5).unwrap();
            assert_eq!(a, apply_degradation(&imgs, kind(k, 3), 5).unwrap());
            assert_eq!(a.shape(), imgs.shape());
            assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn parse_kinds() {
        assert_eq!("fog:3".parse::<DegradationKind>().unwrap(), kind(CorruptionType::Fog, 3));
        assert!("fog".parse::<DegradationKind>().is_err());
        assert!("rain:1".parse::<DegradationKind>().is_err());
    }

    #[test]
    fn manifest_cardinality_and_seeds() {
        let dir = tempfile::tempdir().unwrap();
        scenes::write_dir(dir.path(), &scenes::generate_many(10, 16, 0)).unwrap();
        let kinds = [kind(CorruptionType::Fog, 1), kind(CorruptionType::GaussianNoise, 2), kind(CorruptionType::Contrast, 5)];
        let a = build_manifest(dir.path(), &kinds, 7).unwrap();
        assert_eq!(a.entries.len(), 30);
        assert_eq!(a.digest(), build_manifest(dir.path(), &kinds, 7).unwrap().digest());
        let b = build_manifest(dir.path(), &kinds, 8).unwrap();
        let strip = |m: &DatasetManifest| m.entries.iter().map(|e| (e.clean_path.clone(), e.kind, e.severity)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        // same entries, different noise realizations
        let (_, da) = a.entries[1].load_pair().unwrap();
        let (_, db) = b.entries[1].load_pair().unwrap();
        assert_ne!(da.sum(), db.sum());
        assert!(matches!(a.entries[0].label, Label::Mask(_)));
        assert!(a.entries[0].class().is_some());

        let p = dir.path().join("m.jsonl");
        a.write(&p).unwrap();
        assert_eq!(DatasetManifest::read(&p).unwrap().entries, a.entries);
    }

    #[test]
    fn empty_directory_is_a_config_error() {
        let dir = tempfile::tempdir().unwrap();
        let r = build_manifest(dir.path(), &[kind(CorruptionType::Fog, 1)], 0);
        assert!(matches!(r, Err(Error::Config(_))));
    }
}
