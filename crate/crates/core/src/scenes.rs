//! Procedural toy scenes: colored shapes over a softly textured background,
//! with exact classification and segmentation labels.
//!
//! Each scene has one large "dominant" shape plus up to two small
//! distractors. The classification label is the kind of the shape with the
//! most visible pixels; the segmentation mask maps each pixel to a shape
//! family (see [`ShapeKind::seg_class`]).

use std::io::Write;
use std::path::Path;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::image;
use crate::rng;
use crate::tensor::Tensor;

pub const NUM_CLASSES: usize = 4;
pub const NUM_SEG_CLASSES: usize = 4;
pub const IGNORE_LABEL: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle, ShapeKind::Cross];

    pub fn class_id(self) -> usize {
        self as usize
    }

    /// 0 is background; squares and crosses share the rectilinear class.
    pub fn seg_class(self) -> u8 {
        match self {
            ShapeKind::Circle => 1,
            ShapeKind::Square | ShapeKind::Cross => 2,
            ShapeKind::Triangle => 3,
        }
    }

    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Circle => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            ShapeKind::Triangle => {
                // upright isosceles triangle inscribed in the radius-r box
                let t = (dy + r) / (2.0 * r);
                (-r..=r).contains(&dy) && dx.abs() <= r * t
            }
            ShapeKind::Cross => {
                let arm = r * 0.35;
                (dx.abs() <= r && dy.abs() <= arm) || (dy.abs() <= r && dx.abs() <= arm)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `(3,H,W)` in `[0,1]`.
    pub image: Tensor,
    pub class_id: usize,
    /// Row-major `H*W` segmentation labels.
    pub mask: Vec<u8>,
}

struct Placed {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    color: [f64; 3],
}

fn random_color(rng: &mut rng::Rng, avoid: &[f64; 3]) -> [f64; 3] {
    loop {
        let c = [rng.random_range(0.05..0.95), rng.random_range(0.05..0.95), rng.random_range(0.05..0.95)];
        let d: f64 = c.iter().zip(avoid).map(|(a, b)| (a - b).abs()).sum();
        if d > 0.6 {
            return c;
        }
    }
}

pub fn generate(size: usize, seed: u64) -> Scene {
    let mut rng = rng::seeded(seed);
    let s = size as f64;
    let bg = [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
    let (fx, fy) = (rng.random_range(0.5..2.0), rng.random_range(0.5..2.0));
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let tex_amp = rng.random_range(0.03..0.08);
    let grad = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];

    let mut shapes = Vec::new();
    let dominant_r = rng.random_range(0.2 * s..0.3 * s);
    let margin = dominant_r + 1.0;
    shapes.push(Placed {
        kind: ShapeKind::ALL[rng.random_range(0..4)],
        cx: rng.random_range(margin..s - margin),
        cy: rng.random_range(margin..s - margin),
        r: dominant_r,
        color: random_color(&mut rng, &bg),
    });
    for _ in 0..rng.random_range(0..=2) {
        let r = rng.random_range(0.07 * s..0.12 * s);
        shapes.push(Placed {
            kind: ShapeKind::ALL[rng.random_range(0..4)],
            cx: rng.random_range(r..s - r),
            cy: rng.random_range(r..s - r),
            r,
            color: random_color(&mut rng, &bg),
        });
    }

    let hw = size * size;
    let mut data = vec![0.0; 3 * hw];
    let mut owner = vec![usize::MAX; hw];
    // 2x2 supersampling for the color, pixel-center test for the labels
    let offsets = [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)];
    for y in 0..size {
        for x in 0..size {
            let p = y * size + x;
            let mut acc = [0.0; 3];
            for &(ox, oy) in &offsets {
                let (px, py) = (x as f64 + ox, y as f64 + oy);
                let tex = tex_amp * ((fx * px / s * std::f64::consts::TAU + phase).sin() * (fy * py / s * std::f64::consts::TAU).cos());
                let mut c = [0.0; 3];
                for (k, ck) in c.iter_mut().enumerate() {
                    *ck = bg[k] + tex + grad[0] * (px / s - 0.5) + grad[1] * (py / s - 0.5);
                }
                for sh in &shapes {
                    if sh.kind.contains(px - sh.cx, py - sh.cy, sh.r) {
                        c = sh.color;
                    }
                }
                for k in 0..3 {
                    acc[k] += c[k] / 4.0;
                }
            }
            for k in 0..3 {
                data[k * hw + p] = acc[k].clamp(0.0, 1.0);
            }
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            for (i, sh) in shapes.iter().enumerate() {
                if sh.kind.contains(px - sh.cx, py - sh.cy, sh.r) {
                    owner[p] = i;
                }
            }
        }
    }
    let mut visible = vec![0usize; shapes.len()];
    for &o in &owner {
        if o != usize::MAX {
            visible[o] += 1;
        }
    }
    // ties resolve to the earliest (dominant) shape
    let top = (0..shapes.len()).fold(0, |best, i| if visible[i] > visible[best] { i } else { best });
    let mask = owner.iter().map(|&o| if o == usize::MAX { 0 } else { shapes[o].kind.seg_class() }).collect();
    Scene { image: Tensor::new(&[3, size, size], data), class_id: shapes[top].kind.class_id(), mask }
}

pub fn generate_many(n: usize, size: usize, seed: u64) -> Vec<Scene> {
    (0..n).map(|i| generate(size, rng::derive(seed, i as u64))).collect()
}

/// Writes `scene_NNNN.png`, `scene_NNNN.mask.png` and a `labels.csv` of
/// `file,class_id` rows.
pub fn write_dir(dir: &Path, scenes: &[Scene]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let labels_path = dir.join("labels.csv");
    let mut labels = std::fs::File::create(&labels_path).map_err(|e| Error::io(&labels_path, e))?;
    for (i, sc) in scenes.iter().enumerate() {
        let stem = format!("scene_{i:04}");
        image::save_png(&dir.join(format!("{stem}.png")), &sc.image)?;
        let (h, w) = (sc.image.dim(1), sc.image.dim(2));
        image::save_mask(&dir.join(format!("{stem}.mask.png")), h, w, &sc.mask)?;
        writeln!(labels, "{stem}.png,{}", sc.class_id).map_err(|e| Error::io(&labels_path, e))?;
    }
    Ok(())
}
