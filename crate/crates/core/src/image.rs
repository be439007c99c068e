//! PNG I/O and helpers for `(3,H,W)` / `(B,3,H,W)` image tensors in `[0,1]`.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

/// Checks for an RGB image batch `(B,3,H,W)`.
pub fn check_batch(t: &Tensor) -> Result<(usize, usize, usize)> {
    match t.shape() {
        &[b, 3, h, w] => Ok((b, h, w)),
        s => bail!(Shape, "expected an RGB batch (B,3,H,W), got {s:?}"),
    }
}

/// Accepts `(3,H,W)` or `(B,3,H,W)`.
pub fn check_rgb(t: &Tensor) -> Result<()> {
    match t.shape() {
        &[3, _, _] | &[_, 3, _, _] => Ok(()),
        s => bail!(Shape, "expected RGB data with 3 channels, got shape {s:?}"),
    }
}

pub fn stack(images: &[Tensor]) -> Tensor {
    assert!(!images.is_empty(), "cannot stack zero images");
    let refs: Vec<Tensor> = images.iter().map(|i| i.clone().reshape(&[1, i.dim(0), i.dim(1), i.dim(2)])).collect();
    let r: Vec<&Tensor> = refs.iter().collect();
    Tensor::cat(&r, 0)
}

pub fn unstack(batch: &Tensor) -> Vec<Tensor> {
    let s = batch.shape();
    (0..s[0]).map(|i| batch.narrow(0, i, 1).reshape(&s[1..])).collect()
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn quantize(img: &Tensor) -> Tensor {
    img.map(|v| f64::from(to_u8(v)) / 255.0)
}

fn decoder(path: &Path) -> Result<png::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::normalize_to_color8());
    dec.read_info().map_err(|e| Error::format(path, e.to_string()))
}

/// Reads an 8-bit PNG as a `(3,H,W)` tensor; gray is replicated and alpha dropped.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let mut reader = decoder(path)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let ch = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(Error::format(path, format!("unsupported color type {other:?}"))),
    };
    let mut data = vec![0.0; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            let src = if ch < 3 { p * ch } else { p * ch + c };
            data[c * h * w + p] = f64::from(buf[src]) / 255.0;
        }
    }
    Ok(Tensor::new(&[3, h, w], data))
}

pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let (h, w) = match img.shape() {
        &[3, h, w] => (h, w),
        s => bail!(Shape, "save_png expects (3,H,W), got {s:?}"),
    };
    let mut bytes = vec![0u8; 3 * h * w];
    for p in 0..h * w {
        for c in 0..3 {
            bytes[p * 3 + c] = to_u8(img.data()[c * h * w + p]);
        }
    }
    write_png(path, w, h, png::ColorType::Rgb, &bytes)
}

/// Reads a single-channel label mask.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut reader = decoder(path)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(Error::format(path, "label masks must be 8-bit grayscale"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h);
    Ok((h, w, buf))
}

pub fn save_mask(path: &Path, h: usize, w: usize, mask: &[u8]) -> Result<()> {
    write_png(path, w, h, png::ColorType::Grayscale, mask)
}

fn write_png(path: &Path, w: usize, h: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::format(path, e.to_string()))?;
    writer.write_image_data(bytes).map_err(|e| Error::format(path, e.to_string()))?;
    writer.finish().map_err(|e| Error::format(path, e.to_string()))
}
