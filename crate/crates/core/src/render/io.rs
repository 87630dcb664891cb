//! Image input and output: 8-bit PNG and lossless planar `f64` dumps.
//!
//! Raw dump layout (little-endian): magic `RAWF`, rank `u32`, each extent as
//! `u64`, then the values as `f64` in row-major order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn to_u8(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes a planar `[3, H, W]` image with values in `[0, 1]`.
pub fn save_png(color: &Tensor, path: &Path) -> Result<()> {
    let s = color.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::Shape(format!("expected [3, H, W], got {s:?}")));
    }
    let (h, w) = (s[1], s[2]);
    let d = color.data();
    let mut buf = Vec::with_capacity(h * w * 3);
    for p in 0..h * w {
        for c in 0..3 {
            buf.push(to_u8(d[c * h * w + p]));
        }
    }
    image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to image")
        .save(path)?;
    Ok(())
}

/// Writes an `[H, W]` (or `[1, H, W]`) map, linearly mapping `[lo, hi]` to `[0, 255]`.
pub fn save_png_gray(map: &Tensor, lo: Real, hi: Real, path: &Path) -> Result<()> {
    let s = map.shape();
    let (h, w) = match s {
        [h, w] | [1, h, w] => (*h, *w),
        _ => return Err(Error::Shape(format!("expected [H, W], got {s:?}"))),
    };
    let span = if hi > lo { hi - lo } else { 1.0 };
    let buf: Vec<u8> = map.data().iter().map(|&v| to_u8((v - lo) / span)).collect();
    image::GrayImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer sized to image")
        .save(path)?;
    Ok(())
}

pub fn write_raw_planes(t: &Tensor, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(8 + 8 * t.rank() + 8 * t.len());
    buf.extend_from_slice(b"RAWF");
    buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        buf.extend_from_slice(&(v as f64).to_le_bytes());
    }
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn read_raw_planes(path: &Path) -> Result<Tensor> {
    let b = std::fs::read(path)?;
    let bad = || Error::Format(format!("{} is not a raw plane dump", path.display()));
    if b.len() < 8 || &b[..4] != b"RAWF" {
        return Err(bad());
    }
    let rank = u32::from_le_bytes(b[4..8].try_into().unwrap()) as usize;
    let head = 8 + 8 * rank;
    if b.len() < head {
        return Err(bad());
    }
    let shape: Vec<usize> = (0..rank)
        .map(|i| u64::from_le_bytes(b[8 + 8 * i..16 + 8 * i].try_into().unwrap()) as usize)
        .collect();
    let n: usize = shape.iter().product();
    if b.len() != head + 8 * n {
        return Err(bad());
    }
    let data = b[head..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()) as Real)
        .collect();
    Tensor::new(shape, data)
}

/// Reads an 8-bit RGB(A) PNG as `[3, H, W]` in `[0, 1]`.
pub fn load_png(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (p, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * h * w + p] = px.0[c] as Real / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Reads a grayscale PNG as a `[1, H, W]` map thresholded at half intensity.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| if p.0[0] >= 128 { 1.0 } else { 0.0 }).collect();
    Tensor::new(vec![1, h, w], data)
}
