//! PNG reading and writing for RGBA foregrounds, RGB backgrounds and masks.

use std::path::Path;

use image::codecs::png::PngEncoder;
use image::{ExtendedColorType, ImageEncoder};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

use crate::backbone::ImageRGBA;
use crate::{Error, Result};

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(data: &[u8], w: usize, h: usize, color: ExtendedColorType) -> Vec<u8> {
    let mut buf = Vec::new();
    PngEncoder::new(&mut buf)
        .write_image(data, w as u32, h as u32, color)
        .expect("in-memory PNG encoding");
    buf
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// 8-bit RGBA PNG bytes of the first image in the batch.
pub fn rgba_png_bytes(img: &ImageRGBA) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let px = img.pixels();
    let mut data = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            for c in 0..4 {
                data.push(quantize(px[[0, c, y, x]]));
            }
        }
    }
    encode_png(&data, w, h, ExtendedColorType::Rgba8)
}

pub fn save_rgba_png(path: &Path, img: &ImageRGBA) -> Result<()> {
    write(path, &rgba_png_bytes(img))
}

/// 8-bit RGB PNG bytes of a `[3, H, W]` image.
pub fn rgb_png_bytes(img: &Array3<f64>) -> Vec<u8> {
    let (_, h, w) = img.dim();
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                data.push(quantize(img[[c, y, x]]));
            }
        }
    }
    encode_png(&data, w, h, ExtendedColorType::Rgb8)
}

pub fn save_rgb_png(path: &Path, img: &Array3<f64>) -> Result<()> {
    write(path, &rgb_png_bytes(img))
}

fn open(path: &Path) -> Result<image::DynamicImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    image::open(path).map_err(|e| Error::format(path, e.to_string()))
}

/// Any PNG as RGBA; images without alpha load as opaque.
pub fn load_rgba_png(path: &Path) -> Result<ImageRGBA> {
    let img = open(path)?.to_rgba8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut px = ArrayD::zeros(IxDyn(&[1, 4, h, w]));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..4 {
            px[[0, c, y as usize, x as usize]] = f64::from(p[c]) / 255.0;
        }
    }
    ImageRGBA::new(px)
}

/// Any PNG as RGB `[3, H, W]`; alpha is dropped.
pub fn load_rgb_png(path: &Path) -> Result<Array3<f64>> {
    let img = open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = f64::from(p[c]) / 255.0;
        }
    }
    Ok(out)
}

/// Mask PNG as alpha `[H, W]` in `[0, 1]`: the alpha channel when the file
/// has one that is not fully opaque, otherwise luminance.
pub fn load_mask(path: &Path) -> Result<Array2<f64>> {
    let img = open(path)?;
    let rgba = img.to_rgba8();
    let (w, h) = (rgba.width() as usize, rgba.height() as usize);
    let use_alpha = img.color().has_alpha() && rgba.pixels().any(|p| p[3] != 255);
    let luma = img.to_luma8();
    let mut out = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = if use_alpha {
                rgba.get_pixel(x as u32, y as u32)[3]
            } else {
                luma.get_pixel(x as u32, y as u32)[0]
            };
            out[[y, x]] = f64::from(v) / 255.0;
        }
    }
    Ok(out)
}

/// Segmented foreground: the source's RGB with alpha from `mask` (or the
/// source's own alpha), colour zeroed wherever alpha is zero.
pub fn segment(source: &ImageRGBA, mask: Option<&Array2<f64>>) -> Result<ImageRGBA> {
    let (h, w) = (source.height(), source.width());
    let mut px = source.pixels().clone();
    if let Some(m) = mask {
        if m.dim() != (h, w) {
            return Err(Error::dim(format!("mask {:?} does not match source {h}x{w}", m.dim())));
        }
        for y in 0..h {
            for x in 0..w {
                px[[0, 3, y, x]] = m[[y, x]];
            }
        }
    }
    for y in 0..h {
        for x in 0..w {
            if px[[0, 3, y, x]] == 0.0 {
                for c in 0..3 {
                    px[[0, c, y, x]] = 0.0;
                }
            }
        }
    }
    ImageRGBA::new(px)
}
