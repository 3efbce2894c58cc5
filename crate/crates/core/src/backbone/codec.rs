//! Exact invertible RGBA ↔ latent codec.
//!
//! Encoding folds each 4×4 pixel patch into channels (space-to-depth, 4 image
//! channels × 16 = 64 latent channels) and then mixes channels with a fixed
//! seeded orthogonal 64×64 matrix. Decoding applies the transpose and unfolds.
//! Both directions are linear, so the codec preserves L2 norm and the
//! roundtrip is exact up to rounding.

use nalgebra::DMatrix;
use ndarray::{Array2, ArrayD, IxDyn};
use rand_distr::{Distribution, StandardNormal};

use crate::tensor::{rng_for, Tensor};
use crate::{Error, Result};

pub const IMAGE_CHANNELS: usize = 4;
pub const PATCH: usize = 4;
pub const LATENT_CHANNELS: usize = IMAGE_CHANNELS * PATCH * PATCH;
pub const DEFAULT_IMAGE_SIZE: usize = 64;
pub const CODEC_SEED: u64 = 0x00C0_DEC0;

/// Batch of RGBA images `[B, 4, H, W]` with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRGBA {
    pixels: Tensor,
}

impl ImageRGBA {
    pub fn new(pixels: Tensor) -> Result<Self> {
        let s = pixels.shape();
        if s.len() != 4 || s[1] != IMAGE_CHANNELS {
            return Err(Error::dim(format!(
                "expected [B, 4, H, W] image, got {s:?}"
            )));
        }
        if s[2] % PATCH != 0 || s[3] % PATCH != 0 || s[2] == 0 || s[3] == 0 {
            return Err(Error::dim(format!(
                "image size {}×{} must be a positive multiple of {PATCH}",
                s[2], s[3]
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::dim(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    /// Builds an image from possibly out-of-range values by clamping to `[0, 1]`.
    pub fn from_clamped(pixels: Tensor) -> Result<Self> {
        Self::new(pixels.mapv(|v| v.clamp(0.0, 1.0)))
    }

    pub fn zeros(batch: usize, size: usize) -> Result<Self> {
        Self::new(ArrayD::zeros(IxDyn(&[batch, IMAGE_CHANNELS, size, size])))
    }

    pub fn pixels(&self) -> &Tensor {
        &self.pixels
    }

    pub fn into_pixels(self) -> Tensor {
        self.pixels
    }

    pub fn batch(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[3]
    }

    /// Alpha plane of sample `b`, `[H, W]`.
    pub fn alpha(&self, b: usize) -> Array2<f64> {
        self.pixels
            .slice(ndarray::s![b, 3, .., ..])
            .to_owned()
    }

    /// RGB channels `[B, 3, H, W]`.
    pub fn rgb(&self) -> Tensor {
        self.pixels
            .slice(ndarray::s![.., 0..3, .., ..])
            .to_owned()
            .into_dyn()
    }

    /// RGB multiplied by alpha, `[B, 3, H, W]`.
    pub fn premultiplied_rgb(&self) -> Tensor {
        let mut rgb = self.rgb();
        for b in 0..self.batch() {
            let alpha = self.alpha(b);
            for c in 0..3 {
                let mut plane = rgb.slice_mut(ndarray::s![b, c, .., ..]);
                plane.zip_mut_with(&alpha, |v, &a| *v *= a);
            }
        }
        rgb
    }

    /// Repeats a single image `n` times along the batch axis.
    pub fn repeat(&self, n: usize) -> Self {
        let views: Vec<_> = (0..n).map(|_| self.pixels.view()).collect();
        let pixels = ndarray::concatenate(ndarray::Axis(0), &views).expect("same shapes");
        Self { pixels }
    }
}

/// Latent tensor `[B, 64, H/4, W/4]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    values: Tensor,
}

impl LatentTensor {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[1] != LATENT_CHANNELS {
            return Err(Error::dim(format!(
                "expected [B, {LATENT_CHANNELS}, h, w] latent, got {s:?}"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(batch: usize, h: usize, w: usize) -> Self {
        Self {
            values: ArrayD::zeros(IxDyn(&[batch, LATENT_CHANNELS, h, w])),
        }
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn into_values(self) -> Tensor {
        self.values
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }
}

#[derive(Debug, Clone)]
pub struct LatentCodec {
    mix: Array2<f64>,
}

impl Default for LatentCodec {
    fn default() -> Self {
        Self::new(CODEC_SEED)
    }
}

impl LatentCodec {
    /// Orthogonal factor of a seeded Gaussian matrix via Householder QR.
    pub fn new(seed: u64) -> Self {
        let n = LATENT_CHANNELS;
        let mut rng = rng_for(seed, "codec.mix");
        let gauss = DMatrix::<f64>::from_fn(n, n, |_, _| StandardNormal.sample(&mut rng));
        let q = gauss.qr().q();
        let mix = Array2::from_shape_fn((n, n), |(i, j)| q[(i, j)]);
        Self { mix }
    }

    pub fn mixing_matrix(&self) -> &Array2<f64> {
        &self.mix
    }

    pub fn encode_image(&self, img: &ImageRGBA) -> LatentTensor {
        let folded = space_to_depth(img.pixels());
        LatentTensor {
            values: mix_channels(&folded, &self.mix),
        }
    }

    pub fn decode_rgba(&self, z: &LatentTensor) -> ImageRGBA {
        let pixels = self.decode_unclamped(z).mapv(|v| v.clamp(0.0, 1.0));
        ImageRGBA { pixels }
    }

    pub fn decode_rgb(&self, z: &LatentTensor) -> Tensor {
        self.decode_rgba(z).rgb()
    }

    /// Exact linear inverse of [`encode_image`](Self::encode_image) without
    /// output clamping.
    pub fn decode_unclamped(&self, z: &LatentTensor) -> Tensor {
        let unmixed = mix_channels(z.values(), &self.mix.t().to_owned());
        depth_to_space(&unmixed)
    }
}

fn mix_channels(x: &Tensor, m: &Array2<f64>) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = ArrayD::zeros(IxDyn(&[b, c, h, w]));
    for bi in 0..b {
        let block = x
            .slice(ndarray::s![bi, .., .., ..])
            .to_owned()
            .into_shape_with_order((c, h * w))
            .expect("contiguous");
        let mixed = m.dot(&block).into_shape_with_order((c, h, w)).expect("shape");
        out.slice_mut(ndarray::s![bi, .., .., ..]).assign(&mixed);
    }
    out
}

/// `[B, 4, H, W]` → `[B, 64, H/4, W/4]`; channel index `c·16 + a·4 + b` holds
/// pixel `(4i + a, 4j + b)` of image channel `c`.
pub fn space_to_depth(x: &Tensor) -> Tensor {
    space_to_depth_factor(x, PATCH)
}

pub fn space_to_depth_factor(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / f, w / f);
    let mut out = ArrayD::zeros(IxDyn(&[b, c * f * f, oh, ow]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let ch = ci * f * f + (i % f) * f + (j % f);
                    out[[bi, ch, i / f, j / f]] = x[[bi, ci, i, j]];
                }
            }
        }
    }
    out
}

pub fn depth_to_space(z: &Tensor) -> Tensor {
    let s = z.shape();
    let (b, cz, h, w) = (s[0], s[1], s[2], s[3]);
    let f = PATCH;
    let c = cz / (f * f);
    let mut out = ArrayD::zeros(IxDyn(&[b, c, h * f, w * f]));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h * f {
                for j in 0..w * f {
                    let ch = ci * f * f + (i % f) * f + (j % f);
                    out[[bi, ci, i, j]] = z[[bi, ch, i / f, j / f]];
                }
            }
        }
    }
    out
}
