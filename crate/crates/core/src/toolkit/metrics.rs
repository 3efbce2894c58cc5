//! Pixel-fidelity metrics.

use ndarray::{Array2, ArrayD, Axis, Ix2};

use crate::{Error, Result};

/// Reported when the images are identical.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

fn same_shape(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("image shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    if a.is_empty() {
        return Err(Error::dim("images are empty"));
    }
    Ok(())
}

/// `10·log10(1 / MSE)` for images in `[0, 1]`, capped at 100 dB.
pub fn psnr(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

/// Channel mean of a `[C, H, W]` image; `[H, W]` passes through.
pub fn grayscale(img: &ArrayD<f64>) -> Result<Array2<f64>> {
    match img.ndim() {
        2 => Ok(img.clone().into_dimensionality::<Ix2>().expect("2-d")),
        3 => Ok(img
            .mean_axis(Axis(0))
            .expect("non-empty channel axis")
            .into_dimensionality::<Ix2>()
            .expect("2-d")),
        n => Err(Error::dim(format!("expected [H, W] or [C, H, W], got {n} dimensions"))),
    }
}

/// Summed-area table with a zero border row and column.
fn integral(x: &Array2<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let mut s = Array2::zeros((h + 1, w + 1));
    for i in 0..h {
        for j in 0..w {
            s[[i + 1, j + 1]] = x[[i, j]] + s[[i, j + 1]] + s[[i + 1, j]] - s[[i, j]];
        }
    }
    s
}

fn window_sum(s: &Array2<f64>, i: usize, j: usize, k: usize) -> f64 {
    s[[i + k, j + k]] - s[[i, j + k]] - s[[i + k, j]] + s[[i, j]]
}

/// Mean SSIM over every valid 8×8 window of the grayscale images, with a
/// uniform window and population (1/N) moments.
pub fn ssim(a: &ArrayD<f64>, b: &ArrayD<f64>) -> Result<f64> {
    same_shape(a, b)?;
    let (ga, gb) = (grayscale(a)?, grayscale(b)?);
    let (h, w) = ga.dim();
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::config(format!("{h}x{w} image is smaller than the {k}x{k} SSIM window")));
    }
    let sa = integral(&ga);
    let sb = integral(&gb);
    let saa = integral(&(&ga * &ga));
    let sbb = integral(&(&gb * &gb));
    let sab = integral(&(&ga * &gb));
    let n = (k * k) as f64;
    let mut total = 0.0;
    for i in 0..=h - k {
        for j in 0..=w - k {
            let ma = window_sum(&sa, i, j, k) / n;
            let mb = window_sum(&sb, i, j, k) / n;
            let va = window_sum(&saa, i, j, k) / n - ma * ma;
            let vb = window_sum(&sbb, i, j, k) / n - mb * mb;
            let cov = window_sum(&sab, i, j, k) / n - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
        }
    }
    Ok(total / ((h - k + 1) * (w - k + 1)) as f64)
}
