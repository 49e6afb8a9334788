//! Full-reference image quality: PSNR and single-scale SSIM.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported for identical images, where the ratio is unbounded.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

pub fn mse(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "mse")?;
    if a.numel() == 0 {
        return Err(Error::Dimension("mse of empty tensors".into()));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    Ok(s / a.numel() as f64)
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / m).log10()).min(PSNR_CAP))
}

fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size / 2) as f64;
    let taps: Vec<f64> = (0..size)
        .map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering of one `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for i in 0..h {
        for j in 0..ow {
            rows[i * ow + j] = (0..k).map(|t| taps[t] * plane[i * w + j + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = (0..k).map(|t| taps[t] * rows[(i + t) * ow + j]).sum();
        }
    }
    out
}

/// Window side used for an `h x w` image: 11, or the largest odd size that
/// fits.
pub fn ssim_window(h: usize, w: usize) -> usize {
    let m = SSIM_WINDOW.min(h).min(w);
    if m.is_multiple_of(2) {
        m - 1
    } else {
        m
    }
}

/// Mean SSIM over valid windows, per channel, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b, "ssim")?;
    let (h, w, c) = a.hwc()?;
    if h == 0 || w == 0 || c == 0 {
        return Err(Error::Dimension("ssim of empty images".into()));
    }
    let taps = gaussian_taps(ssim_window(h, w), SSIM_SIGMA);
    let plane = |t: &Tensor, ch: usize, f: &dyn Fn(f64) -> f64| -> Vec<f64> {
        (0..h * w).map(|p| f(t.data()[p * c + ch])).collect()
    };
    let mut total = 0.0;
    for ch in 0..c {
        let pa = plane(a, ch, &|v| v);
        let pb = plane(b, ch, &|v| v);
        let paa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let pbb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let pab: Vec<f64> = pa.iter().zip(&pb).map(|(x, y)| x * y).collect();
        let mu_a = filter_valid(&pa, h, w, &taps);
        let mu_b = filter_valid(&pb, h, w, &taps);
        let e_aa = filter_valid(&paa, h, w, &taps);
        let e_bb = filter_valid(&pbb, h, w, &taps);
        let e_ab = filter_valid(&pab, h, w, &taps);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = e_aa[i] - ma * ma;
            let vb = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            let num = (2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2);
            let den = (ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2);
            acc += num / den;
        }
        total += acc / n as f64;
    }
    Ok(total / c as f64)
}
