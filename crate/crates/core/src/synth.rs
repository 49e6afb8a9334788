//! Procedural scenes and darkened copies for smoke-scale training.
//!
//! Scenes mix a sky/ground gradient, soft blobs, hard-edged blocks and
//! striped texture so that both smooth and high-frequency content is
//! present. All values sit on the 8-bit grid.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::imageio::save_png;
use crate::tensor::Tensor;

pub const DARKEN_GAMMA: f64 = 2.5;
pub const DARKEN_SIGMA: f64 = 0.02;

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

/// One `[h, w, 3]` scene in `[0, 1]`.
pub fn scene(seed: u64, h: usize, w: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = color(&mut rng, 0.4, 0.95);
    let bottom = color(&mut rng, 0.1, 0.6);
    let horizon = rng.random_range(0.3..0.7) * h as f64;
    let mut img = vec![0.0; h * w * 3];
    for y in 0..h {
        let t = 1.0 / (1.0 + (-(y as f64 - horizon) / 6.0).exp());
        for x in 0..w {
            for c in 0..3 {
                img[(y * w + x) * 3 + c] = top[c] * (1.0 - t) + bottom[c] * t;
            }
        }
    }
    for _ in 0..rng.random_range(2..5) {
        let (cy, cx) = (
            rng.random_range(0.0..h as f64),
            rng.random_range(0.0..w as f64),
        );
        let (ry, rx) = (rng.random_range(6.0..30.0), rng.random_range(6.0..30.0));
        let col = color(&mut rng, 0.05, 1.0);
        for y in 0..h {
            for x in 0..w {
                let d = ((y as f64 - cy) / ry).powi(2) + ((x as f64 - cx) / rx).powi(2);
                let a = (-d).exp();
                for c in 0..3 {
                    let p = &mut img[(y * w + x) * 3 + c];
                    *p = *p * (1.0 - a) + col[c] * a;
                }
            }
        }
    }
    for _ in 0..rng.random_range(1..4) {
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let y1 = (y0 + rng.random_range(8..h.max(9))).min(h);
        let x1 = (x0 + rng.random_range(8..w.max(9))).min(w);
        let col = color(&mut rng, 0.05, 0.9);
        let period = rng.random_range(3.0..12.0);
        let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let depth = rng.random_range(0.0..0.25);
        for y in y0..y1 {
            for x in x0..x1 {
                let phase = (y as f64 * angle.sin() + x as f64 * angle.cos()) / period;
                let stripe = depth * (2.0 * std::f64::consts::PI * phase).sin();
                for c in 0..3 {
                    img[(y * w + x) * 3 + c] = col[c] + stripe;
                }
            }
        }
    }
    let grain = Normal::new(0.0, 0.01).expect("valid sigma");
    let data = img
        .into_iter()
        .map(|v| quantize(v + grain.sample(&mut rng)))
        .collect();
    Tensor::new(vec![h, w, 3], data).expect("shape matches data")
}

/// `clamp(ref^gamma + N(0, sigma^2))`, quantized to 8 bits.
pub fn darken(reference: &Tensor, gamma: f64, sigma: f64, seed: u64) -> Result<Tensor> {
    let noise = Normal::new(0.0, sigma).map_err(|e| Error::Config(format!("noise sigma: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = reference
        .data()
        .iter()
        .map(|&v| quantize(v.max(0.0).powf(gamma) + noise.sample(&mut rng)))
        .collect();
    Tensor::new(reference.shape().to_vec(), data)
}

/// `(low, reference)` pairs with the default darkening.
pub fn pairs(count: usize, size: usize, seed: u64) -> Result<Vec<(Tensor, Tensor)>> {
    (0..count)
        .map(|i| {
            let s = seed.wrapping_mul(1_000_003).wrapping_add(i as u64);
            let reference = scene(s, size, size);
            let low = darken(&reference, DARKEN_GAMMA, DARKEN_SIGMA, s ^ 0xda4c)?;
            Ok((low, reference))
        })
        .collect()
}

/// Writes `root/low/NNN.png` and `root/high/NNN.png`.
pub fn write_dataset(root: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    for sub in ["low", "high"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for (i, (low, reference)) in pairs(count, size, seed)?.iter().enumerate() {
        save_png(&root.join("low").join(format!("{i:03}.png")), low)?;
        save_png(&root.join("high").join(format!("{i:03}.png")), reference)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scenes_are_seeded_and_on_the_byte_grid() {
        let a = scene(7, 32, 40);
        assert_eq!(a, scene(7, 32, 40));
        assert_ne!(a, scene(8, 32, 40));
        assert!(a
            .data()
            .iter()
            .all(|v| (v * 255.0 - (v * 255.0).round()).abs() < 1e-9));
    }

    #[test]
    fn darkening_lowers_the_mean() {
        let r = scene(1, 64, 64);
        let d = darken(&r, DARKEN_GAMMA, DARKEN_SIGMA, 2).unwrap();
        assert!(d.sum() < 0.8 * r.sum());
        assert!(d.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
