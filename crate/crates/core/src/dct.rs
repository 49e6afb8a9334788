//! Colour conversion, orthonormal 8x8 block DCT, and band packing.
//!
//! Packed frequency features store, for every 8x8 patch at grid cell
//! `(i, j)`, coefficient `(u, v)` of colour plane `p` in channel
//! `p * 64 + u * 8 + v`. All patches' coefficients of one band therefore
//! share a channel.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BLOCK: usize = 8;
pub const BANDS: usize = BLOCK * BLOCK;
pub const FREQ_CHANNELS: usize = 3 * BANDS;

/// Full-range BT.601 RGB -> YCbCr (chroma rows sum to zero).
pub const RGB_TO_YCBCR: [[f64; 3]; 3] = [
    [0.299, 0.587, 0.114],
    [-0.168_735_891_647_856_6, -0.331_264_108_352_143_4, 0.5],
    [0.5, -0.418_687_589_158_345_2, -0.081_312_410_841_654_8],
];

/// Inverse of [`RGB_TO_YCBCR`], derived analytically from the luma weights.
pub const YCBCR_TO_RGB: [[f64; 3]; 3] = [
    [1.0, 0.0, 1.402],
    [1.0, -0.344_136_286_201_022_1, -0.714_136_286_201_022_1],
    [1.0, 1.772, 0.0],
];

pub const CHROMA_OFFSET: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct YCbCrImage {
    /// `[H, W, 3]` in Y, Cb, Cr order; chroma offset-coded at 0.5.
    pub planes: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyFeature {
    /// `[H/8, W/8, 192]` band-packed coefficients.
    pub data: Tensor,
    /// Storage channel -> canonical band index (`color * 64 + u * 8 + v`).
    pub channel_order: Vec<usize>,
}

impl FrequencyFeature {
    pub fn identity(data: Tensor) -> Self {
        let c = *data.shape().last().unwrap_or(&0);
        FrequencyFeature {
            data,
            channel_order: (0..c).collect(),
        }
    }

    pub fn has_identity_order(&self) -> bool {
        self.channel_order.iter().enumerate().all(|(i, &c)| i == c)
    }
}

/// Decodes a band channel into `(color, u, v)`.
pub fn band_of_channel(channel: usize) -> (usize, usize, usize) {
    (channel / BANDS, (channel % BANDS) / BLOCK, channel % BLOCK)
}

pub fn channel_of_band(color: usize, u: usize, v: usize) -> usize {
    color * BANDS + u * BLOCK + v
}

fn apply_color(img: &Tensor, m: &[[f64; 3]; 3], pre: [f64; 3], post: [f64; 3]) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(Error::Dimension(format!(
            "expected 3 colour channels, got {c}"
        )));
    }
    let mut out = vec![0.0; h * w * 3];
    for (o, px) in out.chunks_exact_mut(3).zip(img.data().chunks_exact(3)) {
        let p = [px[0] - pre[0], px[1] - pre[1], px[2] - pre[2]];
        for r in 0..3 {
            o[r] = m[r][0] * p[0] + m[r][1] * p[1] + m[r][2] * p[2] + post[r];
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

pub fn rgb_to_ycbcr(img: &Tensor) -> Result<YCbCrImage> {
    let planes = apply_color(
        img,
        &RGB_TO_YCBCR,
        [0.0; 3],
        [0.0, CHROMA_OFFSET, CHROMA_OFFSET],
    )?;
    Ok(YCbCrImage { planes })
}

pub fn ycbcr_to_rgb(img: &YCbCrImage) -> Result<Tensor> {
    apply_color(
        &img.planes,
        &YCBCR_TO_RGB,
        [0.0, CHROMA_OFFSET, CHROMA_OFFSET],
        [0.0; 3],
    )
}

fn alpha(k: usize) -> f64 {
    if k == 0 {
        (1.0 / BLOCK as f64).sqrt()
    } else {
        (2.0 / BLOCK as f64).sqrt()
    }
}

/// `basis[u][i] = alpha(u) * cos((2i + 1) u pi / 16)`.
fn basis() -> &'static [[f64; BLOCK]; BLOCK] {
    static BASIS: OnceLock<[[f64; BLOCK]; BLOCK]> = OnceLock::new();
    BASIS.get_or_init(|| {
        let mut b = [[0.0; BLOCK]; BLOCK];
        for (u, row) in b.iter_mut().enumerate() {
            for (i, v) in row.iter_mut().enumerate() {
                *v = alpha(u) * (((2 * i + 1) * u) as f64 * PI / 16.0).cos();
            }
        }
        b
    })
}

/// Separable forward transform: rows, then columns.
pub fn dct8(block: &[f64; BANDS]) -> [f64; BANDS] {
    let a = basis();
    let mut tmp = [0.0; BANDS];
    // tmp[i][v] = sum_j f[i][j] a[v][j]
    for i in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for j in 0..BLOCK {
                s += block[i * BLOCK + j] * a[v][j];
            }
            tmp[i * BLOCK + v] = s;
        }
    }
    let mut out = [0.0; BANDS];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for i in 0..BLOCK {
                s += a[u][i] * tmp[i * BLOCK + v];
            }
            out[u * BLOCK + v] = s;
        }
    }
    out
}

pub fn idct8(coeffs: &[f64; BANDS]) -> [f64; BANDS] {
    let a = basis();
    let mut tmp = [0.0; BANDS];
    // tmp[i][v] = sum_u a[u][i] F[u][v]
    for i in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for u in 0..BLOCK {
                s += a[u][i] * coeffs[u * BLOCK + v];
            }
            tmp[i * BLOCK + v] = s;
        }
    }
    let mut out = [0.0; BANDS];
    for i in 0..BLOCK {
        for j in 0..BLOCK {
            let mut s = 0.0;
            for v in 0..BLOCK {
                s += tmp[i * BLOCK + v] * a[v][j];
            }
            out[i * BLOCK + j] = s;
        }
    }
    out
}

fn as_block(t: &Tensor) -> Result<[f64; BANDS]> {
    if t.shape() != [BLOCK, BLOCK] {
        return Err(Error::Dimension(format!(
            "block transform needs [8, 8], got {:?}",
            t.shape()
        )));
    }
    let mut b = [0.0; BANDS];
    b.copy_from_slice(t.data());
    Ok(b)
}

pub fn block_dct8(block: &Tensor) -> Result<Tensor> {
    Tensor::new(vec![BLOCK, BLOCK], dct8(&as_block(block)?).to_vec())
}

pub fn block_idct8(coeffs: &Tensor) -> Result<Tensor> {
    Tensor::new(vec![BLOCK, BLOCK], idct8(&as_block(coeffs)?).to_vec())
}

/// Literal quadruple loop over `(u, v, i, j)`; recomputes every cosine.
pub fn dct_naive_oracle(block: &Tensor) -> Result<Tensor> {
    let f = as_block(block)?;
    let mut out = [0.0; BANDS];
    for u in 0..BLOCK {
        for v in 0..BLOCK {
            let mut s = 0.0;
            for i in 0..BLOCK {
                for j in 0..BLOCK {
                    s += f[i * BLOCK + j]
                        * (((2 * i + 1) * u) as f64 * PI / 16.0).cos()
                        * (((2 * j + 1) * v) as f64 * PI / 16.0).cos();
                }
            }
            out[u * BLOCK + v] = alpha(u) * alpha(v) * s;
        }
    }
    Tensor::new(vec![BLOCK, BLOCK], out.to_vec())
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(BLOCK) || !w.is_multiple_of(BLOCK) || h == 0 || w == 0 {
        return Err(Error::CropRequired {
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Block-transforms every plane of `[H, W, P]` into `[H/8, W/8, 64 P]`.
pub fn pack_planes(x: &Tensor) -> Result<Tensor> {
    transform_planes(x, dct8)
}

fn transform_planes(x: &Tensor, transform: fn(&[f64; BANDS]) -> [f64; BANDS]) -> Result<Tensor> {
    let (h, w, planes) = x.hwc()?;
    check_divisible(h, w)?;
    let (gh, gw) = (h / BLOCK, w / BLOCK);
    let oc = planes * BANDS;
    let src = x.data();
    let mut out = vec![0.0; gh * gw * oc];
    let mut block = [0.0; BANDS];
    for bi in 0..gh {
        for bj in 0..gw {
            for p in 0..planes {
                for u in 0..BLOCK {
                    for v in 0..BLOCK {
                        block[u * BLOCK + v] =
                            src[((bi * BLOCK + u) * w + bj * BLOCK + v) * planes + p];
                    }
                }
                let coeffs = transform(&block);
                out[(bi * gw + bj) * oc + p * BANDS..][..BANDS].copy_from_slice(&coeffs);
            }
        }
    }
    Tensor::new(vec![gh, gw, oc], out)
}

/// Inverse of [`pack_planes`]: `[H/8, W/8, 64 P]` -> `[H, W, P]`.
pub fn unpack_planes(x: &Tensor) -> Result<Tensor> {
    let (gh, gw, c) = x.hwc()?;
    if c % BANDS != 0 {
        return Err(Error::Dimension(format!(
            "{c} channels is not a multiple of 64"
        )));
    }
    let planes = c / BANDS;
    let (h, w) = (gh * BLOCK, gw * BLOCK);
    let mut out = vec![0.0; h * w * planes];
    let mut coeffs = [0.0; BANDS];
    for bi in 0..gh {
        for bj in 0..gw {
            for p in 0..planes {
                coeffs.copy_from_slice(&x.data()[(bi * gw + bj) * c + p * BANDS..][..BANDS]);
                let block = idct8(&coeffs);
                for i in 0..BLOCK {
                    for j in 0..BLOCK {
                        out[((bi * BLOCK + i) * w + bj * BLOCK + j) * planes + p] =
                            block[i * BLOCK + j];
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, planes], out)
}

/// Centres the chroma planes at zero and packs all three planes into band
/// channels. A black image packs to all-zero coefficients.
pub fn pack_bands(img: &YCbCrImage) -> Result<FrequencyFeature> {
    let centered = img
        .planes
        .map_indexed(|i, v| if i % 3 == 0 { v } else { v - CHROMA_OFFSET });
    Ok(FrequencyFeature::identity(pack_planes(&centered)?))
}

pub fn unpack_bands(feature: &FrequencyFeature) -> Result<YCbCrImage> {
    if !feature.has_identity_order() {
        return Err(Error::Usage(
            "unpack_bands needs canonical channel order".into(),
        ));
    }
    let planes = unpack_planes(&feature.data)?;
    if planes.shape()[2] != 3 {
        return Err(Error::Dimension(
            "band feature must have 192 channels".into(),
        ));
    }
    Ok(YCbCrImage {
        planes: planes.map_indexed(|i, v| if i % 3 == 0 { v } else { v + CHROMA_OFFSET }),
    })
}

/// Largest centred crop whose sides are multiples of 8.
pub fn center_crop8(img: &Tensor) -> Result<Tensor> {
    let (h, w, c) = img.hwc()?;
    let (ch, cw) = (h / BLOCK * BLOCK, w / BLOCK * BLOCK);
    if ch == 0 || cw == 0 {
        return Err(Error::CropRequired {
            height: h,
            width: w,
        });
    }
    if (ch, cw) == (h, w) {
        return Ok(img.clone());
    }
    crop(img, (h - ch) / 2, (w - cw) / 2, ch, cw, c)
}

pub(crate) fn crop(
    img: &Tensor,
    top: usize,
    left: usize,
    ch: usize,
    cw: usize,
    c: usize,
) -> Result<Tensor> {
    let w = img.shape()[1];
    let mut out = Vec::with_capacity(ch * cw * c);
    for y in top..top + ch {
        out.extend_from_slice(&img.data()[((y * w) + left) * c..((y * w) + left + cw) * c]);
    }
    Tensor::new(vec![ch, cw, c], out)
}

/// Per-patch `log(1 + |F|)` of the luma plane, tiled in place and min-max
/// normalised to `[0, 1]`. Returns `[H, W]`.
pub fn spectrum_image(img: &Tensor) -> Result<Tensor> {
    let (h, w, _) = img.hwc()?;
    check_divisible(h, w)?;
    let ycc = rgb_to_ycbcr(img)?;
    let luma = Tensor::from_fn(&[h, w, 1], |i| ycc.planes.data()[i * 3]);
    let packed = pack_planes(&luma)?;
    let (gw, mut out) = (w / BLOCK, vec![0.0; h * w]);
    for (cell, coeffs) in packed.data().chunks_exact(BANDS).enumerate() {
        let (bi, bj) = (cell / gw, cell % gw);
        for u in 0..BLOCK {
            for v in 0..BLOCK {
                out[(bi * BLOCK + u) * w + bj * BLOCK + v] = coeffs[u * BLOCK + v].abs().ln_1p();
            }
        }
    }
    let lo = out.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = out.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    for v in out.iter_mut() {
        *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
    }
    Tensor::new(vec![h, w], out)
}

impl Tensor {
    pub(crate) fn map_indexed(&self, f: impl Fn(usize, f64) -> f64) -> Tensor {
        Tensor::from_fn(self.shape(), |i| f(i, self.data()[i]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn white_and_black_map_to_neutral_chroma() {
        let white = Tensor::full(&[1, 1, 3], 1.0);
        let y = rgb_to_ycbcr(&white).unwrap();
        for (got, want) in y.planes.data().iter().zip([1.0, 0.5, 0.5]) {
            assert!((got - want).abs() < 1e-15);
        }
        let black = Tensor::zeros(&[1, 1, 3]);
        assert_eq!(
            rgb_to_ycbcr(&black).unwrap().planes.data(),
            &[0.0, 0.5, 0.5]
        );
    }

    #[test]
    fn color_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let img = Tensor::from_fn(&[8, 16, 3], |_| rng.random());
        let back = ycbcr_to_rgb(&rgb_to_ycbcr(&img).unwrap()).unwrap();
        assert!(back.max_abs_diff(&img) <= 1e-9);
    }

    #[test]
    fn constant_block_is_pure_dc() {
        let c = 0.37;
        let f = block_dct8(&Tensor::full(&[8, 8], c)).unwrap();
        assert!((f.data()[0] - 8.0 * c).abs() < 1e-14);
        assert!(f.data()[1..].iter().all(|v| v.abs() < 1e-14));
        let z = block_dct8(&Tensor::zeros(&[8, 8])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn wrong_block_shape_is_rejected() {
        assert!(matches!(
            block_dct8(&Tensor::zeros(&[4, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn basis_blocks_agree_with_oracle() {
        for k in 0..64 {
            let mut b = Tensor::zeros(&[8, 8]);
            b.data_mut()[k] = 1.0;
            let fast = block_dct8(&b).unwrap();
            let slow = dct_naive_oracle(&b).unwrap();
            assert!(fast.max_abs_diff(&slow) <= 1e-12);
        }
    }

    #[test]
    fn pack_shape_and_divisibility() {
        let y = YCbCrImage {
            planes: Tensor::zeros(&[16, 16, 3]),
        };
        assert_eq!(pack_bands(&y).unwrap().data.shape(), &[2, 2, 192]);
        let odd = YCbCrImage {
            planes: Tensor::zeros(&[12, 16, 3]),
        };
        assert!(matches!(pack_bands(&odd), Err(Error::CropRequired { .. })));
    }

    #[test]
    fn cr_impulse_lands_in_last_channel() {
        let mut coeffs = [0.0; 64];
        coeffs[7 * 8 + 7] = 1.0;
        let patch = idct8(&coeffs);
        let planes = Tensor::from_fn(&[8, 8, 3], |i| match i % 3 {
            0 => 0.0,
            1 => CHROMA_OFFSET,
            _ => CHROMA_OFFSET + patch[i / 3],
        });
        let f = pack_bands(&YCbCrImage { planes }).unwrap();
        assert_eq!(channel_of_band(2, 7, 7), 191);
        let d = f.data.data();
        assert!((d[191] - 1.0).abs() < 1e-12);
        assert!(d[..191].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn crop_floors_to_multiple_of_eight() {
        let img = Tensor::from_fn(&[100, 77, 3], |i| i as f64);
        let c = center_crop8(&img).unwrap();
        assert_eq!(c.shape(), &[96, 72, 3]);
        assert_eq!(c.get(&[0, 0, 0]), img.get(&[2, 2, 0]));
    }

    #[test]
    fn spectrum_of_constant_and_black() {
        let flat = spectrum_image(&Tensor::full(&[16, 16, 3], 0.6)).unwrap();
        for y in 0..16 {
            for x in 0..16 {
                let want = if y % 8 == 0 && x % 8 == 0 { 1.0 } else { 0.0 };
                assert!((flat.get(&[y, x]) - want).abs() < 1e-12, "({y},{x})");
            }
        }
        let black = spectrum_image(&Tensor::zeros(&[16, 16, 3])).unwrap();
        assert!(black.data().iter().all(|&v| v == 0.0));
    }
}
