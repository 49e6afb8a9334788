//! Raw numeric kernels on `[H, W, C]` tensors. The autograd graph wraps these;
//! nothing here tracks gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `c = alpha * op(a) * op(b) + beta * c` on row-major buffers, where `op`
/// optionally transposes. `op(a)` is `m x k`, `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if b_trans {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    // SAFETY: the strides above address exactly the m*k, k*n and m*n
    // row-major buffers whose lengths are checked in debug builds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a square-kernel convolution over an `[H, W, Cin]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub fn new(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        let (in_h, in_w, in_c) = input.hwc()?;
        let (kernel, out_c) = match weight.shape()[..] {
            [ky, kx, ci, co] if ky == kx && ci == in_c => (ky, co),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv weight {:?} does not fit input {:?}",
                    weight.shape(),
                    input.shape()
                )))
            }
        };
        if kernel % 2 == 0 {
            return Err(Error::Config(format!("kernel size {kernel} must be odd")));
        }
        if stride == 0 {
            return Err(Error::Config("stride must be at least 1".into()));
        }
        let out_dim = |n: usize| -> Result<usize> {
            let span = n + 2 * pad;
            if span < kernel || !(span - kernel).is_multiple_of(stride) {
                return Err(Error::Config(format!(
                    "input extent {n} with pad {pad}, kernel {kernel}, stride {stride} gives a non-integral output size"
                )));
            }
            Ok((span - kernel) / stride + 1)
        };
        Ok(ConvGeometry {
            in_h,
            in_w,
            in_c,
            out_h: out_dim(in_h)?,
            out_w: out_dim(in_w)?,
            out_c,
            kernel,
            stride,
            pad,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unrolls receptive fields into rows ordered `(ky, kx, cin)`, matching the
/// `[k, k, Cin, Cout]` weight layout. Out-of-bounds taps stay zero.
fn im2col(input: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.patch_len();
    let mut cols = vec![0.0; g.positions() * patch];
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let src = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let dst = (ky * g.kernel + kx) * g.in_c;
                    row[dst..dst + g.in_c].copy_from_slice(&input[src..src + g.in_c]);
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let patch = g.patch_len();
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kernel {
                let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                if iy < 0 || iy >= g.in_h as isize {
                    continue;
                }
                for kx in 0..g.kernel {
                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                    if ix < 0 || ix >= g.in_w as isize {
                        continue;
                    }
                    let dst = (iy as usize * g.in_w + ix as usize) * g.in_c;
                    let src = (ky * g.kernel + kx) * g.in_c;
                    for (o, v) in out[dst..dst + g.in_c]
                        .iter_mut()
                        .zip(&row[src..src + g.in_c])
                    {
                        *o += v;
                    }
                }
            }
        }
    }
}

/// Zero-padded 2-D convolution (cross-correlation) over `[H, W, Cin]` with
/// weights `[k, k, Cin, Cout]`, lowered to a single GEMM.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    if let Some(b) = bias {
        if b.numel() != g.out_c {
            return Err(Error::Dimension(format!(
                "conv bias has {} values, expected {}",
                b.numel(),
                g.out_c
            )));
        }
    }
    let mut out = vec![0.0; g.positions() * g.out_c];
    if let Some(b) = bias {
        for row in out.chunks_exact_mut(g.out_c) {
            row.copy_from_slice(b.data());
        }
    }
    let beta = if bias.is_some() { 1.0 } else { 0.0 };
    if g.is_pointwise() {
        gemm(
            g.positions(),
            g.in_c,
            g.out_c,
            input.data(),
            false,
            weight.data(),
            false,
            beta,
            &mut out,
        );
    } else {
        let cols = im2col(input.data(), &g);
        gemm(
            g.positions(),
            g.patch_len(),
            g.out_c,
            &cols,
            false,
            weight.data(),
            false,
            beta,
            &mut out,
        );
    }
    Tensor::new(vec![g.out_h, g.out_w, g.out_c], out)
}

pub struct ConvGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &[f64],
    stride: usize,
    pad: usize,
    want_input: bool,
) -> Result<ConvGrads> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    let (m, k, n) = (g.positions(), g.patch_len(), g.out_c);
    let mut bias = vec![0.0; n];
    for row in grad_out.chunks_exact(n) {
        for (b, v) in bias.iter_mut().zip(row) {
            *b += v;
        }
    }
    let mut dweight = vec![0.0; k * n];
    let dinput = if g.is_pointwise() {
        gemm(
            k,
            m,
            n,
            input.data(),
            true,
            grad_out,
            false,
            0.0,
            &mut dweight,
        );
        want_input.then(|| {
            let mut dx = vec![0.0; m * k];
            gemm(m, n, k, grad_out, false, weight.data(), true, 0.0, &mut dx);
            dx
        })
    } else {
        let cols = im2col(input.data(), &g);
        gemm(k, m, n, &cols, true, grad_out, false, 0.0, &mut dweight);
        want_input.then(|| {
            let mut dcols = cols;
            gemm(
                m,
                n,
                k,
                grad_out,
                false,
                weight.data(),
                true,
                0.0,
                &mut dcols,
            );
            let mut dx = vec![0.0; input.numel()];
            col2im(&dcols, &g, &mut dx);
            dx
        })
    };
    Ok(ConvGrads {
        input: dinput,
        weight: dweight,
        bias,
    })
}

/// Literal summation over every output element and receptive-field tap.
/// Used as the reference the GEMM path is checked against.
pub fn conv2d_direct(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let g = ConvGeometry::new(input, weight, stride, pad)?;
    let mut out = Tensor::zeros(&[g.out_h, g.out_w, g.out_c]);
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            for co in 0..g.out_c {
                let mut acc = bias.map_or(0.0, |b| b.data()[co]);
                for ky in 0..g.kernel {
                    for kx in 0..g.kernel {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                            continue;
                        }
                        for ci in 0..g.in_c {
                            acc += input.get(&[iy as usize, ix as usize, ci])
                                * weight.get(&[ky, kx, ci, co]);
                        }
                    }
                }
                out.set(&[oy, ox, co], acc);
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Zero,
    /// Out-of-range taps read the nearest edge pixel.
    Replicate,
}

/// Applies one 3x3 kernel independently to every channel (stride 1).
pub fn depthwise3x3(input: &Tensor, kernel: &[f64; 9], padding: Padding) -> Result<Tensor> {
    let (h, w, c) = input.hwc()?;
    let src = input.data();
    let mut out = vec![0.0; src.len()];
    let clamp = |v: isize, n: usize| -> Option<usize> {
        if (0..n as isize).contains(&v) {
            Some(v as usize)
        } else if padding == Padding::Replicate {
            Some(v.clamp(0, n as isize - 1) as usize)
        } else {
            None
        }
    };
    for y in 0..h {
        for x in 0..w {
            let dst = &mut out[(y * w + x) * c..][..c];
            for ky in 0..3 {
                let Some(iy) = clamp(y as isize + ky as isize - 1, h) else {
                    continue;
                };
                for kx in 0..3 {
                    let Some(ix) = clamp(x as isize + kx as isize - 1, w) else {
                        continue;
                    };
                    let tap = kernel[ky * 3 + kx];
                    let s = &src[(iy * w + ix) * c..][..c];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += tap * v;
                    }
                }
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

/// Softmax along the last axis.
pub fn softmax_last(input: &Tensor) -> Tensor {
    let n = *input.shape().last().unwrap_or(&1);
    let mut out = input.clone();
    for row in out.data_mut().chunks_exact_mut(n.max(1)) {
        softmax_in_place(row);
    }
    out
}

const LN2_HI: f64 = 6.931_471_803_691_238e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;

/// Branch-free `e^x`, within a couple of ulps of `f64::exp` on
/// `[-708, 709]`; inputs outside that range are clamped. Loops over it
/// vectorize, which the libm call does not.
#[inline]
pub fn exp(x: f64) -> f64 {
    // adding 1.5 * 2^52 rounds to an integer held in the low mantissa bits
    const SHIFT: f64 = 6_755_399_441_055_744.0;
    let x = x.clamp(-708.0, 709.0);
    let t = x * std::f64::consts::LOG2_E + SHIFT;
    let n = t - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    // Taylor series of e^r to degree 13; |r| <= ln2 / 2
    let mut p = 1.0 / 6_227_020_800.0;
    for k in (1..13).rev() {
        p = p * r + INV_FACTORIAL[k];
    }
    p = p * r + 1.0;
    let k = t.to_bits().wrapping_sub(SHIFT.to_bits());
    p * f64::from_bits(k.wrapping_add(1023) << 52)
}

const INV_FACTORIAL: [f64; 13] = [
    1.0,
    1.0,
    1.0 / 2.0,
    1.0 / 6.0,
    1.0 / 24.0,
    1.0 / 120.0,
    1.0 / 720.0,
    1.0 / 5040.0,
    1.0 / 40_320.0,
    1.0 / 362_880.0,
    1.0 / 3_628_800.0,
    1.0 / 39_916_800.0,
    1.0 / 479_001_600.0,
];

/// `tanh` through [`exp`]; absolute error near 1e-16.
#[inline]
pub fn tanh(x: f64) -> f64 {
    1.0 - 2.0 / (exp(2.0 * x) + 1.0)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    for v in row.iter_mut() {
        *v = exp(*v - max);
    }
    let inv = 1.0 / row.iter().sum::<f64>();
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + exp(-x))
    } else {
        let e = exp(x);
        e / (1.0 + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

/// Tanh-approximated GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh(GELU_C * (x + 0.044715 * x * x * x)))
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = GELU_C * (x + 0.044715 * x * x * x);
    let t = tanh(inner);
    let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

/// Geometry of non-overlapping square-window attention.
#[derive(Clone, Copy, Debug)]
pub struct WindowSpec {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
}

impl WindowSpec {
    pub fn new(qkv: &Tensor, heads: usize, window: usize) -> Result<Self> {
        let (height, width, c3) = qkv.hwc()?;
        if c3 % 3 != 0 || heads == 0 || (c3 / 3) % heads != 0 {
            return Err(Error::Config(format!(
                "qkv has {c3} channels, not 3 x (heads={heads} x head_dim)"
            )));
        }
        if window == 0 || height % window != 0 || width % window != 0 {
            return Err(Error::Config(format!(
                "feature {height}x{width} is not divisible into {window}x{window} windows"
            )));
        }
        Ok(WindowSpec {
            height,
            width,
            dim: c3 / 3,
            heads,
            window,
        })
    }

    fn tokens(&self) -> usize {
        self.window * self.window
    }

    fn windows(&self) -> usize {
        (self.height / self.window) * (self.width / self.window)
    }

    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Flat pixel index of token `t` in window `win`.
    fn pixel(&self, win: usize, t: usize) -> usize {
        let per_row = self.width / self.window;
        let (wy, wx) = (win / per_row, win % per_row);
        let (ty, tx) = (t / self.window, t % self.window);
        (wy * self.window + ty) * self.width + wx * self.window + tx
    }

    /// Copies `head_dim` channels at `offset` of every token in `win` from a
    /// buffer with `stride` channels per pixel into `dst` (`[token][channel]`).
    fn gather(&self, src: &[f64], stride: usize, offset: usize, win: usize, dst: &mut [f64]) {
        let hd = self.head_dim();
        for (t, chunk) in dst.chunks_exact_mut(hd).enumerate() {
            let at = self.pixel(win, t) * stride + offset;
            chunk.copy_from_slice(&src[at..at + hd]);
        }
    }

    fn scatter(&self, src: &[f64], dst: &mut [f64], stride: usize, offset: usize, win: usize) {
        let hd = self.head_dim();
        for (t, chunk) in src.chunks_exact(hd).enumerate() {
            let at = self.pixel(win, t) * stride + offset;
            dst[at..at + hd].copy_from_slice(chunk);
        }
    }
}

/// Multi-head self-attention restricted to non-overlapping windows.
/// `qkv` packs `[q | k | v]` along channels. Returns the `[H, W, dim]`
/// output and the attention probabilities laid out
/// `[window][head][query][key]`.
pub fn window_attention(qkv: &Tensor, spec: &WindowSpec) -> (Tensor, Vec<f64>) {
    let (n, d, hd) = (spec.tokens(), spec.dim, spec.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let src = qkv.data();
    let mut out = vec![0.0; spec.height * spec.width * d];
    let mut probs = vec![0.0; spec.windows() * spec.heads * n * n];
    let (mut q, mut k, mut v, mut o) = (
        vec![0.0; n * hd],
        vec![0.0; n * hd],
        vec![0.0; n * hd],
        vec![0.0; n * hd],
    );
    for win in 0..spec.windows() {
        for head in 0..spec.heads {
            spec.gather(src, 3 * d, head * hd, win, &mut q);
            spec.gather(src, 3 * d, d + head * hd, win, &mut k);
            spec.gather(src, 3 * d, 2 * d + head * hd, win, &mut v);
            let p = &mut probs[(win * spec.heads + head) * n * n..][..n * n];
            gemm(n, hd, n, &q, false, &k, true, 0.0, p);
            for row in p.chunks_exact_mut(n) {
                row.iter_mut().for_each(|s| *s *= scale);
                softmax_in_place(row);
            }
            gemm(n, n, hd, p, false, &v, false, 0.0, &mut o);
            spec.scatter(&o, &mut out, d, head * hd, win);
        }
    }
    let out = Tensor::new(vec![spec.height, spec.width, d], out).expect("attention output shape");
    (out, probs)
}

pub fn window_attention_backward(
    qkv: &Tensor,
    probs: &[f64],
    grad_out: &[f64],
    spec: &WindowSpec,
) -> Vec<f64> {
    let (n, d, hd) = (spec.tokens(), spec.dim, spec.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    let src = qkv.data();
    let mut dqkv = vec![0.0; src.len()];
    let buf = || vec![0.0; n * hd];
    let (mut q, mut k, mut v, mut go) = (buf(), buf(), buf(), buf());
    let (mut dq, mut dk, mut dv) = (buf(), buf(), buf());
    let mut ds = vec![0.0; n * n];
    for win in 0..spec.windows() {
        for head in 0..spec.heads {
            let off = head * hd;
            spec.gather(src, 3 * d, off, win, &mut q);
            spec.gather(src, 3 * d, d + off, win, &mut k);
            spec.gather(src, 3 * d, 2 * d + off, win, &mut v);
            spec.gather(grad_out, d, off, win, &mut go);
            let p = &probs[(win * spec.heads + head) * n * n..][..n * n];
            // dV = P^T dO, dP = dO V^T
            gemm(n, n, hd, p, true, &go, false, 0.0, &mut dv);
            gemm(n, hd, n, &go, false, &v, true, 0.0, &mut ds);
            // softmax backward, then through the scaled scores
            for (row_ds, row_p) in ds.chunks_exact_mut(n).zip(p.chunks_exact(n)) {
                let dot: f64 = row_p.iter().zip(row_ds.iter()).map(|(a, b)| a * b).sum();
                for (g, &pv) in row_ds.iter_mut().zip(row_p) {
                    *g = pv * (*g - dot) * scale;
                }
            }
            gemm(n, n, hd, &ds, false, &k, false, 0.0, &mut dq);
            gemm(n, n, hd, &ds, true, &q, false, 0.0, &mut dk);
            spec.scatter(&dq, &mut dqkv, 3 * d, off, win);
            spec.scatter(&dk, &mut dqkv, 3 * d, d + off, win);
            spec.scatter(&dv, &mut dqkv, 3 * d, 2 * d + off, win);
        }
    }
    dqkv
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&[6, 5, 3], &mut rng);
        let mut w = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            w.set(&[1, 1, c, c], 1.0);
        }
        let y = conv2d(&x, &w, Some(&Tensor::zeros(&[3])), 1, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_kernel_counts_taps() {
        let x = Tensor::full(&[4, 4, 1], 1.0);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0);
        let y = conv2d(&x, &w, None, 1, 1).unwrap();
        let expect = [
            [4.0, 6.0, 6.0, 4.0],
            [6.0, 9.0, 9.0, 6.0],
            [6.0, 9.0, 9.0, 6.0],
            [4.0, 6.0, 6.0, 4.0],
        ];
        for (i, row) in expect.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_eq!(y.get(&[i, j, 0]), *v);
            }
        }
    }

    #[test]
    fn gemm_path_matches_direct_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(&[9, 9, 3], &mut rng);
        for (k, stride, pad) in [(3, 1, 1), (1, 1, 0), (3, 2, 1), (5, 1, 2)] {
            let w = random(&[k, k, 3, 4], &mut rng);
            let b = random(&[4], &mut rng);
            let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
            let slow = conv2d_direct(&x, &w, Some(&b), stride, pad).unwrap();
            assert!(fast.max_abs_diff(&slow) <= 1e-12, "k={k} stride={stride}");
        }
    }

    #[test]
    fn conv_is_linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[8, 8, 3], &mut rng);
        let y = random(&[8, 8, 3], &mut rng);
        let w = random(&[3, 3, 3, 5], &mut rng);
        let (a, b) = (0.7, -1.3);
        let mix = Tensor::from_fn(&[8, 8, 3], |i| a * x.data()[i] + b * y.data()[i]);
        let lhs = conv2d(&mix, &w, None, 1, 1).unwrap();
        let cx = conv2d(&x, &w, None, 1, 1).unwrap();
        let cy = conv2d(&y, &w, None, 1, 1).unwrap();
        let rhs = Tensor::from_fn(lhs.shape(), |i| a * cx.data()[i] + b * cy.data()[i]);
        assert!(lhs.max_abs_diff(&rhs) <= 1e-10);
    }

    #[test]
    fn rejects_bad_geometry() {
        let x = Tensor::zeros(&[6, 6, 2]);
        let even = Tensor::zeros(&[2, 2, 2, 1]);
        assert!(matches!(
            conv2d(&x, &even, None, 1, 0),
            Err(Error::Config(_))
        ));
        let w = Tensor::zeros(&[3, 3, 2, 1]);
        assert!(matches!(conv2d(&x, &w, None, 2, 0), Err(Error::Config(_))));
        let wrong_cin = Tensor::zeros(&[3, 3, 4, 1]);
        assert!(matches!(
            conv2d(&x, &wrong_cin, None, 1, 1),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let t = Tensor::full(&[2, 7], 3.3);
        let s = softmax_last(&t);
        for v in s.data() {
            assert!((v - 1.0 / 7.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let qkv = random(&[16, 16, 48], &mut rng);
        let spec = WindowSpec::new(&qkv, 4, 8).unwrap();
        let (_, probs) = window_attention(&qkv, &spec);
        for row in probs.chunks_exact(64) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
        }
    }

    #[test]
    fn attention_does_not_cross_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qkv = random(&[16, 16, 48], &mut rng);
        let spec = WindowSpec::new(&qkv, 4, 8).unwrap();
        let (base, _) = window_attention(&qkv, &spec);
        let mut bumped = qkv.clone();
        // perturb every channel of the top-left window only
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..48 {
                    let v = bumped.get(&[y, x, c]);
                    bumped.set(&[y, x, c], v + rng.random_range(-1.0..1.0));
                }
            }
        }
        let (moved, _) = window_attention(&bumped, &spec);
        for y in 0..16 {
            for x in 0..16 {
                let inside = y < 8 && x < 8;
                for c in 0..16 {
                    let same = base.get(&[y, x, c]) == moved.get(&[y, x, c]);
                    assert_eq!(same, !inside, "({y},{x},{c})");
                }
            }
        }
    }

    #[test]
    fn polynomial_exp_tracks_libm() {
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -700.0 + 1400.0 * i as f64 / 200_000.0;
            worst = worst.max((exp(x) - x.exp()).abs() / x.exp());
        }
        assert!(worst < 1e-15, "{worst}");
        assert_eq!(exp(0.0), 1.0);
        assert!(exp(f64::NAN).is_nan());
        for x in [-3.0, -0.1, 1e-9, 0.5, 4.0, 30.0] {
            assert!((tanh(x) - f64::tanh(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_grad_matches_central_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
