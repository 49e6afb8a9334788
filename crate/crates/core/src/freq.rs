//! Learnable frequency branch: curvature scoring of band channels, the 3:1
//! high/low split, the two enhancement paths, and projection back to a
//! 16-channel spatial feature.

use crate::dct::{self, FrequencyFeature, BANDS, BLOCK, FREQ_CHANNELS, RGB_TO_YCBCR};
use crate::error::{Error, Result};
use crate::graph::{Var, LEAKY_SLOPE};
use crate::kernels::{self, Padding};
use crate::params::{Ctx, Mode, ModelParams, ParamBuilder};
use crate::tensor::Tensor;

/// Zero-sum, flip-symmetric 3x3 curvature stencil used at initialization.
pub const CURVATURE_INIT: [f64; 9] = [
    -1.0 / 16.0,
    5.0 / 16.0,
    -1.0 / 16.0,
    5.0 / 16.0,
    -1.0,
    5.0 / 16.0,
    -1.0 / 16.0,
    5.0 / 16.0,
    -1.0 / 16.0,
];

#[derive(Clone, Debug, PartialEq)]
pub struct CurvatureKernel {
    pub weights: [f64; 9],
    pub learnable: bool,
}

impl Default for CurvatureKernel {
    fn default() -> Self {
        CurvatureKernel {
            weights: CURVATURE_INIT,
            learnable: true,
        }
    }
}

impl CurvatureKernel {
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.numel() != 9 {
            return Err(Error::Dimension(format!(
                "curvature kernel needs 9 values, got {:?}",
                t.shape()
            )));
        }
        let mut weights = [0.0; 9];
        weights.copy_from_slice(t.data());
        Ok(CurvatureKernel {
            weights,
            learnable: true,
        })
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![3, 3], self.weights.to_vec()).expect("3x3 kernel")
    }
}

/// Depthwise response of the curvature stencil. Borders replicate the edge
/// pixel, so a constant channel has zero curvature everywhere.
pub fn curvature_map(x: &Tensor, kernel: &CurvatureKernel) -> Result<Tensor> {
    kernels::depthwise3x3(x, &kernel.weights, Padding::Replicate)
}

/// Per-channel spatial sum of curvature magnitude.
pub fn energy_vector(curvature: &Tensor) -> Result<Vec<f64>> {
    let (_, _, c) = curvature.hwc()?;
    let mut e = vec![0.0; c];
    for row in curvature.data().chunks_exact(c.max(1)) {
        for (acc, v) in e.iter_mut().zip(row) {
            *acc += v.abs();
        }
    }
    Ok(e)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelPartition {
    pub energies: Vec<f64>,
    /// Channels by descending energy, ties by ascending index.
    pub order: Vec<usize>,
    pub high: Vec<usize>,
    pub low: Vec<usize>,
}

impl ChannelPartition {
    /// `inverse[c]` is the position of channel `c` in `high ++ low`.
    pub fn inverse(&self) -> Vec<usize> {
        let mut inv = vec![0; self.order.len()];
        for (pos, &ch) in self.high.iter().chain(&self.low).enumerate() {
            inv[ch] = pos;
        }
        inv
    }
}

/// Splits channels `high:low` by descending energy; the high group gets
/// `ceil(C * high / (high + low))` channels.
pub fn partition_channels(energies: &[f64], ratio: (usize, usize)) -> Result<ChannelPartition> {
    let c = energies.len();
    if c < 4 {
        return Err(Error::Config(format!(
            "partition needs at least 4 channels, got {c}"
        )));
    }
    let (hi, lo) = ratio;
    if hi + lo == 0 {
        return Err(Error::Config("empty partition ratio".into()));
    }
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| energies[b].total_cmp(&energies[a]).then(a.cmp(&b)));
    let n_high = (c * hi).div_ceil(hi + lo);
    Ok(ChannelPartition {
        energies: energies.to_vec(),
        high: order[..n_high].to_vec(),
        low: order[n_high..].to_vec(),
        order,
    })
}

pub const SPLIT_RATIO: (usize, usize) = (3, 1);

pub fn high_count(channels: usize) -> usize {
    (channels * SPLIT_RATIO.0).div_ceil(SPLIT_RATIO.0 + SPLIT_RATIO.1)
}

/// Registers CFE parameters under `prefix`.
pub fn init_cfe(b: &mut ParamBuilder, prefix: &str, units: usize) {
    let hi = high_count(FREQ_CHANNELS);
    let lo = FREQ_CHANNELS - hi;
    b.set(
        &format!("{prefix}.curvature"),
        CurvatureKernel::default().to_tensor(),
    );
    for u in 0..units {
        b.conv(&format!("{prefix}.high.{u}.conv"), 3, hi, hi, false);
        b.batch_norm(&format!("{prefix}.high.{u}.bn"), hi);
    }
    b.conv(&format!("{prefix}.low.conv"), 3, lo, lo, false);
}

pub fn cfe_units(params: &ModelParams, prefix: &str) -> usize {
    (0..)
        .take_while(|u| {
            params
                .get(&format!("{prefix}.high.{u}.conv.weight"))
                .is_some()
        })
        .count()
}

/// Scores the band channels of `x` and returns the partition that routes
/// them. Routing is a discrete choice: no gradient flows through it.
pub fn route(ctx: &Ctx<'_>, x: Var, prefix: &str) -> Result<ChannelPartition> {
    let kernel =
        CurvatureKernel::from_tensor(ctx.params().require(&format!("{prefix}.curvature"))?)?;
    let curv = curvature_map(ctx.graph.value(x), &kernel)?;
    partition_channels(&energy_vector(&curv)?, SPLIT_RATIO)
}

/// Curvature-routed enhancement of a `[h, w, 192]` band feature. The deep
/// residual path runs on the high-curvature channels, a single 3x3
/// calibration on the rest; output channels return to canonical order.
pub fn cfe_forward(ctx: &mut Ctx<'_>, x: Var, prefix: &str) -> Result<Var> {
    let (_, _, c) = ctx.graph.value(x).hwc()?;
    if c != FREQ_CHANNELS {
        return Err(Error::Config(format!(
            "CFE expects {FREQ_CHANNELS} band channels, got {c}"
        )));
    }
    let part = route(ctx, x, prefix)?;
    // binds the kernel so it is reachable from the forward pass
    ctx.p(&format!("{prefix}.curvature"))?;

    let high = ctx.graph.gather_channels(x, &part.high)?;
    let low = ctx.graph.gather_channels(x, &part.low)?;

    let mut g = high;
    for u in 0..cfe_units(ctx.params(), prefix) {
        g = ctx.conv_same(g, &format!("{prefix}.high.{u}.conv"))?;
        g = ctx.batch_norm(g, &format!("{prefix}.high.{u}.bn"))?;
        g = ctx.graph.relu(g);
    }
    let high = ctx.graph.add(high, g)?;
    let low = ctx.conv_same(low, &format!("{prefix}.low.conv"))?;
    let cat = ctx.graph.concat(&[high, low])?;
    ctx.graph.gather_channels(cat, &part.inverse())
}

/// Runs CFE on a standalone band feature.
pub fn cfe_apply(
    feature: &FrequencyFeature,
    params: &ModelParams,
    prefix: &str,
    mode: Mode,
) -> Result<FrequencyFeature> {
    if !feature.has_identity_order() {
        return Err(Error::Usage(
            "CFE input must be in canonical channel order".into(),
        ));
    }
    let mut ctx = Ctx::new(params, mode, false);
    let x = ctx.graph.constant(feature.data.clone());
    let y = cfe_forward(&mut ctx, x, prefix)?;
    Ok(FrequencyFeature::identity(ctx.graph.value(y).clone()))
}

/// Flat source index for each output element of depth-to-space.
fn depth_to_space_index(gh: usize, gw: usize, planes: usize) -> Vec<usize> {
    let (h, w) = (gh * BLOCK, gw * BLOCK);
    let c = planes * BANDS;
    let mut index = vec![0; h * w * planes];
    for y in 0..h {
        for x in 0..w {
            let (i, u, j, v) = (y / BLOCK, y % BLOCK, x / BLOCK, x % BLOCK);
            for p in 0..planes {
                index[(y * w + x) * planes + p] = (i * gw + j) * c + p * BANDS + u * BLOCK + v;
            }
        }
    }
    index
}

fn planes_of(c: usize) -> Result<usize> {
    if c == 0 || !c.is_multiple_of(BANDS) {
        return Err(Error::Dimension(format!(
            "{c} channels is not a multiple of 64"
        )));
    }
    Ok(c / BANDS)
}

/// `[h, w, 64 P] -> [8h, 8w, P]`: channel `p * 64 + u * 8 + v` of cell
/// `(i, j)` moves to pixel `(8i + u, 8j + v)`, plane `p`.
pub fn depth_to_space(feature: &FrequencyFeature) -> Result<Tensor> {
    if !feature.has_identity_order() {
        return Err(Error::Usage(
            "depth_to_space needs canonical channel order".into(),
        ));
    }
    let (gh, gw, c) = feature.data.hwc()?;
    let planes = planes_of(c)?;
    let index = depth_to_space_index(gh, gw, planes);
    let src = feature.data.data();
    Tensor::new(
        vec![gh * BLOCK, gw * BLOCK, planes],
        index.iter().map(|&i| src[i]).collect(),
    )
}

pub fn space_to_depth(x: &Tensor) -> Result<FrequencyFeature> {
    let (h, w, planes) = x.hwc()?;
    if h % BLOCK != 0 || w % BLOCK != 0 {
        return Err(Error::CropRequired {
            height: h,
            width: w,
        });
    }
    let (gh, gw) = (h / BLOCK, w / BLOCK);
    let index = depth_to_space_index(gh, gw, planes);
    let mut out = vec![0.0; x.numel()];
    for (src, &dst) in x.data().iter().zip(&index) {
        out[dst] = *src;
    }
    Ok(FrequencyFeature::identity(Tensor::new(
        vec![gh, gw, planes * BANDS],
        out,
    )?))
}

pub fn depth_to_space_var(ctx: &mut Ctx<'_>, x: Var) -> Result<Var> {
    let (gh, gw, c) = ctx.graph.value(x).hwc()?;
    let planes = planes_of(c)?;
    let index = depth_to_space_index(gh, gw, planes);
    ctx.graph
        .gather(x, index, &[gh * BLOCK, gw * BLOCK, planes])
}

pub fn init_lfb(b: &mut ParamBuilder, prefix: &str, channels: usize, cfe_units: Option<usize>) {
    if let Some(units) = cfe_units {
        init_cfe(b, &format!("{prefix}.cfe"), units);
    }
    b.conv(&format!("{prefix}.conv"), 3, 3, channels, true);
}

/// Image `[H, W, 3]` -> frequency feature `[H, W, channels]`:
/// YCbCr with zero-centred chroma, band packing, optional CFE,
/// depth-to-space, 3x3 projection, leaky ReLU. Without CFE the bands pass
/// through unchanged.
pub fn lfb_forward(ctx: &mut Ctx<'_>, img: Var, prefix: &str, with_cfe: bool) -> Result<Var> {
    let ycc = ctx.graph.color_matrix(img, RGB_TO_YCBCR, [0.0; 3])?;
    let bands = ctx.graph.block_dct_pack(ycc)?;
    let bands = if with_cfe {
        cfe_forward(ctx, bands, &format!("{prefix}.cfe"))?
    } else {
        bands
    };
    let spatial = depth_to_space_var(ctx, bands)?;
    let f = ctx.conv_same(spatial, &format!("{prefix}.conv"))?;
    Ok(ctx.graph.leaky_relu(f, LEAKY_SLOPE))
}

/// Band feature of an RGB image, as consumed by the branch.
pub fn image_bands(img: &Tensor) -> Result<FrequencyFeature> {
    dct::pack_bands(&dct::rgb_to_ycbcr(img)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn kernel_sums_to_zero_and_is_symmetric() {
        let k = CURVATURE_INIT;
        assert_eq!(k.iter().sum::<f64>(), 0.0);
        for r in 0..3 {
            for c in 0..3 {
                assert_eq!(k[r * 3 + c], k[r * 3 + (2 - c)]);
                assert_eq!(k[r * 3 + c], k[(2 - r) * 3 + c]);
            }
        }
    }

    fn interior(t: &Tensor, f: impl Fn(f64)) {
        let (h, w, c) = t.hwc().unwrap();
        for i in 1..h - 1 {
            for j in 1..w - 1 {
                for k in 0..c {
                    f(t.get(&[i, j, k]));
                }
            }
        }
    }

    #[test]
    fn curvature_of_constant_ramp_and_quadratic() {
        let k = CurvatureKernel::default();
        let constant = curvature_map(&Tensor::full(&[6, 6, 2], 3.0), &k).unwrap();
        assert!(constant.data().iter().all(|&v| v == 0.0));
        let ramp = Tensor::from_fn(&[6, 6, 1], |i| (i / 6) as f64);
        interior(&curvature_map(&ramp, &k).unwrap(), |v| assert_eq!(v, 0.0));
        let quad = Tensor::from_fn(&[7, 7, 1], |i| ((i / 7) * (i / 7)) as f64);
        interior(&curvature_map(&quad, &k).unwrap(), |v| {
            assert!((v - 0.375).abs() <= 1e-12)
        });
    }

    #[test]
    fn energy_uses_magnitudes() {
        let t = Tensor::from_fn(&[4, 4, 1], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
        assert_eq!(energy_vector(&t).unwrap(), vec![16.0]);
        let c = curvature_map(&Tensor::full(&[5, 4, 3], 2.0), &CurvatureKernel::default()).unwrap();
        assert_eq!(energy_vector(&c).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn partition_examples() {
        let p = partition_channels(&[5.0, 1.0, 2.0, 4.0], SPLIT_RATIO).unwrap();
        assert_eq!(p.high, vec![0, 3, 2]);
        assert_eq!(p.low, vec![1]);

        let flat = partition_channels(&[1.0; 192], SPLIT_RATIO).unwrap();
        assert_eq!(flat.high, (0..144).collect::<Vec<_>>());
        assert_eq!(flat.low, (144..192).collect::<Vec<_>>());

        assert!(partition_channels(&[1.0, 2.0, 3.0], SPLIT_RATIO).is_err());
    }

    #[test]
    fn depth_to_space_examples() {
        let mut x = Tensor::zeros(&[2, 2, 192]);
        x.set(&[1, 0, 191], 1.0);
        let f = FrequencyFeature::identity(x.clone());
        let y = depth_to_space(&f).unwrap();
        assert_eq!(y.shape(), &[16, 16, 3]);
        let nz: Vec<_> = (0..y.numel()).filter(|&i| y.data()[i] != 0.0).collect();
        assert_eq!(nz, vec![y.flat_index(&[15, 7, 2])]);
        assert_eq!(space_to_depth(&y).unwrap().data, x);
    }

    #[test]
    fn depth_to_space_rejects_permuted_order() {
        let mut f = FrequencyFeature::identity(Tensor::zeros(&[1, 1, 192]));
        f.channel_order.swap(0, 1);
        assert!(matches!(depth_to_space(&f), Err(Error::Usage(_))));
    }

    #[test]
    fn cfe_is_identity_with_zeroed_residual_and_identity_calibration() {
        let mut b = ParamBuilder::new(3);
        init_cfe(&mut b, "cfe", 2);
        let mut params = b.finish();
        params
            .get_mut("cfe.high.1.conv.weight")
            .unwrap()
            .data_mut()
            .fill(0.0);
        let low = params.get_mut("cfe.low.conv.weight").unwrap();
        low.data_mut().fill(0.0);
        for c in 0..48 {
            low.set(&[1, 1, c, c], 1.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = FrequencyFeature::identity(Tensor::from_fn(&[4, 4, 192], |_| {
            rng.random_range(-2.0..2.0)
        }));
        let y = cfe_apply(&x, &params, "cfe", Mode::Train).unwrap();
        assert_eq!(y.channel_order, x.channel_order);
        assert!(y.data.max_abs_diff(&x.data) <= 1e-12);
    }
}
