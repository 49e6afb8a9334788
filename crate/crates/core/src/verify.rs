//! Self-check suite run by `deformer verify`: transform oracles, packing
//! bijections, curvature analytics, routing, gradient checks, identity
//! initializations, metrics and checkpoint round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{decode, encode};
use crate::dct::{
    block_dct8, block_idct8, dct_naive_oracle, pack_bands, rgb_to_ycbcr, unpack_bands,
    FrequencyFeature, FREQ_CHANNELS,
};
use crate::error::Result;
use crate::freq::{
    self, cfe_apply, curvature_map, depth_to_space, energy_vector, partition_channels,
    space_to_depth, CurvatureKernel, SPLIT_RATIO,
};
use crate::fusion::{self, GateKind};
use crate::gradcheck::{grad_check_params, random_projection, GradCheckOptions};
use crate::metrics::{psnr, ssim, SSIM_C1};
use crate::model::{forward, ModelConfig};
use crate::params::{Ctx, Mode, ModelParams, ParamBuilder};
use crate::rgb::{self, BlockShape};
use crate::tensor::Tensor;
use crate::train::TrainState;

#[derive(Clone, Debug)]
pub struct GroupResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn random(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn check(ok: bool, detail: String) -> Result<(bool, String)> {
    Ok((ok, detail))
}

fn dct_oracle() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut fwd, mut inv) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let b = random(&[8, 8], -1.0, 1.0, &mut rng);
        let f = block_dct8(&b)?;
        fwd = fwd.max(f.max_abs_diff(&dct_naive_oracle(&b)?));
        inv = inv.max(block_idct8(&f)?.max_abs_diff(&b));
    }
    check(
        fwd <= 1e-10 && inv <= 1e-10,
        format!("oracle {fwd:.1e}, round trip {inv:.1e}"),
    )
}

fn parseval() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let b = random(&[8, 8], -1.0, 1.0, &mut rng);
        let f = block_dct8(&b)?;
        let e: f64 = b.data().iter().map(|v| v * v).sum();
        let ef: f64 = f.data().iter().map(|v| v * v).sum();
        worst = worst.max((e - ef).abs() / e);
    }
    check(worst <= 1e-10, format!("relative energy gap {worst:.1e}"))
}

fn packing() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let img = random(&[16, 24, 3], 0.0, 1.0, &mut rng);
    let ycc = rgb_to_ycbcr(&img)?;
    let back = unpack_bands(&pack_bands(&ycc)?)?;
    let band_err = back.planes.max_abs_diff(&ycc.planes);
    let feat = FrequencyFeature::identity(random(&[2, 3, FREQ_CHANNELS], -1.0, 1.0, &mut rng));
    let d2s = space_to_depth(&depth_to_space(&feat)?)?;
    let exact = d2s == feat;

    let mut one_hot = Tensor::zeros(&[2, 1, FREQ_CHANNELS]);
    one_hot.set(&[1, 0, 191], 1.0);
    let spatial = depth_to_space(&FrequencyFeature::identity(one_hot))?;
    let impulse = spatial.get(&[15, 7, 2]) == 1.0 && spatial.sum() == 1.0;
    check(
        band_err <= 1e-12 && exact && impulse,
        format!("bands {band_err:.1e}, depth/space exact {exact}, impulse {impulse}"),
    )
}

fn curvature() -> Result<(bool, String)> {
    let k = CurvatureKernel::default();
    let constant = curvature_map(&Tensor::full(&[8, 8, 2], 0.7), &k)?;
    let c0 = constant.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let ramp = curvature_map(
        &Tensor::from_fn(&[8, 8, 1], |i| 0.3 * (i / 8) as f64 - 0.2 * (i % 8) as f64),
        &k,
    )?;
    let quad = curvature_map(
        &Tensor::from_fn(&[8, 8, 1], |i| ((i / 8) as f64).powi(2)),
        &k,
    )?;
    let (mut r, mut q) = (0.0f64, 0.0f64);
    for i in 1..7 {
        for j in 1..7 {
            r = r.max(ramp.get(&[i, j, 0]).abs());
            q = q.max((quad.get(&[i, j, 0]) - 0.375).abs());
        }
    }
    check(
        c0 <= 1e-12 && r <= 1e-12 && q <= 1e-12,
        format!("constant {c0:.1e}, ramp {r:.1e}, quadratic {q:.1e}"),
    )
}

fn partition() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let e: Vec<f64> = (0..FREQ_CHANNELS)
        .map(|_| rng.random_range(0.0..10.0))
        .collect();
    let p = partition_channels(&e, SPLIT_RATIO)?;
    let scaled: Vec<f64> = e.iter().map(|v| v * 3.5).collect();
    let invariant = partition_channels(&scaled, SPLIT_RATIO)?.order == p.order;
    let ties = partition_channels(&vec![1.0; FREQ_CHANNELS], SPLIT_RATIO)?;
    let tie_ok = ties.order == (0..FREQ_CHANNELS).collect::<Vec<_>>();
    let sizes = p.high.len() == 144 && p.low.len() == 48;
    let e_ok = energy_vector(&curvature_map(
        &Tensor::full(&[3, 3, 2], 5.0),
        &CurvatureKernel::default(),
    )?)? == vec![0.0, 0.0];
    check(
        sizes && invariant && tie_ok && e_ok,
        format!("sizes {sizes}, scale invariance {invariant}, tie-break {tie_ok}"),
    )
}

const BLOCK16: BlockShape = BlockShape {
    channels: 16,
    heads: 4,
    window: 8,
    mlp_ratio: 4,
};

/// Central-difference step for whole blocks. At 1e-5, small gradient
/// entries under a loss of magnitude ~5 lose about 1e-5 relative accuracy
/// to rounding in the difference quotient.
pub const BLOCK_STEP: f64 = 1e-4;

/// Worst relative error over the CFE, transformer block, fusion chain and
/// full model checks.
fn gradients() -> Result<(bool, String)> {
    let opts = GradCheckOptions {
        h: BLOCK_STEP,
        probes: 4,
        ..GradCheckOptions::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(5);

    let mut b = ParamBuilder::new(10);
    freq::init_cfe(&mut b, "cfe", 2);
    let cfe_params = b.finish();
    let names = [
        "cfe.high.0.conv.weight",
        "cfe.high.1.bn.gamma",
        "cfe.low.conv.weight",
    ]
    .map(String::from);
    let x = random(&[8, 8, FREQ_CHANNELS], -1.0, 1.0, &mut rng);
    let cfe = grad_check_params(&cfe_params, &names, &[x], Mode::Train, &opts, |ctx, v| {
        let y = freq::cfe_forward(ctx, v[0], "cfe")?;
        random_projection(&mut ctx.graph, y, 1)
    })?;

    let mut b = ParamBuilder::new(11);
    rgb::init_transformer_block(&mut b, "t", BLOCK16);
    let t_params = b.finish();
    let names: Vec<String> = t_params.trainable_names().into_iter().collect();
    let x = random(&[16, 16, 16], -1.0, 1.0, &mut rng);
    let block = grad_check_params(&t_params, &names, &[x], Mode::Train, &opts, |ctx, v| {
        let y = rgb::transformer_block(ctx, v[0], "t", BLOCK16)?;
        random_projection(&mut ctx.graph, y, 2)
    })?;

    let mut b = ParamBuilder::new(12);
    fusion::init_cdf(&mut b, "cdf", 16, GateKind::PerChannel);
    fusion::init_out_proj(&mut b, "fusion", 32, 16);
    let f_params = b.finish();
    let names: Vec<String> = f_params.trainable_names().into_iter().collect();
    let a = random(&[8, 8, 16], -1.0, 1.0, &mut rng);
    let c = random(&[8, 8, 16], -1.0, 1.0, &mut rng);
    let cdf = grad_check_params(&f_params, &names, &[a, c], Mode::Train, &opts, |ctx, v| {
        let y = fusion::cdf_forward(ctx, v[0], v[1], "cdf", "fusion.out_proj")?;
        random_projection(&mut ctx.graph, y, 3)
    })?;

    let config = ModelConfig {
        cfe_units: 2,
        ..ModelConfig::default()
    };
    let m_params = crate::model::init_weights(&config, 13)?;
    let names: Vec<String> = m_params
        .trainable_names()
        .into_iter()
        .filter(|n| !n.ends_with("curvature"))
        .collect();
    let img = random(&[16, 16, 3], 0.0, 1.0, &mut rng);
    let model_opts = GradCheckOptions { probes: 1, ..opts };
    let full = grad_check_params(
        &m_params,
        &names,
        &[img],
        Mode::Train,
        &model_opts,
        |ctx, v| {
            let y = forward(ctx, v[0], &config)?;
            random_projection(&mut ctx.graph, y, 4)
        },
    )?;

    let local = cfe
        .max_rel_error
        .max(block.max_rel_error)
        .max(cdf.max_rel_error);
    check(
        local <= 1e-5 && full.max_rel_error <= 1e-4,
        format!(
            "cfe {:.1e}, block {:.1e}, cdf {:.1e}, model {:.1e}",
            cfe.max_rel_error, block.max_rel_error, cdf.max_rel_error, full.max_rel_error
        ),
    )
}

/// Zeroes the output projections of the transformer block at `prefix`.
pub fn zero_block_outputs(params: &mut ModelParams, prefix: &str) {
    for suffix in ["proj.weight", "proj.bias", "mlp.fc2.weight", "mlp.fc2.bias"] {
        if let Some(t) = params.get_mut(&format!("{prefix}.{suffix}")) {
            t.data_mut().fill(0.0);
        }
    }
}

/// Zeroes the last high-path conv and makes the low calibration conv an
/// identity, so the CFE at `prefix` passes its input through.
pub fn make_cfe_identity(params: &mut ModelParams, prefix: &str) {
    let units = freq::cfe_units(params, prefix);
    if units > 0 {
        if let Some(t) = params.get_mut(&format!("{prefix}.high.{}.conv.weight", units - 1)) {
            t.data_mut().fill(0.0);
        }
    }
    if let Some(low) = params.get_mut(&format!("{prefix}.low.conv.weight")) {
        let c = low.shape()[2];
        low.data_mut().fill(0.0);
        for ch in 0..c {
            low.set(&[1, 1, ch, ch], 1.0);
        }
    }
}

fn identity_init() -> Result<(bool, String)> {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut b = ParamBuilder::new(20);
    rgb::init_transformer_block(&mut b, "t", BLOCK16);
    rgb::init_rgb(&mut b, "rgb", BLOCK16)?;
    freq::init_cfe(&mut b, "cfe", 2);
    let mut params = b.finish();
    zero_block_outputs(&mut params, "t");
    for name in ["rgb.mul_conv.weight", "rgb.add_conv.weight"] {
        params.require(name)?;
        if let Some(t) = params.get_mut(name) {
            t.data_mut().fill(0.0);
        }
    }
    make_cfe_identity(&mut params, "cfe");

    let x0 = random(&[16, 16, 16], -1.0, 1.0, &mut rng);
    let mut ctx = Ctx::new(&params, Mode::Eval, false);
    let x = ctx.graph.constant(x0.clone());
    let y = rgb::transformer_block(&mut ctx, x, "t", BLOCK16)?;
    let block = ctx.graph.value(y).max_abs_diff(&x0);
    let y = rgb::rgb_forward(&mut ctx, x, "rgb", BLOCK16)?;
    let branch = ctx.graph.value(y).max_abs_diff(&x0);

    let f = FrequencyFeature::identity(random(&[4, 4, FREQ_CHANNELS], -2.0, 2.0, &mut rng));
    let cfe = cfe_apply(&f, &params, "cfe", Mode::Train)?
        .data
        .max_abs_diff(&f.data);
    check(
        block <= 1e-12 && branch <= 1e-12 && cfe <= 1e-12,
        format!("block {block:.1e}, rgb branch {branch:.1e}, cfe {cfe:.1e}"),
    )
}

fn metrics() -> Result<(bool, String)> {
    let a = Tensor::full(&[16, 16, 3], 0.25);
    let p = psnr(&a, &a.map(|v| v + 1.0 / 255.0), 1.0)?;
    let p_ok = (p - 20.0 * 255f64.log10()).abs() < 1e-9;
    let s = ssim(
        &Tensor::zeros(&[16, 16, 3]),
        &Tensor::full(&[16, 16, 3], 1.0),
    )?;
    let s_ok = (s - SSIM_C1 / (1.0 + SSIM_C1)).abs() < 1e-12;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = random(&[24, 24, 3], 0.0, 1.0, &mut rng);
    let y = random(&[24, 24, 3], 0.0, 1.0, &mut rng);
    let sym = (ssim(&x, &y)? - ssim(&y, &x)?).abs();
    let id = (ssim(&x, &x)? - 1.0).abs();
    check(
        p_ok && s_ok && sym <= 1e-12 && id <= 1e-9,
        format!("psnr {p:.4} dB, constant ssim {s:.4e}, symmetry {sym:.1e}"),
    )
}

fn checkpoint() -> Result<(bool, String)> {
    let mut state = TrainState::new(ModelConfig {
        cfe_units: 1,
        ..ModelConfig::default()
    })?;
    state.step = 17;
    state.epoch = 2;
    let bytes = encode(&state)?;
    let back = decode(&bytes)?;
    check(
        back == state,
        format!("{} bytes, bitwise equal {}", bytes.len(), back == state),
    )
}

type Group = (&'static str, fn() -> Result<(bool, String)>);

pub const GROUPS: &[Group] = &[
    ("dct-oracle", dct_oracle),
    ("parseval", parseval),
    ("packing", packing),
    ("curvature", curvature),
    ("partition", partition),
    ("gradients", gradients),
    ("identity-init", identity_init),
    ("metrics", metrics),
    ("checkpoint", checkpoint),
];

/// Runs every group, reporting each as it finishes. Errors count as
/// failures.
pub fn run_all(mut report: impl FnMut(&GroupResult)) -> Vec<GroupResult> {
    GROUPS
        .iter()
        .map(|(name, f)| {
            let (passed, detail) = match f() {
                Ok(r) => r,
                Err(e) => (false, e.to_string()),
            };
            let r = GroupResult {
                name,
                passed,
                detail,
            };
            report(&r);
            r
        })
        .collect()
}
