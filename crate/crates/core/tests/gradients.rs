use deformer::freq::{self, lfb_forward};
use deformer::fusion::{self, GateKind};
use deformer::gradcheck::{
    grad_check, grad_check_params, random_projection, GradCheckOptions, GradCheckReport,
};
use deformer::graph::BatchNormMode;
use deformer::model::{forward, init_weights};
use deformer::params::ParamBuilder;
use deformer::rgb::{self, BlockShape};
use deformer::verify::BLOCK_STEP;
use deformer::{Mode, ModelConfig, ModelParams, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn names_of(params: &ModelParams) -> Vec<String> {
    params
        .trainable_names()
        .into_iter()
        .filter(|n| !n.ends_with("curvature"))
        .collect()
}

fn assert_within(report: &GradCheckReport, tol: f64, what: &str) {
    assert!(report.probes > 0, "{what}: nothing probed");
    assert!(report.max_rel_error <= tol, "{what}: {report:?}");
}

const BLOCK16: BlockShape = BlockShape {
    channels: 16,
    heads: 4,
    window: 8,
    mlp_ratio: 4,
};

#[test]
fn conv_norm_activation_chain() {
    let inputs = [
        random(&[6, 6, 3], -1.0, 1.0, 1),
        random(&[3, 3, 3, 4], -0.5, 0.5, 2),
        random(&[4], -0.1, 0.1, 3),
        random(&[4], 0.5, 1.5, 4),
        random(&[4], -0.2, 0.2, 5),
    ];
    let opts = GradCheckOptions {
        probes: 20,
        ..GradCheckOptions::default()
    };
    let report = grad_check(&inputs, &opts, |g, v| {
        let y = g.conv2d(v[0], v[1], Some(v[2]), 1, 1)?;
        let (y, _) = g.batch_norm(y, v[3], v[4], BatchNormMode::Train)?;
        let y = g.gelu(y);
        random_projection(g, y, 9)
    })
    .unwrap();
    assert_within(&report, 1e-6, "conv-bn-gelu");
}

#[test]
fn cfe_block_on_full_band_feature() {
    let mut b = ParamBuilder::new(21);
    freq::init_cfe(&mut b, "cfe", ModelConfig::default().cfe_units);
    let params = b.finish();
    let x = random(&[8, 8, 192], -1.0, 1.0, 22);
    let opts = GradCheckOptions {
        h: BLOCK_STEP,
        probes: 3,
        ..GradCheckOptions::default()
    };
    let report = grad_check_params(
        &params,
        &names_of(&params),
        &[x],
        Mode::Train,
        &opts,
        |ctx, v| {
            let y = freq::cfe_forward(ctx, v[0], "cfe")?;
            random_projection(&mut ctx.graph, y, 23)
        },
    )
    .unwrap();
    assert_within(&report, 1e-5, "cfe");
}

#[test]
fn transformer_block() {
    let mut b = ParamBuilder::new(31);
    rgb::init_transformer_block(&mut b, "t", BLOCK16);
    let params = b.finish();
    let x = random(&[16, 16, 16], -1.0, 1.0, 32);
    let report = grad_check_params(
        &params,
        &names_of(&params),
        &[x],
        Mode::Train,
        &GradCheckOptions {
            h: BLOCK_STEP,
            ..GradCheckOptions::default()
        },
        |ctx, v| {
            let y = rgb::transformer_block(ctx, v[0], "t", BLOCK16)?;
            random_projection(&mut ctx.graph, y, 33)
        },
    )
    .unwrap();
    assert_within(&report, 1e-5, "transformer block");
}

#[test]
fn fusion_chain_at_16x16x16() {
    for gate in [GateKind::PerChannel, GateKind::SingleMap] {
        let mut b = ParamBuilder::new(41);
        fusion::init_cdf(&mut b, "cdf", 16, gate);
        fusion::init_out_proj(&mut b, "fusion", 32, 16);
        let params = b.finish();
        let a = random(&[16, 16, 16], -1.0, 1.0, 42);
        let c = random(&[16, 16, 16], -1.0, 1.0, 43);
        let report = grad_check_params(
            &params,
            &names_of(&params),
            &[a, c],
            Mode::Train,
            &GradCheckOptions {
                h: BLOCK_STEP,
                ..GradCheckOptions::default()
            },
            |ctx, v| {
                let y = fusion::cdf_forward(ctx, v[0], v[1], "cdf", "fusion.out_proj")?;
                random_projection(&mut ctx.graph, y, 44)
            },
        )
        .unwrap();
        assert_within(&report, 1e-5, gate.as_str());
    }
}

#[test]
fn frequency_branch_from_pixels() {
    let mut b = ParamBuilder::new(51);
    freq::init_lfb(&mut b, "lfb", 16, Some(2));
    let params = b.finish();
    let img = random(&[16, 16, 3], 0.0, 1.0, 52);
    let opts = GradCheckOptions {
        h: BLOCK_STEP,
        probes: 4,
        ..GradCheckOptions::default()
    };
    let report = grad_check_params(
        &params,
        &names_of(&params),
        &[img],
        Mode::Train,
        &opts,
        |ctx, v| {
            let y = lfb_forward(ctx, v[0], "lfb", true)?;
            random_projection(&mut ctx.graph, y, 53)
        },
    )
    .unwrap();
    assert_within(&report, 1e-5, "lfb");
}

#[test]
fn full_model_end_to_end() {
    let config = ModelConfig::default();
    let params = init_weights(&config, 61).unwrap();
    let img = random(&[16, 16, 3], 0.0, 1.0, 62);
    let opts = GradCheckOptions {
        h: BLOCK_STEP,
        probes: 1,
        seed: 3,
    };
    for mode in [Mode::Train, Mode::Eval] {
        let report = grad_check_params(
            &params,
            &names_of(&params),
            std::slice::from_ref(&img),
            mode,
            &opts,
            |ctx, v| {
                let y = forward(ctx, v[0], &config)?;
                random_projection(&mut ctx.graph, y, 63)
            },
        )
        .unwrap();
        assert_within(&report, 1e-4, &format!("{mode:?}"));
    }
}
