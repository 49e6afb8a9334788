//! Cross domain fusion of the RGB and frequency features: pooled channel
//! weights per domain, cross addition with concatenation, a sigmoid spatial
//! gate, and a projection back to the trunk width.

use crate::error::{Error, Result};
use crate::graph::Var;
use crate::params::{Ctx, ParamBuilder};

/// How the spatial gate covers the concatenated feature.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GateKind {
    /// One gate per channel and position.
    #[default]
    PerChannel,
    /// One gate per position, shared by all channels.
    SingleMap,
}

impl GateKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GateKind::PerChannel => "per_channel",
            GateKind::SingleMap => "single_map",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_channel" => Ok(GateKind::PerChannel),
            "single_map" => Ok(GateKind::SingleMap),
            other => Err(Error::Config(format!("unknown gate kind `{other}`"))),
        }
    }
}

pub fn init_cdf(b: &mut ParamBuilder, prefix: &str, channels: usize, gate: GateKind) {
    let c = channels;
    b.conv(&format!("{prefix}.filter_rgb"), 1, c, c, true);
    b.conv(&format!("{prefix}.filter_f"), 1, c, c, true);
    let gate_out = match gate {
        GateKind::PerChannel => 2 * c,
        GateKind::SingleMap => 1,
    };
    b.conv(&format!("{prefix}.spatial"), 1, 2 * c, gate_out, true);
}

pub fn init_out_proj(b: &mut ParamBuilder, prefix: &str, cin: usize, cout: usize) {
    b.conv(&format!("{prefix}.out_proj"), 1, cin, cout, true);
}

/// `sigmoid(filter(GAP(F)))` as a `[1, 1, C]` weight vector.
pub fn domain_weights(ctx: &mut Ctx<'_>, f: Var, filter: &str) -> Result<Var> {
    let pooled = ctx.graph.global_avg_pool(f)?;
    let z = ctx.conv(pooled, filter, 1, 0)?;
    Ok(ctx.graph.sigmoid(z))
}

/// `relu([w_rgb * F_rgb + F_f || w_f * F_f + F_rgb])`, RGB-weighted half first.
pub fn cross_fuse(ctx: &mut Ctx<'_>, f_rgb: Var, f_f: Var, w_rgb: Var, w_f: Var) -> Result<Var> {
    let g = &mut ctx.graph;
    g.value(f_rgb)
        .ensure_same_shape(g.value(f_f), "cross fusion")?;
    let a = g.channel_scale(f_rgb, w_rgb)?;
    let a = g.add(a, f_f)?;
    let b = g.channel_scale(f_f, w_f)?;
    let b = g.add(b, f_rgb)?;
    let cat = g.concat(&[a, b])?;
    Ok(g.relu(cat))
}

/// Gates `I` by `sigmoid(spatial(I))`; returns the gated, unprojected map.
pub fn spatial_gate(ctx: &mut Ctx<'_>, fused: Var, prefix: &str) -> Result<Var> {
    let (h, w, c) = ctx.graph.value(fused).hwc()?;
    let z = ctx.conv(fused, &format!("{prefix}.spatial"), 1, 0)?;
    let gate = ctx.graph.sigmoid(z);
    let gate = match ctx.graph.value(gate).shape()[2] {
        1 => {
            let index: Vec<usize> = (0..h * w).flat_map(|p| std::iter::repeat_n(p, c)).collect();
            ctx.graph.gather(gate, index, &[h, w, c])?
        }
        gc if gc == c => gate,
        gc => {
            return Err(Error::Dimension(format!(
                "spatial gate has {gc} channels for a {c}-channel input"
            )))
        }
    };
    ctx.graph.mul(gate, fused)
}

/// Full fusion: domain weights, cross fusion, gate, projection.
pub fn cdf_forward(
    ctx: &mut Ctx<'_>,
    f_rgb: Var,
    f_f: Var,
    prefix: &str,
    out_proj: &str,
) -> Result<Var> {
    let w_rgb = domain_weights(ctx, f_rgb, &format!("{prefix}.filter_rgb"))?;
    let w_f = domain_weights(ctx, f_f, &format!("{prefix}.filter_f"))?;
    let fused = cross_fuse(ctx, f_rgb, f_f, w_rgb, w_f)?;
    let gated = spatial_gate(ctx, fused, prefix)?;
    ctx.conv(gated, out_proj, 1, 0)
}

/// Ablation fusion: elementwise sum followed by a 1x1 convolution.
pub fn additive_fusion(ctx: &mut Ctx<'_>, f_rgb: Var, f_f: Var, out_proj: &str) -> Result<Var> {
    let s = ctx.graph.add(f_rgb, f_f)?;
    ctx.conv(s, out_proj, 1, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Mode;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn params(seed: u64) -> crate::params::ModelParams {
        let mut b = ParamBuilder::new(seed);
        init_cdf(&mut b, "cdf", 16, GateKind::PerChannel);
        init_out_proj(&mut b, "fusion", 32, 16);
        b.finish()
    }

    #[test]
    fn zero_filter_gives_half_weights() {
        let mut p = params(1);
        for n in ["cdf.filter_rgb.weight", "cdf.filter_rgb.bias"] {
            p.get_mut(n).unwrap().data_mut().fill(0.0);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ctx = Ctx::new(&p, Mode::Eval, false);
        let f = ctx.graph.constant(random(&[8, 8, 16], &mut rng));
        let w = domain_weights(&mut ctx, f, "cdf.filter_rgb").unwrap();
        assert!(ctx.graph.value(w).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn symmetric_inputs_give_identical_halves() {
        let p = params(3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f0 = random(&[8, 8, 16], &mut rng);
        let w0 = Tensor::from_fn(&[1, 1, 16], |_| rng.random());
        let mut ctx = Ctx::new(&p, Mode::Eval, false);
        let f = ctx.graph.constant(f0.clone());
        let g = ctx.graph.constant(f0);
        let w = ctx.graph.constant(w0.clone());
        let v = ctx.graph.constant(w0);
        let i = cross_fuse(&mut ctx, f, g, w, v).unwrap();
        for row in ctx.graph.value(i).data().chunks_exact(32) {
            assert_eq!(row[..16], row[16..]);
        }
    }

    #[test]
    fn zero_inputs_fuse_to_zero_and_project_to_bias() {
        let p = params(5);
        let mut ctx = Ctx::new(&p, Mode::Eval, false);
        let z = ctx.graph.constant(Tensor::zeros(&[8, 8, 16]));
        let z2 = ctx.graph.constant(Tensor::zeros(&[8, 8, 16]));
        let out = cdf_forward(&mut ctx, z, z2, "cdf", "fusion.out_proj").unwrap();
        let bias = p.get("fusion.out_proj.bias").unwrap().data();
        for row in ctx.graph.value(out).data().chunks_exact(16) {
            assert_eq!(row, bias);
        }
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let p = params(6);
        let mut ctx = Ctx::new(&p, Mode::Eval, false);
        let a = ctx.graph.constant(Tensor::zeros(&[8, 8, 16]));
        let b = ctx.graph.constant(Tensor::zeros(&[8, 16, 16]));
        let w = ctx.graph.constant(Tensor::full(&[1, 1, 16], 0.5));
        assert!(matches!(
            cross_fuse(&mut ctx, a, b, w, w),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn single_map_gate_runs() {
        let mut b = ParamBuilder::new(7);
        init_cdf(&mut b, "cdf", 16, GateKind::SingleMap);
        init_out_proj(&mut b, "fusion", 32, 16);
        let p = b.finish();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ctx = Ctx::new(&p, Mode::Eval, false);
        let a = ctx.graph.constant(random(&[8, 8, 16], &mut rng));
        let c = ctx.graph.constant(random(&[8, 8, 16], &mut rng));
        let out = cdf_forward(&mut ctx, a, c, "cdf", "fusion.out_proj").unwrap();
        assert_eq!(ctx.graph.value(out).shape(), &[8, 8, 16]);
    }
}
