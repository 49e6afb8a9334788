//! RGB-domain branch: shallow features, windowed transformer blocks, and the
//! multiply/add maps that form the RGB feature.

use crate::error::Result;
use crate::graph::Var;
use crate::params::{Ctx, ParamBuilder};

/// Shape of one transformer block.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub channels: usize,
    pub heads: usize,
    pub window: usize,
    pub mlp_ratio: usize,
}

pub fn init_transformer_block(b: &mut ParamBuilder, prefix: &str, s: BlockShape) {
    let c = s.channels;
    b.layer_norm(&format!("{prefix}.ln1"), c);
    b.conv(&format!("{prefix}.qkv"), 1, c, 3 * c, true);
    b.conv(&format!("{prefix}.proj"), 1, c, c, true);
    b.layer_norm(&format!("{prefix}.ln2"), c);
    b.conv(&format!("{prefix}.mlp.fc1"), 1, c, s.mlp_ratio * c, true);
    b.conv(&format!("{prefix}.mlp.fc2"), 1, s.mlp_ratio * c, c, true);
}

/// Pre-norm residual block: window attention, then a GELU MLP.
pub fn transformer_block(ctx: &mut Ctx<'_>, x: Var, prefix: &str, s: BlockShape) -> Result<Var> {
    let n = ctx.layer_norm(x, &format!("{prefix}.ln1"))?;
    let qkv = ctx.conv(n, &format!("{prefix}.qkv"), 1, 0)?;
    let attn = ctx.graph.window_attention(qkv, s.heads, s.window)?;
    let attn = ctx.conv(attn, &format!("{prefix}.proj"), 1, 0)?;
    let x = ctx.graph.add(x, attn)?;

    let n = ctx.layer_norm(x, &format!("{prefix}.ln2"))?;
    let hidden = ctx.conv(n, &format!("{prefix}.mlp.fc1"), 1, 0)?;
    let hidden = ctx.graph.gelu(hidden);
    let out = ctx.conv(hidden, &format!("{prefix}.mlp.fc2"), 1, 0)?;
    ctx.graph.add(x, out)
}

pub fn init_shallow(b: &mut ParamBuilder, channels: usize) {
    b.conv("shallow", 3, 3, channels, true);
}

/// `[H, W, 3] -> F0: [H, W, C]`, a single 3x3 convolution.
pub fn shallow_conv(ctx: &mut Ctx<'_>, img: Var) -> Result<Var> {
    ctx.conv(img, "shallow", 1, 1)
}

pub fn init_rgb(b: &mut ParamBuilder, prefix: &str, s: BlockShape) -> Result<()> {
    let c = s.channels;
    init_transformer_block(b, &format!("{prefix}.mul_block"), s);
    b.conv(&format!("{prefix}.mul_conv"), 3, c, c, true);
    init_transformer_block(b, &format!("{prefix}.add_block"), s);
    b.conv(&format!("{prefix}.add_conv"), 3, c, c, true);
    // M starts at 1 and A at 0 up to the random weights
    b.fill(&format!("{prefix}.mul_conv.bias"), 1.0)?;
    b.fill(&format!("{prefix}.add_conv.bias"), 0.0)
}

/// `F_rgb = F0 * M + A`, with `M` and `A` predicted by separate blocks.
pub fn rgb_forward(ctx: &mut Ctx<'_>, f0: Var, prefix: &str, s: BlockShape) -> Result<Var> {
    let m = transformer_block(ctx, f0, &format!("{prefix}.mul_block"), s)?;
    let m = ctx.conv(m, &format!("{prefix}.mul_conv"), 1, 1)?;
    let a = transformer_block(ctx, f0, &format!("{prefix}.add_block"), s)?;
    let a = ctx.conv(a, &format!("{prefix}.add_conv"), 1, 1)?;
    let scaled = ctx.graph.mul(f0, m)?;
    ctx.graph.add(scaled, a)
}
