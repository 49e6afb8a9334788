//! Full enhancement network: configuration, seeded initialization, the
//! forward pass for each ablation variant, and size/cost accounting.

use std::fmt;

use crate::dct::{BLOCK, FREQ_CHANNELS};
use crate::error::{Error, Result};
use crate::freq;
use crate::fusion::{self, GateKind};
use crate::graph::{Var, LEAKY_SLOPE};
use crate::params::{Ctx, Mode, ModelParams, ParamBuilder};
use crate::rgb::{self, BlockShape};
use crate::tensor::Tensor;

/// Progressive ablation rows, from the plain trunk to the full model.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// RGB trunk only; the fused feature is `F_rgb`.
    Baseline,
    /// Frequency branch without CFE, additive fusion.
    Fi,
    /// Frequency branch with CFE, additive fusion.
    FiCfe,
    /// Frequency branch with CFE and cross domain fusion.
    #[default]
    Full,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::Fi,
        Variant::FiCfe,
        Variant::Full,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Fi => "fi",
            Variant::FiCfe => "cfe",
            Variant::Full => "full",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Baseline => "Baseline",
            Variant::Fi => "LFB(FI)",
            Variant::FiCfe => "LFB(CFE+FI)",
            Variant::Full => "LFB+CDF",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}` (baseline|fi|cfe|full)")))
    }

    pub fn uses_frequency(self) -> bool {
        self != Variant::Baseline
    }

    pub fn uses_cfe(self) -> bool {
        matches!(self, Variant::FiCfe | Variant::Full)
    }

    pub fn uses_cdf(self) -> bool {
        self == Variant::Full
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub base_channels: usize,
    pub window: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub cfe_units: usize,
    pub variant: Variant,
    pub gate: GateKind,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 16,
            window: 8,
            heads: 4,
            mlp_ratio: 4,
            cfe_units: 6,
            variant: Variant::Full,
            gate: GateKind::PerChannel,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn block_shape(&self) -> BlockShape {
        BlockShape {
            channels: self.base_channels,
            heads: self.heads,
            window: self.window,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0
            || self.heads == 0
            || !self.base_channels.is_multiple_of(self.heads)
        {
            return Err(Error::Config(format!(
                "{} channels cannot be split over {} heads",
                self.base_channels, self.heads
            )));
        }
        if self.window == 0
            || !BLOCK.is_multiple_of(self.window) && !self.window.is_multiple_of(BLOCK)
        {
            return Err(Error::Config(format!("unsupported window {}", self.window)));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        Ok(())
    }

    /// Flat `key=value` lines, one per field.
    pub fn to_kv(&self) -> String {
        format!(
            "base_channels={}\nwindow={}\nheads={}\nmlp_ratio={}\ncfe_units={}\nvariant={}\ngate={}\nseed={}\n",
            self.base_channels,
            self.window,
            self.heads,
            self.mlp_ratio,
            self.cfe_units,
            self.variant,
            self.gate.as_str(),
            self.seed
        )
    }

    /// Parses `key=value` lines; blank lines and `#` comments are skipped,
    /// absent keys keep their defaults. Keys this struct does not own are
    /// returned to the caller.
    pub fn from_kv(text: &str) -> Result<(Self, Vec<(String, String)>)> {
        let mut cfg = ModelConfig::default();
        let mut rest = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "line {}: expected key=value, got `{line}`",
                    lineno + 1
                ))
            })?;
            let (k, v) = (k.trim(), v.trim());
            let num = |v: &str| -> Result<usize> {
                v.parse()
                    .map_err(|_| Error::Config(format!("`{k}`: `{v}` is not an integer")))
            };
            match k {
                "base_channels" => cfg.base_channels = num(v)?,
                "window" => cfg.window = num(v)?,
                "heads" => cfg.heads = num(v)?,
                "mlp_ratio" => cfg.mlp_ratio = num(v)?,
                "cfe_units" => cfg.cfe_units = num(v)?,
                "variant" => cfg.variant = Variant::parse(v)?,
                "gate" => cfg.gate = GateKind::parse(v)?,
                "seed" => {
                    cfg.seed = v
                        .parse()
                        .map_err(|_| Error::Config(format!("`seed`: `{v}` is not an integer")))?
                }
                _ => rest.push((k.to_string(), v.to_string())),
            }
        }
        cfg.validate()?;
        Ok((cfg, rest))
    }
}

const OUT_PROJ: &str = "fusion.out_proj";

/// Seeded parameters for `config`. Convolutions draw from
/// `U(-sqrt(1/fan_in), sqrt(1/fan_in))`, norms start at scale 1 / shift 0,
/// the curvature kernel at its fixed stencil, and the multiply/add map
/// biases at 1 / 0.
pub fn init_weights(config: &ModelConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let c = config.base_channels;
    let shape = config.block_shape();
    let mut b = ParamBuilder::new(seed);
    rgb::init_shallow(&mut b, c);
    rgb::init_rgb(&mut b, "rgb", shape)?;
    let v = config.variant;
    if v.uses_frequency() {
        freq::init_lfb(&mut b, "lfb", c, v.uses_cfe().then_some(config.cfe_units));
    }
    if v.uses_cdf() {
        fusion::init_cdf(&mut b, "cdf", c, config.gate);
        fusion::init_out_proj(&mut b, "fusion", 2 * c, c);
    } else if v.uses_frequency() {
        fusion::init_out_proj(&mut b, "fusion", c, c);
    }
    rgb::init_transformer_block(&mut b, "deep", shape);
    b.conv("out_conv", 3, c, 3, true);
    Ok(b.finish())
}

fn check_input(img: &Tensor, config: &ModelConfig) -> Result<()> {
    let (h, w, c) = img.hwc()?;
    if c != 3 {
        return Err(Error::Dimension(format!(
            "expected an RGB image, got {c} channels"
        )));
    }
    let unit = BLOCK.max(config.window);
    if h == 0 || w == 0 || h % unit != 0 || w % unit != 0 {
        return Err(Error::CropRequired {
            height: h,
            width: w,
        });
    }
    Ok(())
}

/// Builds the forward graph for `img` and returns the output node
/// (`[H, W, 3]`, unclamped).
pub fn forward(ctx: &mut Ctx<'_>, img: Var, config: &ModelConfig) -> Result<Var> {
    check_input(ctx.graph.value(img), config)?;
    let shape = config.block_shape();
    let f0 = rgb::shallow_conv(ctx, img)?;
    ctx.check_finite(f0, "shallow")?;
    let f_rgb = rgb::rgb_forward(ctx, f0, "rgb", shape)?;
    ctx.check_finite(f_rgb, "rgb")?;
    let v = config.variant;
    let fused = if v.uses_frequency() {
        let f_f = freq::lfb_forward(ctx, img, "lfb", v.uses_cfe())?;
        ctx.check_finite(f_f, "lfb")?;
        if v.uses_cdf() {
            fusion::cdf_forward(ctx, f_rgb, f_f, "cdf", OUT_PROJ)?
        } else {
            fusion::additive_fusion(ctx, f_rgb, f_f, OUT_PROJ)?
        }
    } else {
        f_rgb
    };
    ctx.check_finite(fused, "fusion")?;
    let f2 = rgb::transformer_block(ctx, fused, "deep", shape)?;
    ctx.check_finite(f2, "deep")?;
    let out = ctx.conv(f2, "out_conv", 1, 1)?;
    let out = ctx.graph.leaky_relu(out, LEAKY_SLOPE);
    ctx.check_finite(out, "out_conv")?;
    Ok(out)
}

/// Inference with running statistics; output is not clamped.
pub fn infer(params: &ModelParams, config: &ModelConfig, img: &Tensor) -> Result<Tensor> {
    let mut ctx = Ctx::new(params, Mode::Eval, false);
    let x = ctx.graph.constant(img.clone());
    let y = forward(&mut ctx, x, config)?;
    Ok(ctx.graph.value(y).clone())
}

/// Number of trainable scalars.
pub fn count_params(params: &ModelParams) -> usize {
    params.count()
}

fn conv_flops(h: usize, w: usize, cin: usize, cout: usize, k: usize) -> u64 {
    2 * (h * w * cout * k * k * cin) as u64
}

fn block_flops(h: usize, w: usize, s: BlockShape) -> u64 {
    let (c, hw) = (s.channels, h * w);
    let tokens = s.window * s.window;
    let windows = hw / tokens;
    let hidden = s.mlp_ratio * c;
    let elems = (hw * c) as u64;
    let qkv = conv_flops(h, w, c, 3 * c, 1);
    let scores = 2 * (windows * tokens * tokens * c) as u64;
    let softmax = (windows * s.heads * tokens * tokens) as u64;
    let weighted = 2 * (windows * tokens * tokens * c) as u64;
    let o = conv_flops(h, w, c, c, 1);
    let mlp =
        conv_flops(h, w, c, hidden, 1) + conv_flops(h, w, hidden, c, 1) + (hw * hidden) as u64;
    // two norms and two residual adds at one op per element
    4 * elems + qkv + scores + softmax + weighted + o + mlp
}

/// Analytic operation count of one forward pass at `height x width`:
/// `2 * H' * W' * Cout * k^2 * Cin` per convolution, attention from its
/// projections, score and weighted-sum products, and one op per element
/// for norms, activations and elementwise arithmetic.
pub fn estimate_flops(config: &ModelConfig, height: usize, width: usize) -> u64 {
    let (h, w, c) = (height, width, config.base_channels);
    let hw = h * w;
    let s = config.block_shape();
    let elems = (hw * c) as u64;
    let mut total = conv_flops(h, w, 3, c, 3);
    // rgb branch: two blocks, two map convs, F0 * M + A
    total += 2 * block_flops(h, w, s) + 2 * conv_flops(h, w, c, c, 3) + 2 * elems;
    let v = config.variant;
    if v.uses_frequency() {
        let (gh, gw) = (h / BLOCK, w / BLOCK);
        let cells = gh * gw;
        total += 2 * 9 * hw as u64; // colour matrix
        total += (cells * 3) as u64 * 2 * (2 * (BLOCK * BLOCK * BLOCK)) as u64; // separable DCT
        if v.uses_cfe() {
            let hi = freq::high_count(FREQ_CHANNELS);
            let lo = FREQ_CHANNELS - hi;
            let band_elems = (cells * FREQ_CHANNELS) as u64;
            total += 2 * 9 * band_elems + band_elems; // curvature + magnitude sum
            let unit = conv_flops(gh, gw, hi, hi, 3) + 2 * (cells * hi) as u64;
            total += config.cfe_units as u64 * unit + (cells * hi) as u64;
            total += conv_flops(gh, gw, lo, lo, 3);
        }
        total += conv_flops(h, w, 3, c, 3) + elems; // projection + leaky relu
        if v.uses_cdf() {
            let gate_out = match config.gate {
                GateKind::PerChannel => 2 * c,
                GateKind::SingleMap => 1,
            };
            total += 2 * elems + 2 * 2 * (c * c) as u64 + 2 * c as u64; // pooling, filters, sigmoid
            total += 4 * elems + 2 * elems; // cross products and sums, relu
            total += conv_flops(h, w, 2 * c, gate_out, 1) + (hw * gate_out) as u64 + 2 * elems;
            total += conv_flops(h, w, 2 * c, c, 1);
        } else {
            total += elems + conv_flops(h, w, c, c, 1);
        }
    }
    total += block_flops(h, w, s);
    total += conv_flops(h, w, c, 3, 3) + (hw * 3) as u64;
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_counts() {
        let mut b = ParamBuilder::new(0);
        b.conv("c", 3, 3, 16, true);
        assert_eq!(count_params(&b.finish()), 448);
        assert_eq!(conv_flops(64, 64, 3, 16, 3), 3_538_944);
        assert_eq!(
            conv_flops(128, 64, 3, 16, 3),
            2 * conv_flops(64, 64, 3, 16, 3)
        );
    }

    #[test]
    fn config_kv_round_trip() {
        let cfg = ModelConfig {
            variant: Variant::FiCfe,
            gate: GateKind::SingleMap,
            seed: 99,
            ..ModelConfig::default()
        };
        let (back, rest) = ModelConfig::from_kv(&cfg.to_kv()).unwrap();
        assert_eq!(back, cfg);
        assert!(rest.is_empty());
        assert!(ModelConfig::from_kv("variant=huge").is_err());
        assert!(ModelConfig::from_kv("heads=3").is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = ModelConfig::default();
        let a = init_weights(&cfg, 7).unwrap();
        assert_eq!(a, init_weights(&cfg, 7).unwrap());
        assert_ne!(a, init_weights(&cfg, 8).unwrap());
        let k = a.get("lfb.cfe.curvature").unwrap();
        assert_eq!(k.data(), &freq::CURVATURE_INIT);
        assert_eq!(k.sum(), 0.0);
        assert!(a
            .get("rgb.mul_conv.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 1.0));
        assert!(a
            .get("rgb.add_conv.bias")
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_indivisible_input() {
        let cfg = ModelConfig::default().with_variant(Variant::Baseline);
        let p = init_weights(&cfg, 0).unwrap();
        let err = infer(&p, &cfg, &Tensor::zeros(&[12, 16, 3])).unwrap_err();
        assert!(matches!(err, Error::CropRequired { .. }));
    }
}
