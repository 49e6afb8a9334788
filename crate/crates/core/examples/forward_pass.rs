//! One forward pass of each ablation variant at initialization, with size
//! and cost figures.

use std::time::Instant;

use deformer::model::{count_params, estimate_flops, infer, init_weights};
use deformer::{synth, ModelConfig, Variant};

fn main() -> deformer::Result<()> {
    let img = synth::darken(&synth::scene(5, 64, 96), 2.5, 0.02, 1)?;
    for variant in Variant::ALL {
        let config = ModelConfig::default().with_variant(variant);
        let params = init_weights(&config, 0)?;
        let start = Instant::now();
        let out = infer(&params, &config, &img)?;
        println!(
            "{:12} params {:>9}  {:6.2} GFLOPs at 600x400  out {:?} mean {:.4}  {:.0} ms",
            variant.label(),
            count_params(&params),
            estimate_flops(&config, 400, 600) as f64 / 1e9,
            out.shape(),
            out.sum() / out.numel() as f64,
            start.elapsed().as_secs_f64() * 1e3
        );
    }
    Ok(())
}
