//! Analytic gradients of the cross-domain fusion block against central
//! differences.

use deformer::fusion::{self, GateKind};
use deformer::gradcheck::{grad_check_params, random_projection, GradCheckOptions};
use deformer::params::ParamBuilder;
use deformer::{Mode, Tensor};

fn main() -> deformer::Result<()> {
    let mut b = ParamBuilder::new(1);
    fusion::init_cdf(&mut b, "cdf", 16, GateKind::PerChannel);
    fusion::init_out_proj(&mut b, "fusion", 32, 16);
    let params = b.finish();
    let names: Vec<String> = params.trainable_names().into_iter().collect();

    let rgb = Tensor::from_fn(&[16, 16, 16], |i| ((i * 37 % 101) as f64 / 50.0) - 1.0);
    let freq = Tensor::from_fn(&[16, 16, 16], |i| ((i * 53 % 97) as f64 / 48.0) - 1.0);
    for h in [1e-3, 1e-4, 1e-5, 1e-6] {
        let opts = GradCheckOptions {
            h,
            probes: 8,
            seed: 0,
        };
        let report = grad_check_params(
            &params,
            &names,
            &[rgb.clone(), freq.clone()],
            Mode::Train,
            &opts,
            |ctx, v| {
                let y = fusion::cdf_forward(ctx, v[0], v[1], "cdf", "fusion.out_proj")?;
                random_projection(&mut ctx.graph, y, 7)
            },
        )?;
        println!(
            "h {h:.0e}: max relative error {:.2e} over {} probes (worst {:?})",
            report.max_rel_error, report.probes, report.worst
        );
    }
    Ok(())
}
