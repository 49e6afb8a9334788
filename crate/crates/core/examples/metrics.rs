//! PSNR and SSIM of darkened and noisy copies of a reference scene.

use deformer::metrics::{psnr, ssim};
use deformer::synth;

fn main() -> deformer::Result<()> {
    let reference = synth::scene(2, 96, 96);
    println!("{:>6} {:>6} {:>9} {:>7}", "gamma", "sigma", "psnr", "ssim");
    for (gamma, sigma) in [
        (1.0, 0.0),
        (1.0, 0.02),
        (1.5, 0.0),
        (2.5, 0.0),
        (2.5, 0.02),
        (4.0, 0.05),
    ] {
        let low = synth::darken(&reference, gamma, sigma, 11)?;
        println!(
            "{gamma:6.1} {sigma:6.2} {:9.3} {:7.4}",
            psnr(&low, &reference, 1.0)?,
            ssim(&low, &reference)?
        );
    }
    Ok(())
}
