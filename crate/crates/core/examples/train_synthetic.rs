//! Desk-scale training run on procedurally generated low-light pairs.
//!
//! ```text
//! cargo run --release --example train_synthetic -- [pairs] [steps] [variant] [lr]
//! ```

use std::time::Instant;

use deformer::synth;
use deformer::train::{
    evaluate, input_scores, train_epoch, PairedSample, TrainOptions, TrainState,
};
use deformer::{ModelConfig, Variant};

fn main() -> deformer::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let pairs: usize = args.first().and_then(|s| s.parse().ok()).unwrap_or(32);
    let steps: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(300);
    let variant = match args.get(2) {
        Some(v) => Variant::parse(v)?,
        None => Variant::Full,
    };

    let data: Vec<PairedSample> = synth::pairs(pairs, 128, 7)?
        .into_iter()
        .enumerate()
        .map(|(i, (low, reference))| PairedSample::in_memory(format!("{i:03}"), low, reference))
        .collect::<deformer::Result<_>>()?;

    let mut state = TrainState::new(ModelConfig::default().with_variant(variant))?;
    if let Some(lr) = args.get(3).and_then(|s| s.parse().ok()) {
        state.lr = lr;
    }
    let opts = TrainOptions::default();
    let steps_per_epoch = pairs.div_ceil(opts.batch_size) as u64;
    let epochs = steps.div_ceil(steps_per_epoch);
    let before = input_scores(&data)?;
    println!(
        "input       psnr {:.3} ssim {:.4}",
        before.psnr, before.ssim
    );

    let start = Instant::now();
    for _ in 0..epochs {
        let log = train_epoch(&mut state, &data, &opts)?;
        println!(
            "epoch {:3}  step {:4}  loss {:.6}  {:.1}s",
            log.epoch,
            state.step,
            log.loss,
            start.elapsed().as_secs_f64()
        );
    }
    let after = evaluate(&state.params, &state.config, &data)?;
    println!("enhanced    psnr {:.3} ssim {:.4}", after.psnr, after.ssim);
    Ok(())
}
