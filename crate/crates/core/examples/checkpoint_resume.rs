//! Interrupt a run after one epoch, reload the checkpoint and show that the
//! resumed epoch matches the uninterrupted one bit for bit.

use deformer::checkpoint::{load_checkpoint, save_checkpoint};
use deformer::train::{train_epoch, PairedSample, TrainOptions, TrainState};
use deformer::{synth, ModelConfig};

fn main() -> deformer::Result<()> {
    let data = synth::pairs(4, 32, 3)?
        .into_iter()
        .enumerate()
        .map(|(i, (low, r))| PairedSample::in_memory(format!("{i}"), low, r))
        .collect::<deformer::Result<Vec<_>>>()?;
    let opts = TrainOptions {
        batch_size: 2,
        crop: 32,
        ..TrainOptions::default()
    };
    let path = std::env::temp_dir().join("deformer-example.def");

    let mut state = TrainState::new(ModelConfig::default())?;
    let first = train_epoch(&mut state, &data, &opts)?;
    save_checkpoint(&state, &path)?;
    let size = std::fs::metadata(&path).map(|m| m.len()).unwrap_or(0);
    println!(
        "epoch 1 loss {:.10}; checkpoint {} ({size} bytes)",
        first.loss,
        path.display()
    );

    let straight = train_epoch(&mut state, &data, &opts)?;
    let mut resumed = load_checkpoint(&path)?;
    let again = train_epoch(&mut resumed, &data, &opts)?;
    println!("epoch 2 loss {:.16e} (straight)", straight.loss);
    println!("epoch 2 loss {:.16e} (resumed)", again.loss);
    println!(
        "identical: {}",
        straight.loss.to_bits() == again.loss.to_bits() && resumed == state
    );
    std::fs::remove_file(&path).ok();
    Ok(())
}
