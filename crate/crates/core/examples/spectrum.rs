//! Block-DCT spectrum of an image, written as a PNG.
//!
//! ```text
//! cargo run --release --example spectrum -- [input.png] [out.png]
//! ```

use std::path::PathBuf;

use deformer::dct::{center_crop8, spectrum_image};
use deformer::imageio::{load_rgb, save_png};
use deformer::synth;

fn main() -> deformer::Result<()> {
    let mut args = std::env::args().skip(1);
    let img = match args.next() {
        Some(path) => center_crop8(&load_rgb(&PathBuf::from(path))?)?,
        None => synth::scene(1, 128, 128),
    };
    let out = PathBuf::from(args.next().unwrap_or_else(|| "spectrum.png".into()));
    let spec = spectrum_image(&img)?;

    // Mean brightness of low (u+v <= 3) vs high (u+v >= 10) cells in each tile.
    let (mut low, mut nl, mut high, mut nh) = (0.0, 0, 0.0, 0);
    let (h, w) = (spec.shape()[0], spec.shape()[1]);
    for y in 0..h {
        for x in 0..w {
            let (u, v) = (y % 8, x % 8);
            if u + v <= 3 {
                low += spec.get(&[y, x]);
                nl += 1;
            } else if u + v >= 10 {
                high += spec.get(&[y, x]);
                nh += 1;
            }
        }
    }
    println!(
        "low-frequency mean {:.3}, high-frequency mean {:.3}",
        low / nl as f64,
        high / nh as f64
    );
    save_png(&out, &spec)?;
    println!("wrote {}", out.display());
    Ok(())
}
