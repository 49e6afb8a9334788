//! Curvature energies of the 192 band channels and the 3:1 routing they
//! induce.

use deformer::dct::band_of_channel;
use deformer::freq::{
    curvature_map, energy_vector, image_bands, partition_channels, CurvatureKernel, SPLIT_RATIO,
};
use deformer::synth;

fn main() -> deformer::Result<()> {
    let img = synth::scene(3, 128, 128);
    let bands = image_bands(&img)?;
    let energy = energy_vector(&curvature_map(&bands.data, &CurvatureKernel::default())?)?;
    let p = partition_channels(&energy, SPLIT_RATIO)?;

    println!(
        "high path {} channels, low path {}",
        p.high.len(),
        p.low.len()
    );
    println!("top channels:");
    for &c in p.order.iter().take(8) {
        let (color, u, v) = band_of_channel(c);
        println!(
            "  {c:3}  {}  (u={u}, v={v})  E={:.3}",
            ["Y ", "Cb", "Cr"][color],
            energy[c]
        );
    }
    println!("lowest channels:");
    for &c in p.order.iter().rev().take(4) {
        let (color, u, v) = band_of_channel(c);
        println!(
            "  {c:3}  {}  (u={u}, v={v})  E={:.3}",
            ["Y ", "Cb", "Cr"][color],
            energy[c]
        );
    }
    Ok(())
}
