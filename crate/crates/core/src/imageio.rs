//! 8-bit PNG input and output.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::dct::center_crop8;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

/// RGB image scaled to `[0, 1]`, shape `[H, W, 3]`. Grayscale and alpha
/// inputs are converted.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    let reader = reader
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    let img = reader.decode().map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    let data = img
        .into_raw()
        .into_iter()
        .map(|v| v as f64 / 255.0)
        .collect();
    Tensor::new(vec![h as usize, w as usize, 3], data)
}

/// Loads and centre-crops to multiples of 8. The flag reports whether the
/// crop changed the size.
pub fn load_rgb_cropped(path: &Path) -> Result<(Tensor, bool)> {
    let img = load_rgb(path)?;
    let cropped = center_crop8(&img)?;
    let changed = cropped.shape() != img.shape();
    Ok((cropped, changed))
}

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes `[H, W, 3]` as RGB or `[H, W]` / `[H, W, 1]` as grayscale.
/// Values are clamped to `[0, 1]`.
pub fn save_png(path: &Path, img: &Tensor) -> Result<()> {
    let s = img.shape();
    let (h, w, c) = match *s {
        [h, w] => (h, w, 1),
        [h, w, c] if c == 1 || c == 3 => (h, w, c),
        _ => return Err(Error::Dimension(format!("cannot write shape {s:?} as PNG"))),
    };
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let (w32, h32) = (w as u32, h as u32);
    let res = if c == 3 {
        RgbImage::from_raw(w32, h32, bytes).map(|b| b.save(path))
    } else {
        GrayImage::from_raw(w32, h32, bytes).map(|b| b.save(path))
    };
    match res {
        Some(Ok(())) => Ok(()),
        Some(Err(image::ImageError::IoError(e))) => Err(Error::io(path, e)),
        Some(Err(e)) => Err(image_err(path, e)),
        None => Err(image_err(path, "buffer size mismatch")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact_on_the_8_bit_grid() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.png");
        let img = Tensor::from_fn(&[8, 16, 3], |i| (i % 256) as f64 / 255.0);
        save_png(&path, &img).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn grayscale_loads_as_three_equal_channels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.png");
        save_png(&path, &Tensor::full(&[4, 4], 1.0)).unwrap();
        let back = load_rgb(&path).unwrap();
        assert_eq!(back.shape(), &[4, 4, 3]);
        assert!(back.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn odd_sizes_are_cropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.png");
        save_png(&path, &Tensor::zeros(&[77, 100, 3])).unwrap();
        let (img, changed) = load_rgb_cropped(&path).unwrap();
        assert!(changed);
        assert_eq!(img.shape(), &[72, 96, 3]);
    }

    #[test]
    fn missing_file_names_the_path() {
        let err = load_rgb(Path::new("/nonexistent/x.png")).unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.png"));
    }
}
