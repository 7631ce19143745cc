//! PNG and JSON persistence for images and face parameters.
//!
//! Images are stored as 8-bit RGB PNG with round-to-nearest quantization;
//! face parameters as a flat JSON object of named numeric arrays.

use std::path::Path;

use ndarray::Array3;

use crate::face3d::{FaceParams, Image, Mask};
use crate::{Error, Result};

/// Quantize to 8-bit and write as RGB PNG.
pub fn save_png(image: &Image, path: &Path) -> Result<()> {
    let (h, w, _) = dims(image);
    let mut buf = vec![0u8; h * w * 3];
    for ((y, x, c), &v) in image.indexed_iter() {
        buf[(y * w + x) * 3 + c] = quantize(v);
    }
    let img = image::RgbImage::from_raw(w as u32, h as u32, buf)
        .expect("buffer length matches dimensions");
    img.save(path).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

/// Read an RGB PNG back into `[0, 1]` floats.
pub fn load_png(path: &Path) -> Result<Image> {
    let img = image::open(path).map_err(|e| Error::io(path, std::io::Error::other(e)))?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((h, w, 3));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[y as usize, x as usize, c]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// 8-bit quantization, round to nearest.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn save_params(params: &FaceParams, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(params).expect("FaceParams serializes");
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn load_params(path: &Path) -> Result<FaceParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Fraction-of-a-pixel helpers shared by tests and reports.
pub fn mean_abs_diff(a: &Image, b: &Image) -> f64 {
    let d = a - b;
    d.mapv(f64::abs).mean().unwrap_or(0.0)
}

/// Mean absolute difference restricted to `mask == keep`.
pub fn masked_mean_abs_diff(a: &Image, b: &Image, mask: &Mask, keep: bool) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for ((y, x), &m) in mask.indexed_iter() {
        if m == keep {
            for c in 0..3 {
                acc += (a[[y, x, c]] - b[[y, x, c]]).abs();
                n += 1;
            }
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

fn dims(image: &Image) -> (usize, usize, usize) {
    let s = image.shape();
    (s[0], s[1], s[2])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn png_round_trip_within_quantization() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(3);
        let img = Image::from_shape_fn((20, 24, 3), |_| rng.gen_range(0.0..1.0));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.png");
        save_png(&img, &path).unwrap();
        let back = load_png(&path).unwrap();
        let err = (&back - &img).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(err <= 0.5 / 255.0 + 1e-12, "quantization error {err}");
    }

    #[test]
    fn params_json_round_trip() {
        let mut p = FaceParams::neutral();
        p.shape[0] = 0.123456789012345;
        p.pose = [0.1, -0.2, 0.05];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        save_params(&p, &path).unwrap();
        let q = load_params(&path).unwrap();
        assert_eq!(p, q);
    }
}
