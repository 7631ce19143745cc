//! Exactly invertible image ↔ latent transform.
//!
//! A space-to-depth rearrangement with factor `f = 4` followed by the affine
//! map `(x - 0.5) * 2` stands in for a learned autoencoder. Because encoding
//! is a permutation plus an affine map, `decode(encode(x)) == x` up to
//! floating-point rounding, which keeps reconstruction error out of every
//! downstream test of the denoiser.

use ndarray::Array3;

use crate::face3d::Image;
use crate::{Error, Result};

/// Spatial downsampling factor.
pub const SCALE_FACTOR: usize = 4;
/// Latent channel count: 3 · f².
pub const LATENT_CHANNELS: usize = 3 * SCALE_FACTOR * SCALE_FACTOR;

/// C×h×w latent-space tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    /// Channel-major data: (C, h, w).
    pub data: Array3<f64>,
    /// The spatial downsampling factor this latent was produced with.
    pub scale_factor: usize,
}

impl LatentTensor {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }
    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }
    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }
}

/// Encode an H×W×3 image into a (3f²)×(H/f)×(W/f) latent.
///
/// Channel layout: `latent[c·f² + dy·f + dx, y, x] = 2·(image[y·f+dy, x·f+dx, c] − 0.5)`.
pub fn encode(image: &Image) -> Result<LatentTensor> {
    let f = SCALE_FACTOR;
    let (h, w, c) = {
        let s = image.shape();
        (s[0], s[1], s[2])
    };
    if c != 3 {
        return Err(Error::ShapeMismatch { expected: "HxWx3".into(), got: format!("{h}x{w}x{c}") });
    }
    if h % f != 0 || w % f != 0 {
        return Err(Error::InvalidInput(format!(
            "image size {h}x{w} not divisible by scale factor {f}"
        )));
    }
    let (lh, lw) = (h / f, w / f);
    let mut data = Array3::zeros((LATENT_CHANNELS, lh, lw));
    for y in 0..lh {
        for x in 0..lw {
            for ch in 0..3 {
                for dy in 0..f {
                    for dx in 0..f {
                        let v = image[[y * f + dy, x * f + dx, ch]];
                        data[[ch * f * f + dy * f + dx, y, x]] = (v - 0.5) * 2.0;
                    }
                }
            }
        }
    }
    Ok(LatentTensor { data, scale_factor: f })
}

/// Exact inverse of [`encode`], with the output clamped to `[0, 1]`.
pub fn decode(z: &LatentTensor) -> Image {
    let f = z.scale_factor;
    let (c, lh, lw) = {
        let s = z.data.shape();
        (s[0], s[1], s[2])
    };
    debug_assert_eq!(c, 3 * f * f);
    let mut image = Array3::zeros((lh * f, lw * f, 3));
    for y in 0..lh {
        for x in 0..lw {
            for ch in 0..3 {
                for dy in 0..f {
                    for dx in 0..f {
                        let v = z.data[[ch * f * f + dy * f + dx, y, x]] / 2.0 + 0.5;
                        image[[y * f + dy, x * f + dx, ch]] = v.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    image
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn shape_arithmetic() {
        let img = Image::zeros((64, 64, 3));
        let z = encode(&img).unwrap();
        assert_eq!(z.data.shape(), &[48, 16, 16]);
    }

    #[test]
    fn constant_half_maps_to_zero() {
        let img = Image::from_elem((32, 32, 3), 0.5);
        let z = encode(&img).unwrap();
        assert!(z.data.iter().all(|&v| v == 0.0));
        let back = decode(&z);
        assert!(back.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn round_trip_is_exact() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(1);
        for _ in 0..10 {
            let img = Image::from_shape_fn((32, 48, 3), |_| rng.gen_range(0.0..1.0));
            let z = encode(&img).unwrap();
            let back = decode(&z);
            let err = (&back - &img).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
            assert!(err < 1e-6, "round trip error {err}");
        }
    }

    #[test]
    fn energy_preserved() {
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(2);
        let img = Image::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..1.0));
        let z = encode(&img).unwrap();
        let latent_sq: f64 = z.data.iter().map(|v| v * v).sum();
        let img_sq: f64 = img.iter().map(|v| (v - 0.5) * (v - 0.5)).sum();
        assert!((latent_sq - 4.0 * img_sq).abs() < 1e-9);
    }

    #[test]
    fn indivisible_size_rejected() {
        let img = Image::zeros((30, 32, 3));
        assert!(encode(&img).is_err());
    }

    #[test]
    fn out_of_range_latent_clamps() {
        let mut z = encode(&Image::from_elem((16, 16, 3), 0.5)).unwrap();
        z.data[[0, 0, 0]] = 9.0;
        z.data[[1, 0, 0]] = -9.0;
        let img = decode(&z);
        assert_eq!(img[[0, 0, 0]], 1.0);
        assert_eq!(img[[0, 1, 0]], 0.0);
    }
}
