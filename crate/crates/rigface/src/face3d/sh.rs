//! Real spherical harmonics up to band 2 and Lambertian irradiance.
//!
//! Lighting is a 9-coefficient monochrome SH environment applied per color
//! channel. Irradiance at a surface point is the dot product of the
//! coefficients with the SH basis evaluated at the unit normal, clamped at
//! zero so there is no negative light.

use crate::{Error, Result};

/// Number of SH coefficients (bands 0..=2).
pub const SH_COEFFS: usize = 9;

// Real SH basis constants.
const C0: f64 = 0.282_094_791_773_878_14; // 1/(2*sqrt(pi))
const C1: f64 = 0.488_602_511_902_919_92; // sqrt(3/(4*pi))
const C2_0: f64 = 1.092_548_430_592_079_2; // sqrt(15/(4*pi))
const C2_1: f64 = 0.315_391_565_252_520_05; // (1/4)*sqrt(5/pi)
const C2_2: f64 = 0.546_274_215_296_039_6; // (1/4)*sqrt(15/pi)

/// Evaluate the 9 real SH basis functions at a direction.
///
/// Ordering: band 0, then band 1 as {y, z, x}, then band 2 as
/// {xy, yz, 3z^2-1, xz, x^2-y^2}.
pub fn sh_basis(n: [f64; 3]) -> [f64; SH_COEFFS] {
    let [x, y, z] = n;
    [
        C0,
        C1 * y,
        C1 * z,
        C1 * x,
        C2_0 * x * y,
        C2_0 * y * z,
        C2_1 * (3.0 * z * z - 1.0),
        C2_0 * x * z,
        C2_2 * (x * x - y * y),
    ]
}

/// Lambertian irradiance for a unit normal under a 9-coefficient SH light.
///
/// Returns `max(0, sum_k l_k * Y_k(normal))`. The normal must be unit length
/// within 1e-5.
pub fn sh_irradiance(normal: [f64; 3], light: &[f64; SH_COEFFS]) -> Result<f64> {
    let norm = (normal[0] * normal[0] + normal[1] * normal[1] + normal[2] * normal[2]).sqrt();
    if (norm - 1.0).abs() > 1e-5 {
        return Err(Error::InvalidInput(format!(
            "sh_irradiance requires a unit normal, got length {norm}"
        )));
    }
    Ok(irradiance_unchecked(normal, light))
}

/// Same as [`sh_irradiance`] without the unit-length check; the rasterizer
/// renormalizes interpolated normals itself.
pub(crate) fn irradiance_unchecked(normal: [f64; 3], light: &[f64; SH_COEFFS]) -> f64 {
    let basis = sh_basis(normal);
    let mut acc = 0.0;
    for k in 0..SH_COEFFS {
        acc += light[k] * basis[k];
    }
    acc.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn band0_only_is_constant() {
        let mut light = [0.0; SH_COEFFS];
        light[0] = 1.0;
        for n in [[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.6, 0.0, 0.8]] {
            let v = sh_irradiance(n, &light).unwrap();
            assert!((v - 0.282_094_791_773_878_14).abs() < 1e-12, "got {v}");
        }
    }

    #[test]
    fn zero_light_is_zero() {
        let light = [0.0; SH_COEFFS];
        assert_eq!(sh_irradiance([0.0, 1.0, 0.0], &light).unwrap(), 0.0);
    }

    #[test]
    fn band1_z_closed_form() {
        // light index 2 is the z-linear basis function sqrt(3/4pi)*z.
        let c = 0.7;
        let mut light = [0.0; SH_COEFFS];
        light[2] = c;
        let v = sh_irradiance([0.0, 0.0, 1.0], &light).unwrap();
        assert!((v - c * 0.488_602_5).abs() < 1e-6, "got {v}");
        // Negative irradiance clamps to zero on the opposite hemisphere.
        let v = sh_irradiance([0.0, 0.0, -1.0], &light).unwrap();
        assert_eq!(v, 0.0);
    }

    #[test]
    fn non_unit_normal_rejected() {
        let mut light = [0.0; SH_COEFFS];
        light[0] = 1.0;
        assert!(sh_irradiance([0.0, 0.0, 2.0], &light).is_err());
    }
}
