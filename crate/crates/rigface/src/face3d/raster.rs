//! Orthographic z-buffer rasterizer with barycentric normal interpolation.

use ndarray::{Array2, Array3};

use super::sh::irradiance_unchecked;
use super::{FaceParams, Mask, Mesh, RenderOutput};

/// Units of head radius that must fit inside the smaller canvas dimension.
const FIT_RADIUS: f64 = 1.8;

/// Rasterize a posed mesh. The camera sits on +z looking along -z; +x maps
/// to image right, +y to image up. Faces whose geometric normal points away
/// from the camera are skipped, as are zero-area screen triangles.
pub(super) fn rasterize(mesh: &Mesh, params: &FaceParams, size: (usize, usize)) -> RenderOutput {
    let (h, w) = size;
    let scale = 0.5 * h.min(w) as f64 / FIT_RADIUS;
    let (cx, cy) = (w as f64 / 2.0, h as f64 / 2.0);

    let n = mesh.vertices.nrows();
    let mut sx = vec![0.0f64; n];
    let mut sy = vec![0.0f64; n];
    for (i, v) in mesh.vertices.rows().into_iter().enumerate() {
        sx[i] = cx + scale * v[0];
        sy[i] = cy - scale * v[1];
    }

    let mut image = Array3::zeros((h, w, 3));
    let mut mask = Array2::from_elem((h, w), false);
    let mut zbuf = Array2::from_elem((h, w), f64::NEG_INFINITY);

    for f in mesh.faces.rows() {
        let (i0, i1, i2) = (f[0], f[1], f[2]);
        // Backface cull on the geometric normal (view direction +z).
        let az = tri_normal_z(&mesh.vertices, i0, i1, i2);
        if az <= 0.0 {
            continue;
        }
        let (x0, y0) = (sx[i0], sy[i0]);
        let (x1, y1) = (sx[i1], sy[i1]);
        let (x2, y2) = (sx[i2], sy[i2]);
        let area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0);
        if area.abs() < 1e-12 {
            continue; // degenerate in screen space
        }
        let min_x = x0.min(x1).min(x2).floor().max(0.0) as usize;
        let max_x = (x0.max(x1).max(x2).ceil() as isize).min(w as isize - 1);
        let min_y = y0.min(y1).min(y2).floor().max(0.0) as usize;
        let max_y = (y0.max(y1).max(y2).ceil() as isize).min(h as isize - 1);
        if max_x < 0 || max_y < 0 {
            continue;
        }
        let (max_x, max_y) = (max_x as usize, max_y as usize);

        let z = [
            mesh.vertices[[i0, 2]],
            mesh.vertices[[i1, 2]],
            mesh.vertices[[i2, 2]],
        ];
        for py in min_y..=max_y {
            for px in min_x..=max_x {
                let x = px as f64 + 0.5;
                let y = py as f64 + 0.5;
                let w0 = ((x1 - x) * (y2 - y) - (x2 - x) * (y1 - y)) / area;
                let w1 = ((x2 - x) * (y0 - y) - (x0 - x) * (y2 - y)) / area;
                let w2 = 1.0 - w0 - w1;
                if w0 < 0.0 || w1 < 0.0 || w2 < 0.0 {
                    continue;
                }
                let depth = w0 * z[0] + w1 * z[1] + w2 * z[2];
                if depth <= zbuf[[py, px]] {
                    continue;
                }
                zbuf[[py, px]] = depth;
                let mut nrm = [0.0f64; 3];
                for k in 0..3 {
                    nrm[k] = w0 * mesh.vertex_normals[[i0, k]]
                        + w1 * mesh.vertex_normals[[i1, k]]
                        + w2 * mesh.vertex_normals[[i2, k]];
                }
                let len = (nrm[0] * nrm[0] + nrm[1] * nrm[1] + nrm[2] * nrm[2]).sqrt();
                let irr = if len > 1e-12 {
                    irradiance_unchecked([nrm[0] / len, nrm[1] / len, nrm[2] / len], &params.light)
                } else {
                    0.0
                };
                for c in 0..3 {
                    image[[py, px, c]] = (params.albedo[c] * irr).clamp(0.0, 1.0);
                }
                mask[[py, px]] = true;
            }
        }
    }
    RenderOutput { image, mask }
}

fn tri_normal_z(verts: &Array2<f64>, i0: usize, i1: usize, i2: usize) -> f64 {
    let ax = verts[[i1, 0]] - verts[[i0, 0]];
    let ay = verts[[i1, 1]] - verts[[i0, 1]];
    let bx = verts[[i2, 0]] - verts[[i0, 0]];
    let by = verts[[i2, 1]] - verts[[i0, 1]];
    ax * by - ay * bx
}

/// Centroid of a mask in (x, y) pixel coordinates; `None` when empty.
pub fn mask_centroid(mask: &Mask) -> Option<(f64, f64)> {
    let mut count = 0usize;
    let (mut sx, mut sy) = (0.0, 0.0);
    for ((y, x), &m) in mask.indexed_iter() {
        if m {
            count += 1;
            sx += x as f64;
            sy += y as f64;
        }
    }
    (count > 0).then(|| (sx / count as f64, sy / count as f64))
}

#[cfg(test)]
mod tests {
    use super::super::{FaceModel, FaceParams};
    use super::*;

    fn model() -> FaceModel {
        FaceModel::build_template(0)
    }

    #[test]
    fn band0_light_shades_uniformly() {
        let mut p = FaceParams::neutral();
        p.light = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0];
        p.albedo = [0.5, 0.5, 0.5];
        let out = model().render(&p, (64, 64)).unwrap();
        let expected = 0.141_047_4;
        let mut count = 0;
        for ((y, x), &m) in out.mask.indexed_iter() {
            if m {
                count += 1;
                for c in 0..3 {
                    assert!((out.image[[y, x, c]] - expected).abs() < 1e-5);
                }
            } else {
                for c in 0..3 {
                    assert_eq!(out.image[[y, x, c]], 0.0);
                }
            }
        }
        assert!(count > 100, "mask unexpectedly small: {count}");
    }

    #[test]
    fn zero_light_renders_black_inside_mask() {
        let mut p = FaceParams::neutral();
        p.light = [0.0; 9];
        let out = model().render(&p, (32, 32)).unwrap();
        assert!(out.image.iter().all(|&v| v == 0.0));
        assert!(out.mask.iter().any(|&m| m));
    }

    #[test]
    fn rendering_is_deterministic() {
        let mut p = FaceParams::neutral();
        p.shape = [0.4, -0.3, 0.7, 0.1, -0.6, 0.2, -0.1, 0.5];
        p.pose = [0.3, -0.15, 0.05];
        p.light = [0.9, 0.1, -0.2, 0.3, 0.05, -0.1, 0.07, 0.0, -0.04];
        let m = model();
        let a = m.render(&p, (48, 48)).unwrap();
        let b = m.render(&p, (48, 48)).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.mask, b.mask);
    }

    #[test]
    fn size_below_minimum_rejected() {
        assert!(model().render(&FaceParams::neutral(), (8, 64)).is_err());
    }

    #[test]
    fn yaw_moves_mask_centroid_monotonically() {
        let m = model();
        // The template nose sweeps sideways under yaw, dragging the centroid.
        let centroid_x = |yaw: f64| {
            let mut p = FaceParams::neutral();
            p.pose[0] = yaw;
            let out = m.render(&p, (96, 96)).unwrap();
            mask_centroid(&out.mask).unwrap().0
        };
        let xs: Vec<f64> = [0.0, 0.1, 0.2, 0.3].iter().map(|&d| centroid_x(d)).collect();
        let increasing = xs.windows(2).all(|w| w[1] > w[0]);
        let decreasing = xs.windows(2).all(|w| w[1] < w[0]);
        assert!(increasing || decreasing, "centroid drift not monotone: {xs:?}");
    }

    #[test]
    fn mask_nonempty_for_frontal_poses() {
        let m = model();
        for yaw in [-1.2, -0.5, 0.0, 0.5, 1.2] {
            let mut p = FaceParams::neutral();
            p.pose[0] = yaw;
            let out = m.render(&p, (32, 32)).unwrap();
            assert!(out.mask.iter().any(|&v| v), "empty mask at yaw {yaw}");
        }
    }
}
