//! Procedural blendshape face geometry with SH Lambertian shading.
//!
//! The face model is an ellipsoidal UV-sphere head deformed by seeded
//! low-frequency blendshape bases: one set for identity (shape) and one for
//! expression. Vertices are posed by a yaw·pitch·roll rotation and rendered
//! orthographically by a z-buffer rasterizer ([`render`](FaceModel::render)).
//! An analysis-by-synthesis fitter ([`fit_params`](FaceModel::fit_params))
//! recovers parameters from images by derivative-free minimization of pixel
//! error against the same renderer.

mod fit;
mod raster;
pub mod sh;

pub use fit::{FitResult, ParamGroup};
pub use raster::mask_centroid;
pub use sh::{sh_basis, sh_irradiance, SH_COEFFS};

use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

use crate::{Error, Result};

/// Number of identity blendshape coefficients.
pub const SHAPE_DIM: usize = 8;
/// Number of expression blendshape coefficients.
pub const EXPR_DIM: usize = 8;

/// H×W×3 image with values in `[0, 1]`.
pub type Image = Array3<f64>;
/// H×W boolean coverage mask.
pub type Mask = Array2<bool>;

/// Complete generative description of one rendered face.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaceParams {
    /// Identity blendshape weights.
    pub shape: [f64; SHAPE_DIM],
    /// RGB albedo in `[0, 1]`.
    pub albedo: [f64; 3],
    /// Expression blendshape weights ψ.
    pub expr: [f64; EXPR_DIM],
    /// Euler angles (yaw, pitch, roll) in radians, each in `[-π, π]`.
    pub pose: [f64; 3],
    /// Monochrome SH lighting coefficients, applied per color channel.
    pub light: [f64; SH_COEFFS],
}

impl FaceParams {
    /// Neutral face: zero coefficients, mid albedo, ambient-only light.
    pub fn neutral() -> Self {
        let mut light = [0.0; SH_COEFFS];
        light[0] = 1.0;
        FaceParams {
            shape: [0.0; SHAPE_DIM],
            albedo: [0.5; 3],
            expr: [0.0; EXPR_DIM],
            pose: [0.0; 3],
            light,
        }
    }

    /// Check the type invariants: finite values, albedo in `[0,1]`,
    /// pose angles in `[-π, π]`.
    pub fn validate(&self) -> Result<()> {
        let all = self
            .shape
            .iter()
            .chain(&self.albedo)
            .chain(&self.expr)
            .chain(&self.pose)
            .chain(&self.light);
        for v in all {
            if !v.is_finite() {
                return Err(Error::InvalidInput("non-finite face parameter".into()));
            }
        }
        for a in self.albedo {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::InvalidInput(format!("albedo {a} outside [0,1]")));
            }
        }
        for p in self.pose {
            if p.abs() > std::f64::consts::PI {
                return Err(Error::InvalidInput(format!("pose angle {p} outside [-pi,pi]")));
            }
        }
        Ok(())
    }
}

/// Triangle mesh with per-vertex unit normals.
#[derive(Debug, Clone)]
pub struct Mesh {
    /// N×3 vertex positions.
    pub vertices: Array2<f64>,
    /// M×3 triangle vertex indices.
    pub faces: Array2<usize>,
    /// N×3 unit vertex normals.
    pub vertex_normals: Array2<f64>,
}

impl Mesh {
    /// Export as Wavefront OBJ for inspection in external viewers.
    pub fn write_obj(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        for row in self.vertices.rows() {
            writeln!(buf, "v {} {} {}", row[0], row[1], row[2]).expect("write to vec");
        }
        for row in self.vertex_normals.rows() {
            writeln!(buf, "vn {} {} {}", row[0], row[1], row[2]).expect("write to vec");
        }
        for f in self.faces.rows() {
            writeln!(buf, "f {0}//{0} {1}//{1} {2}//{2}", f[0] + 1, f[1] + 1, f[2] + 1)
                .expect("write to vec");
        }
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }
}

/// Rendered image plus rasterizer coverage mask.
#[derive(Debug, Clone)]
pub struct RenderOutput {
    pub image: Image,
    pub mask: Mask,
}

/// The face model: template head plus shape and expression bases.
///
/// Construction is deterministic in the seed; the same seed always yields
/// bit-identical geometry.
#[derive(Debug, Clone)]
pub struct FaceModel {
    template: Array2<f64>,
    /// Unit-sphere positions of every vertex, used to evaluate bump fields.
    faces: Array2<usize>,
    shape_basis: Array3<f64>,
    expr_basis: Array3<f64>,
}

const STACKS: usize = 49;
const SLICES: usize = 52;
/// Ellipsoid radii (x, y, z): slightly narrow head, unit tall.
const RADII: [f64; 3] = [0.85, 1.0, 0.9];
/// Maximum displacement of any single basis vector, in head-radius units.
const SHAPE_CAP: f64 = 0.22;
const EXPR_CAP: f64 = 0.18;
/// Distance from the head center to the rotation pivot behind it.
const PIVOT_Z: f64 = 0.18;

impl FaceModel {
    /// Build the template head and its blendshape bases from a seed.
    pub fn build_template(seed: u64) -> Self {
        let (unit, faces) = uv_sphere(STACKS, SLICES);
        let n = unit.nrows();
        let mut template = unit.clone();
        for mut row in template.rows_mut() {
            row[0] *= RADII[0];
            row[1] *= RADII[1];
            row[2] *= RADII[2];
        }
        // A fixed nose protrusion breaks the head's rotational symmetry so
        // yaw and pitch are observable from the silhouette.
        let nose_dir = {
            let d = [0.0f64, -0.15, 1.0];
            let l = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
            [d[0] / l, d[1] / l, d[2] / l]
        };
        for v in 0..n {
            let u = [unit[[v, 0]], unit[[v, 1]], unit[[v, 2]]];
            let dx = u[0] - nose_dir[0];
            let dy = u[1] - nose_dir[1];
            let dz = u[2] - nose_dir[2];
            let w = 0.35 * (-(dx * dx + dy * dy + dz * dz) / (2.0 * 0.25 * 0.25)).exp();
            for a in 0..3 {
                template[[v, a]] += w * u[a];
            }
        }
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let (shape_basis, expr_basis) = bump_bases(&unit, &mut rng);
        debug_assert_eq!(template.nrows(), n);
        FaceModel { template, faces, shape_basis, expr_basis }
    }

    pub fn vertex_count(&self) -> usize {
        self.template.nrows()
    }

    pub fn shape_basis(&self) -> &Array3<f64> {
        &self.shape_basis
    }

    pub fn expr_basis(&self) -> &Array3<f64> {
        &self.expr_basis
    }

    /// Template mesh at neutral parameters (normals included).
    pub fn template_mesh(&self) -> Mesh {
        self.build_mesh(&FaceParams::neutral())
    }

    /// Deform the template by the blendshape weights and rotate by pose.
    ///
    /// `vertices = R(pose) · (template + Σ shapeᵢ·Sᵢ + Σ exprⱼ·Eⱼ + pivot) − pivot`
    /// with normals recomputed from the deformed, rotated geometry. The pivot
    /// sits behind the head (a neck-style rotation center), so yaw and pitch
    /// translate the silhouette instead of spinning it in place; that is what
    /// makes head pose observable in the coverage mask.
    pub fn build_mesh(&self, params: &FaceParams) -> Mesh {
        let n = self.template.nrows();
        let mut verts = self.template.clone();
        for (i, w) in params.shape.iter().enumerate() {
            if *w != 0.0 {
                verts.scaled_add(*w, &self.shape_basis.index_axis(ndarray::Axis(0), i));
            }
        }
        for (j, w) in params.expr.iter().enumerate() {
            if *w != 0.0 {
                verts.scaled_add(*w, &self.expr_basis.index_axis(ndarray::Axis(0), j));
            }
        }
        let rot = rotation(params.pose);
        // Translation part of rotating about the pivot: R·p − p.
        let shift = [rot[0][2] * PIVOT_Z, rot[1][2] * PIVOT_Z, (rot[2][2] - 1.0) * PIVOT_Z];
        for mut row in verts.rows_mut() {
            let v = [row[0], row[1], row[2]];
            for k in 0..3 {
                row[k] = rot[k][0] * v[0] + rot[k][1] * v[1] + rot[k][2] * v[2] + shift[k];
            }
        }
        let normals = vertex_normals(&verts, &self.faces);
        debug_assert_eq!(verts.nrows(), n);
        Mesh { vertices: verts, faces: self.faces.clone(), vertex_normals: normals }
    }

    /// Render the parameters orthographically onto an H×W canvas.
    ///
    /// Background pixels are black; the mask marks rasterizer coverage.
    pub fn render(&self, params: &FaceParams, size: (usize, usize)) -> Result<RenderOutput> {
        let (h, w) = size;
        if h < 16 || w < 16 {
            return Err(Error::InvalidInput(format!("render size {h}x{w} below 16x16 minimum")));
        }
        let mesh = self.build_mesh(params);
        Ok(raster::rasterize(&mesh, params, size))
    }

    /// Recover parameters from an image by derivative-free fitting.
    ///
    /// `known` supplies fixed values for every group not in `free` and the
    /// initial guess for the free groups. The search is Nelder–Mead over the
    /// flattened free coordinates; the objective is the mean squared pixel
    /// error between `image` and the candidate render, evaluated at most
    /// `budget` times. The best-so-far residual is monotone non-increasing.
    pub fn fit_params(
        &self,
        image: &Image,
        known: &FaceParams,
        free: &[ParamGroup],
        budget: usize,
    ) -> Result<FitResult> {
        fit::fit_params(self, image, known, free, budget)
    }
}

/// Yaw·pitch·roll rotation matrix: `R = Ry(yaw)·Rx(pitch)·Rz(roll)`.
fn rotation(pose: [f64; 3]) -> [[f64; 3]; 3] {
    let (sy, cy) = pose[0].sin_cos();
    let (sp, cp) = pose[1].sin_cos();
    let (sr, cr) = pose[2].sin_cos();
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rx = [[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]];
    let rz = [[cr, -sr, 0.0], [sr, cr, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(&mat_mul(&ry, &rx), &rz)
}

fn mat_mul(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut out = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

/// UV sphere on the unit ball: `(stacks-1)*slices + 2` vertices,
/// outward-wound triangles.
fn uv_sphere(stacks: usize, slices: usize) -> (Array2<f64>, Array2<usize>) {
    let n = (stacks - 1) * slices + 2;
    let mut verts = Array2::zeros((n, 3));
    // North pole at index 0, south pole at index n-1.
    verts[[0, 1]] = 1.0;
    verts[[n - 1, 1]] = -1.0;
    for i in 1..stacks {
        let theta = std::f64::consts::PI * i as f64 / stacks as f64; // from +y
        for j in 0..slices {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / slices as f64;
            let idx = 1 + (i - 1) * slices + j;
            verts[[idx, 0]] = theta.sin() * phi.sin();
            verts[[idx, 1]] = theta.cos();
            verts[[idx, 2]] = theta.sin() * phi.cos();
        }
    }
    let ring = |i: usize, j: usize| 1 + (i - 1) * slices + (j % slices);
    let mut faces = Vec::new();
    for j in 0..slices {
        faces.push([0, ring(1, j), ring(1, j + 1)]);
    }
    for i in 1..stacks - 1 {
        for j in 0..slices {
            let (a, b, c, d) = (ring(i, j), ring(i + 1, j), ring(i + 1, j + 1), ring(i, j + 1));
            faces.push([a, b, c]);
            faces.push([a, c, d]);
        }
    }
    for j in 0..slices {
        faces.push([n - 1, ring(stacks - 1, j + 1), ring(stacks - 1, j)]);
    }
    let m = faces.len();
    let flat: Vec<usize> = faces.into_iter().flatten().collect();
    (verts, Array2::from_shape_vec((m, 3), flat).expect("face array"))
}

/// Smooth displacement bases: every basis vector is a radial weight field
/// (a sum of Gaussian bumps on the unit sphere) pushing vertices along their
/// outward direction. The raw fields are Gram–Schmidt orthogonalized across
/// the whole shape+expression family so no coefficient can imitate another,
/// then rescaled so each basis' largest displacement equals its cap (which
/// stays below 0.3 head radii by construction).
///
/// Bump centers sit on the camera-facing hemisphere, so every basis produces
/// a visible silhouette and shading response in a frontal rendering. That
/// keeps the analysis-by-synthesis fit well conditioned.
fn bump_bases(unit: &Array2<f64>, rng: &mut ChaCha12Rng) -> (Array3<f64>, Array3<f64>) {
    let n = unit.nrows();
    let total = SHAPE_DIM + EXPR_DIM;
    let mut fields = Array2::zeros((total, n));
    for k in 0..total {
        let front_min_z = if k < SHAPE_DIM { -0.3 } else { 0.15 };
        let bumps: Vec<([f64; 3], f64, f64)> = (0..3)
            .map(|_| {
                let c = random_unit_front(rng, front_min_z);
                let sigma = rng.gen_range(0.35..0.7);
                let amp = rng.gen_range(0.6..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                (c, sigma, amp)
            })
            .collect();
        for v in 0..n {
            let p = [unit[[v, 0]], unit[[v, 1]], unit[[v, 2]]];
            let mut radial = 0.0;
            for (c, sigma, amp) in &bumps {
                let dx = p[0] - c[0];
                let dy = p[1] - c[1];
                let dz = p[2] - c[2];
                radial += amp * (-(dx * dx + dy * dy + dz * dz) / (2.0 * sigma * sigma)).exp();
            }
            fields[[k, v]] = radial;
        }
    }
    // Gram–Schmidt over vertex space.
    for k in 0..total {
        for j in 0..k {
            let dot: f64 = (0..n).map(|v| fields[[k, v]] * fields[[j, v]]).sum();
            for v in 0..n {
                let prev = fields[[j, v]];
                fields[[k, v]] -= dot * prev;
            }
        }
        let norm: f64 = (0..n).map(|v| fields[[k, v]] * fields[[k, v]]).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for v in 0..n {
                fields[[k, v]] /= norm;
            }
        }
    }
    let mut shape_basis = Array3::zeros((SHAPE_DIM, n, 3));
    let mut expr_basis = Array3::zeros((EXPR_DIM, n, 3));
    for k in 0..total {
        let cap = if k < SHAPE_DIM { SHAPE_CAP } else { EXPR_CAP };
        let peak = (0..n).map(|v| fields[[k, v]].abs()).fold(0.0f64, f64::max);
        let scale = if peak > 0.0 { cap / peak } else { 0.0 };
        for v in 0..n {
            let w = fields[[k, v]] * scale;
            for a in 0..3 {
                let d = w * unit[[v, a]];
                if k < SHAPE_DIM {
                    shape_basis[[k, v, a]] = d;
                } else {
                    expr_basis[[k - SHAPE_DIM, v, a]] = d;
                }
            }
        }
    }
    (shape_basis, expr_basis)
}

fn random_unit_front(rng: &mut ChaCha12Rng, min_z: f64) -> [f64; 3] {
    loop {
        let v = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let n2: f64 = v.iter().map(|x| x * x).sum();
        if n2 > 1e-4 && n2 <= 1.0 {
            let n = n2.sqrt();
            let u = [v[0] / n, v[1] / n, v[2] / n];
            if u[2] >= min_z {
                return u;
            }
        }
    }
}

/// Area-weighted vertex normals, normalized to unit length.
fn vertex_normals(verts: &Array2<f64>, faces: &Array2<usize>) -> Array2<f64> {
    let mut normals: Array2<f64> = Array2::zeros(verts.raw_dim());
    for f in faces.rows() {
        let (i0, i1, i2) = (f[0], f[1], f[2]);
        let a = [verts[[i0, 0]], verts[[i0, 1]], verts[[i0, 2]]];
        let b = [verts[[i1, 0]], verts[[i1, 1]], verts[[i1, 2]]];
        let c = [verts[[i2, 0]], verts[[i2, 1]], verts[[i2, 2]]];
        let e1 = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let e2 = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let cr = [
            e1[1] * e2[2] - e1[2] * e2[1],
            e1[2] * e2[0] - e1[0] * e2[2],
            e1[0] * e2[1] - e1[1] * e2[0],
        ];
        for &i in &[i0, i1, i2] {
            for k in 0..3 {
                normals[[i, k]] += cr[k];
            }
        }
    }
    for mut row in normals.rows_mut() {
        let n: f64 = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
        if n > 0.0 {
            row.mapv_inplace(|x| x / n);
        }
    }
    normals
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_is_deterministic() {
        let a = FaceModel::build_template(0);
        let b = FaceModel::build_template(0);
        assert_eq!(a.template, b.template);
        assert_eq!(a.shape_basis, b.shape_basis);
        assert_eq!(a.expr_basis, b.expr_basis);
    }

    #[test]
    fn distinct_seeds_differ() {
        let a = FaceModel::build_template(0);
        let b = FaceModel::build_template(1);
        let diff = (&a.shape_basis - &b.shape_basis).mapv(f64::abs);
        assert!(diff.fold(0.0f64, |m, &v| m.max(v)) > 0.0);
    }

    #[test]
    fn basis_displacements_capped() {
        for seed in [0u64, 3, 17] {
            let m = FaceModel::build_template(seed);
            for basis in [&m.shape_basis, &m.expr_basis] {
                for k in 0..basis.shape()[0] {
                    for v in 0..basis.shape()[1] {
                        let d: f64 = (0..3).map(|a| basis[[k, v, a]].powi(2)).sum::<f64>().sqrt();
                        assert!(d <= 0.3 + 1e-12, "seed {seed} displacement {d}");
                    }
                }
            }
        }
    }

    #[test]
    fn neutral_mesh_equals_template() {
        let m = FaceModel::build_template(0);
        let mesh = m.build_mesh(&FaceParams::neutral());
        assert_eq!(mesh.vertices, m.template);
    }

    #[test]
    fn full_turn_is_identity() {
        let m = FaceModel::build_template(0);
        let mut p = FaceParams::neutral();
        p.pose = [0.0, 0.0, 0.0];
        let a = m.build_mesh(&p);
        p.pose = [2.0 * std::f64::consts::PI, 0.0, 0.0];
        let b = m.build_mesh(&p);
        let diff = (&a.vertices - &b.vertices).mapv(f64::abs);
        assert!(diff.fold(0.0f64, |mx, &v| mx.max(v)) < 1e-6);
    }

    #[test]
    fn unit_expression_recovers_basis() {
        let m = FaceModel::build_template(0);
        let mut p = FaceParams::neutral();
        p.expr[1] = 1.0;
        let deformed = m.build_mesh(&p);
        let neutral = m.build_mesh(&FaceParams::neutral());
        let delta = &deformed.vertices - &neutral.vertices;
        let basis = m.expr_basis.index_axis(ndarray::Axis(0), 1);
        let diff = (&delta - &basis).mapv(f64::abs);
        assert!(diff.fold(0.0f64, |mx, &v| mx.max(v)) < 1e-12);
    }

    #[test]
    fn blendshape_linearity() {
        let m = FaceModel::build_template(0);
        let neutral = m.build_mesh(&FaceParams::neutral()).vertices;
        for alpha in [0.3, -0.8] {
            let mut p = FaceParams::neutral();
            p.expr[2] = alpha;
            let d = m.build_mesh(&p).vertices - &neutral;
            let mut p1 = FaceParams::neutral();
            p1.expr[2] = 1.0;
            let d1 = m.build_mesh(&p1).vertices - &neutral;
            let diff = (&d - &(d1 * alpha)).mapv(f64::abs);
            assert!(diff.fold(0.0f64, |mx, &v| mx.max(v)) < 1e-6);
        }
    }

    #[test]
    fn vertex_normals_unit_length() {
        let m = FaceModel::build_template(0);
        let mut p = FaceParams::neutral();
        p.shape = [0.6, -0.4, 0.2, 0.9, -0.7, 0.1, 0.3, -0.5];
        p.pose = [0.3, -0.2, 0.1];
        let mesh = m.build_mesh(&p);
        for row in mesh.vertex_normals.rows() {
            let n = (row[0] * row[0] + row[1] * row[1] + row[2] * row[2]).sqrt();
            assert!((n - 1.0).abs() < 1e-5);
        }
        for f in mesh.faces.rows() {
            assert!(f[0] < mesh.vertices.nrows());
        }
    }

    #[test]
    fn vertex_count_near_target() {
        let m = FaceModel::build_template(0);
        assert!((2300..2700).contains(&m.vertex_count()), "{}", m.vertex_count());
    }
}
