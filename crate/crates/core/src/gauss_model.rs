//! 3D Gaussian splat parameters, covariance construction, pinhole projection
//! to screen-space Gaussians, and the backward pass of that projection.
//!
//! Parameters are stored unconstrained: quaternion (normalized on use),
//! log-scale, opacity logit and color logits. Activations are `exp` for
//! scale and sigmoid for opacity/color.

use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector2, Vector3};

use crate::camera::{Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::image::write_atomic;

/// Low-pass dilation added to every projected covariance, px².
pub const COV2D_DILATION: f64 = 0.3;
/// Splats at or in front of this camera depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Contributions below this alpha are treated as outside a splat's footprint
/// when bounding it on screen.
pub const ALPHA_EPS: f64 = 1e-9;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"GSCK";
pub const CHECKPOINT_VERSION: u16 = 1;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianCloud {
    pub positions: Vec<[f64; 3]>,
    /// `[w, x, y, z]`
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<[f64; 3]>,
}

/// One splat's parameters, for building clouds.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Splat {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color_logit: [f64; 3],
}

impl GaussianCloud {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn push(&mut self, s: Splat) {
        self.positions.push(s.position);
        self.rotations.push(s.rotation);
        self.log_scales.push(s.log_scale);
        self.opacity_logits.push(s.opacity_logit);
        self.color_logits.push(s.color_logit);
    }

    pub fn splat(&self, i: usize) -> Splat {
        Splat {
            position: self.positions[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            color_logit: self.color_logits[i],
        }
    }

    pub fn from_splats(splats: impl IntoIterator<Item = Splat>) -> Self {
        let mut c = GaussianCloud::default();
        for s in splats {
            c.push(s);
        }
        c
    }

    /// Keeps splats where `keep[i]` is true.
    pub fn retain_mask(&mut self, keep: &[bool]) {
        fn filter<T: Copy>(v: &mut Vec<T>, keep: &[bool]) {
            let mut it = keep.iter();
            v.retain(|_| *it.next().unwrap());
        }
        filter(&mut self.positions, keep);
        filter(&mut self.rotations, keep);
        filter(&mut self.log_scales, keep);
        filter(&mut self.opacity_logits, keep);
        filter(&mut self.color_logits, keep);
    }

    pub fn opacity(&self, i: usize) -> f64 {
        sigmoid(self.opacity_logits[i])
    }

    pub fn color(&self, i: usize) -> [f64; 3] {
        self.color_logits[i].map(sigmoid)
    }

    pub fn renormalize_rotations(&mut self) {
        for q in &mut self.rotations {
            let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
            if n > 1e-12 && n.is_finite() {
                *q = q.map(|c| c / n);
            } else {
                *q = [1.0, 0.0, 0.0, 0.0];
            }
        }
    }

    /// Flattened parameter groups in checkpoint order.
    pub fn groups(&self) -> [Vec<f64>; 5] {
        [
            self.positions.iter().flatten().copied().collect(),
            self.rotations.iter().flatten().copied().collect(),
            self.log_scales.iter().flatten().copied().collect(),
            self.opacity_logits.clone(),
            self.color_logits.iter().flatten().copied().collect(),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }

    /// Checks the structural invariants: finite values and unit quaternions.
    pub fn validate(&self) -> Result<()> {
        if !self.all_finite() {
            return Err(Error::NonFinite("gaussian cloud parameters".into()));
        }
        for (i, q) in self.rotations.iter().enumerate() {
            let n = (q.iter().map(|c| c * c).sum::<f64>()).sqrt();
            if (n - 1.0).abs() > 1e-9 {
                return Err(Error::Malformed(format!("splat {i} quaternion norm {n}")));
            }
        }
        Ok(())
    }
}

// --- rotation / covariance ---------------------------------------------------

fn normalize_quat(q: &[f64; 4]) -> ([f64; 4], f64) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    (q.map(|c| c / n), n)
}

/// Rotation matrix of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_rotation(q: &[f64; 4]) -> Matrix3<f64> {
    let [w, x, y, z] = *q;
    Matrix3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient w.r.t. the quaternion components given the gradient w.r.t. `R(q)`.
fn quat_rotation_vjp(q: &[f64; 4], g: &Matrix3<f64>) -> [f64; 4] {
    let [w, x, y, z] = *q;
    let gw = -z * g[(0, 1)] + y * g[(0, 2)] + z * g[(1, 0)] - x * g[(1, 2)] - y * g[(2, 0)] + x * g[(2, 1)];
    let gx = y * g[(0, 1)] + z * g[(0, 2)] + y * g[(1, 0)] - 2.0 * x * g[(1, 1)] - w * g[(1, 2)]
        + z * g[(2, 0)]
        + w * g[(2, 1)]
        - 2.0 * x * g[(2, 2)];
    let gy = -2.0 * y * g[(0, 0)] + x * g[(0, 1)] + w * g[(0, 2)] + x * g[(1, 0)] + z * g[(1, 2)]
        - w * g[(2, 0)]
        + z * g[(2, 1)]
        - 2.0 * y * g[(2, 2)];
    let gz = -2.0 * z * g[(0, 0)] - w * g[(0, 1)] + x * g[(0, 2)] + w * g[(1, 0)] - 2.0 * z * g[(1, 1)]
        + y * g[(1, 2)]
        + x * g[(2, 0)]
        + y * g[(2, 1)];
    [2.0 * gw, 2.0 * gx, 2.0 * gy, 2.0 * gz]
}

/// `Σ = R S Sᵀ Rᵀ` with `S = diag(exp(log_scale))`. The quaternion is
/// normalized first.
pub fn build_covariance(rotation: &[f64; 4], log_scale: &[f64; 3]) -> Matrix3<f64> {
    let (q, _) = normalize_quat(rotation);
    let r = quat_to_rotation(&q);
    let d = Matrix3::from_diagonal(&Vector3::from(log_scale.map(|s| (2.0 * s).exp())));
    let sigma = r * d * r.transpose();
    // exact symmetry
    (sigma + sigma.transpose()) * 0.5
}

// --- projection ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ProjectedSplat {
    pub index: usize,
    pub mean2d: Vector2<f64>,
    pub cov2d: Matrix2<f64>,
    /// Inverse of `cov2d`.
    pub conic: Matrix2<f64>,
    pub depth: f64,
    pub color: [f64; 3],
    /// Base opacity (sigmoid of the logit).
    pub opacity: f64,
    /// Half-extent of the screen-space bounding box, px.
    pub extent: Vector2<f64>,
}

impl ProjectedSplat {
    /// Inclusive pixel bounding box `(x0, y0, x1, y1)` clipped to the image, or
    /// `None` when off-screen.
    pub fn pixel_bounds(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        // pixel p is sampled at p + 0.5
        let x0 = (self.mean2d.x - self.extent.x - 0.5).ceil().max(0.0);
        let x1 = (self.mean2d.x + self.extent.x - 0.5).floor().min(width as f64 - 1.0);
        let y0 = (self.mean2d.y - self.extent.y - 0.5).ceil().max(0.0);
        let y1 = (self.mean2d.y + self.extent.y - 0.5).floor().min(height as f64 - 1.0);
        (x0 <= x1 && y0 <= y1).then(|| (x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }
}

/// `exp(-½ dᵀ Σ⁻¹ d)` with `d = pixel − mean2d`.
#[inline]
pub fn eval_gaussian2d(proj: &ProjectedSplat, pixel: Vector2<f64>) -> f64 {
    (-0.5 * mahalanobis_sq(&proj.conic, &(pixel - proj.mean2d))).exp()
}

#[inline]
pub fn mahalanobis_sq(conic: &Matrix2<f64>, d: &Vector2<f64>) -> f64 {
    conic[(0, 0)] * d.x * d.x + 2.0 * conic[(0, 1)] * d.x * d.y + conic[(1, 1)] * d.y * d.y
}

/// Intermediate values of one projection, kept for the backward pass.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionCache {
    pub p_cam: Vector3<f64>,
    pub unit_quat: [f64; 4],
    pub quat_norm: f64,
    pub rot: Matrix3<f64>,
    pub scale_sq: Vector3<f64>,
    pub w2c: Matrix3<f64>,
    pub sigma_cam: Matrix3<f64>,
    pub jac: Matrix2x3<f64>,
}

/// Projects splat `i`. Returns `None` for splats at or before the near plane,
/// with negligible opacity, or whose footprint misses the image.
pub fn project(
    cloud: &GaussianCloud,
    i: usize,
    pose: &Pose,
    intrinsics: &Intrinsics,
) -> Option<(ProjectedSplat, ProjectionCache)> {
    let w2c = pose.world_to_camera_rotation();
    project_with(cloud, i, &w2c, &pose.translation, intrinsics)
}

pub(crate) fn project_with(
    cloud: &GaussianCloud,
    i: usize,
    w2c: &Matrix3<f64>,
    cam_origin: &Vector3<f64>,
    k: &Intrinsics,
) -> Option<(ProjectedSplat, ProjectionCache)> {
    let p_cam = w2c * (Vector3::from(cloud.positions[i]) - cam_origin);
    let z = p_cam.z;
    if z <= NEAR_PLANE {
        return None;
    }
    let opacity = sigmoid(cloud.opacity_logits[i]);
    if opacity <= ALPHA_EPS {
        return None;
    }
    let (unit_quat, quat_norm) = normalize_quat(&cloud.rotations[i]);
    let rot = quat_to_rotation(&unit_quat);
    let scale_sq = Vector3::from(cloud.log_scales[i].map(|s| (2.0 * s).exp()));
    let sigma = rot * Matrix3::from_diagonal(&scale_sq) * rot.transpose();
    let sigma_cam = w2c * sigma * w2c.transpose();
    let (x, y) = (p_cam.x, p_cam.y);
    let jac = Matrix2x3::new(k.fx / z, 0.0, -k.fx * x / (z * z), 0.0, k.fy / z, -k.fy * y / (z * z));
    let mut cov2d = jac * sigma_cam * jac.transpose();
    cov2d[(0, 1)] = 0.5 * (cov2d[(0, 1)] + cov2d[(1, 0)]);
    cov2d[(1, 0)] = cov2d[(0, 1)];
    cov2d[(0, 0)] += COV2D_DILATION;
    cov2d[(1, 1)] += COV2D_DILATION;
    let det = cov2d[(0, 0)] * cov2d[(1, 1)] - cov2d[(0, 1)] * cov2d[(0, 1)];
    if !(det > 0.0) {
        return None;
    }
    let conic = Matrix2::new(cov2d[(1, 1)], -cov2d[(0, 1)], -cov2d[(1, 0)], cov2d[(0, 0)]) / det;
    let mean2d = Vector2::new(k.fx * x / z + k.cx, k.fy * y / z + k.cy);
    // footprint where opacity * g >= ALPHA_EPS
    let r2 = 2.0 * (opacity / ALPHA_EPS).ln();
    let extent = Vector2::new((r2 * cov2d[(0, 0)]).sqrt(), (r2 * cov2d[(1, 1)]).sqrt());
    let proj = ProjectedSplat {
        index: i,
        mean2d,
        cov2d,
        conic,
        depth: z,
        color: cloud.color(i),
        opacity,
        extent,
    };
    proj.pixel_bounds(k.width, k.height)?;
    Some((
        proj,
        ProjectionCache {
            p_cam,
            unit_quat,
            quat_norm,
            rot,
            scale_sq,
            w2c: *w2c,
            sigma_cam,
            jac,
        },
    ))
}

/// Geometry gradients of one splat.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GeometryGrad {
    pub position: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
}

/// Chains screen-space gradients (w.r.t. `mean2d` and the full 2×2 `conic`
/// matrix) back to position, raw quaternion and log-scale.
pub fn project_backward(
    cache: &ProjectionCache,
    proj: &ProjectedSplat,
    k: &Intrinsics,
    d_mean2d: &Vector2<f64>,
    d_conic: &Matrix2<f64>,
) -> GeometryGrad {
    let m = proj.conic;
    // conic = cov⁻¹
    let d_cov = -(m * d_conic * m);
    let jac = cache.jac;
    let sig_c = cache.sigma_cam;
    // cov = J Σc Jᵀ + dilation
    let d_sigma_cam = jac.transpose() * d_cov * jac;
    let d_jac = (d_cov + d_cov.transpose()) * jac * sig_c;

    let (x, y, z) = (cache.p_cam.x, cache.p_cam.y, cache.p_cam.z);
    let (z2, z3) = (z * z, z * z * z);
    let mut d_pcam = Vector3::new(
        d_mean2d.x * k.fx / z,
        d_mean2d.y * k.fy / z,
        -d_mean2d.x * k.fx * x / z2 - d_mean2d.y * k.fy * y / z2,
    );
    d_pcam.x += d_jac[(0, 2)] * (-k.fx / z2);
    d_pcam.y += d_jac[(1, 2)] * (-k.fy / z2);
    d_pcam.z += d_jac[(0, 0)] * (-k.fx / z2)
        + d_jac[(0, 2)] * (2.0 * k.fx * x / z3)
        + d_jac[(1, 1)] * (-k.fy / z2)
        + d_jac[(1, 2)] * (2.0 * k.fy * y / z3);
    let d_position = cache.w2c.transpose() * d_pcam;

    // Σc = W Σ Wᵀ, Σ = R D Rᵀ
    let d_sigma = cache.w2c.transpose() * d_sigma_cam * cache.w2c;
    let d_sigma_sym = d_sigma + d_sigma.transpose();
    let dmat = Matrix3::from_diagonal(&cache.scale_sq);
    let d_rot = d_sigma_sym * cache.rot * dmat;
    let d_diag = cache.rot.transpose() * d_sigma * cache.rot;
    let log_scale = [0, 1, 2].map(|a| d_diag[(a, a)] * 2.0 * cache.scale_sq[a]);

    let gq = quat_rotation_vjp(&cache.unit_quat, &d_rot);
    let q = cache.unit_quat;
    let dot: f64 = (0..4).map(|a| q[a] * gq[a]).sum();
    let rotation = [0, 1, 2, 3].map(|a| (gq[a] - q[a] * dot) / cache.quat_norm);

    GeometryGrad {
        position: d_position.into(),
        rotation,
        log_scale,
    }
}

// --- checkpoint I/O -----------------------------------------------------------

/// Sample precision of a checkpoint's parameter arrays.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    fn width(self) -> u16 {
        match self {
            Precision::F32 => 4,
            Precision::F64 => 8,
        }
    }
}

impl GaussianCloud {
    /// Checkpoint layout (little-endian): magic `"GSCK"` | version u16 = 1 |
    /// sample width u16 (4 = f32, 8 = f64) | splat count u32 | then the
    /// groups positions (3n), rotations wxyz (4n), log_scales (3n),
    /// opacity_logits (n), color_logits (3n), each as flat arrays.
    pub fn encode(&self, precision: Precision) -> Vec<u8> {
        let n = self.len();
        let mut out = Vec::with_capacity(12 + 14 * n * precision.width() as usize);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&precision.width().to_le_bytes());
        out.extend_from_slice(&(n as u32).to_le_bytes());
        for g in self.groups() {
            for v in g {
                match precision {
                    Precision::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    Precision::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    /// Decodes a checkpoint; returns the cloud and the number of bytes consumed.
    pub fn decode(bytes: &[u8]) -> Result<(GaussianCloud, usize)> {
        if bytes.len() < 12 {
            return Err(Error::Truncated {
                what: "checkpoint header",
                needed: 12,
                available: bytes.len(),
            });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic,
            });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let width = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
        if width != 4 && width != 8 {
            return Err(Error::Malformed(format!("sample width {width}")));
        }
        let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let needed = 12 + 14 * n * width;
        if bytes.len() < needed {
            return Err(Error::Truncated {
                what: "checkpoint arrays",
                needed,
                available: bytes.len(),
            });
        }
        let vals: Vec<f64> = bytes[12..needed]
            .chunks_exact(width)
            .map(|c| match width {
                4 => f32::from_le_bytes(c.try_into().unwrap()) as f64,
                _ => f64::from_le_bytes(c.try_into().unwrap()),
            })
            .collect();
        let (pos, rest) = vals.split_at(3 * n);
        let (rot, rest) = rest.split_at(4 * n);
        let (scl, rest) = rest.split_at(3 * n);
        let (opa, col) = rest.split_at(n);
        let cloud = GaussianCloud {
            positions: pos.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            rotations: rot.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
            log_scales: scl.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
            opacity_logits: opa.to_vec(),
            color_logits: col.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        };
        Ok((cloud, needed))
    }

    pub fn save(&self, path: &Path, precision: Precision) -> Result<()> {
        write_atomic(path, &self.encode(precision))
    }

    pub fn load(path: &Path) -> Result<GaussianCloud> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(GaussianCloud::decode(&bytes)?.0)
    }

    /// Binary little-endian PLY with the property names common splat viewers
    /// read (`f_dc_*` holds degree-0 SH coefficients).
    pub fn export_ply(&self, path: &Path) -> Result<()> {
        const SH_C0: f64 = 0.282_094_791_773_878_1;
        let mut out = Vec::new();
        let header = format!(
            "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
             property float x\nproperty float y\nproperty float z\n\
             property float nx\nproperty float ny\nproperty float nz\n\
             property float f_dc_0\nproperty float f_dc_1\nproperty float f_dc_2\n\
             property float opacity\n\
             property float scale_0\nproperty float scale_1\nproperty float scale_2\n\
             property float rot_0\nproperty float rot_1\nproperty float rot_2\nproperty float rot_3\n\
             end_header\n",
            self.len()
        );
        out.write_all(header.as_bytes()).unwrap();
        for i in 0..self.len() {
            let color = self.color(i);
            let row = self.positions[i]
                .into_iter()
                .chain([0.0; 3])
                .chain(color.map(|c| (c - 0.5) / SH_C0))
                .chain([self.opacity_logits[i]])
                .chain(self.log_scales[i])
                .chain(self.rotations[i]);
            for v in row {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        write_atomic(path, &out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{SymmetricEigen, UnitQuaternion};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_quat(rng: &mut impl Rng) -> [f64; 4] {
        let q = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        normalize_quat(&q).0
    }

    #[test]
    fn covariance_identity_and_axis_aligned() {
        let id = build_covariance(&[1.0, 0.0, 0.0, 0.0], &[0.0; 3]);
        assert!((id - Matrix3::identity()).norm() < 1e-15);
        let d = build_covariance(&[1.0, 0.0, 0.0, 0.0], &[2f64.ln(), 0.0, 0.0]);
        assert!((d - Matrix3::from_diagonal(&Vector3::new(4.0, 1.0, 1.0))).norm() < 1e-12);
    }

    #[test]
    fn covariance_eigenvalues_are_squared_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let q = random_quat(&mut rng);
            let s = [0; 3].map(|_| rng.random_range(-1.5..1.0));
            let sigma = build_covariance(&q, &s);
            assert!((sigma - sigma.transpose()).abs().max() < 1e-12);
            assert!(sigma.cholesky().is_some());
            let mut eig: Vec<f64> = SymmetricEigen::new(sigma).eigenvalues.iter().copied().collect();
            let mut expected: Vec<f64> = s.iter().map(|v| (2.0 * v).exp()).collect();
            eig.sort_by(f64::total_cmp);
            expected.sort_by(f64::total_cmp);
            for (a, b) in eig.iter().zip(&expected) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn quaternion_matrix_matches_nalgebra() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let q = random_quat(&mut rng);
            let uq = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]));
            let r = uq.to_rotation_matrix().into_inner();
            assert!((r - quat_to_rotation(&q)).norm() < 1e-12);
        }
    }

    fn single(position: [f64; 3], sigma: f64) -> GaussianCloud {
        GaussianCloud::from_splats([Splat {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [sigma.ln(); 3],
            opacity_logit: 0.0,
            color_logit: [0.0; 3],
        }])
    }

    #[test]
    fn on_axis_projection_closed_form() {
        let k = Intrinsics::centered(64, 64, 50.0);
        let (sigma, z) = (0.1, 4.0);
        let cloud = single([0.0, 0.0, z], sigma);
        let (p, _) = project(&cloud, 0, &Pose::identity(), &k).unwrap();
        let expected = (k.fx * sigma / z).powi(2) + COV2D_DILATION;
        assert!((p.cov2d[(0, 0)] - expected).abs() < 1e-12);
        assert!((p.cov2d[(1, 1)] - expected).abs() < 1e-12);
        assert!(p.cov2d[(0, 1)].abs() < 1e-15);
        assert!((p.mean2d - Vector2::new(32.0, 32.0)).norm() < 1e-12);
        assert_eq!(p.depth, z);
    }

    #[test]
    fn behind_camera_is_culled() {
        let k = Intrinsics::centered(32, 32, 30.0);
        assert!(project(&single([0.0, 0.0, -2.0], 0.1), 0, &Pose::identity(), &k).is_none());
        assert!(project(&single([0.0, 0.0, 0.005], 0.1), 0, &Pose::identity(), &k).is_none());
    }

    #[test]
    fn doubling_depth_halves_std_dev() {
        let k = Intrinsics::centered(64, 64, 50.0);
        let std_at = |z: f64| {
            let s = z / 3.0;
            let (p, _) = project(&single([0.3 * s, -0.2 * s, z], 0.2), 0, &Pose::identity(), &k).unwrap();
            // undo the dilation and compare the x-axis spread of the ellipse
            let c = p.cov2d - Matrix2::identity() * COV2D_DILATION;
            SymmetricEigen::new(c).eigenvalues.max().sqrt()
        };
        let ratio = std_at(6.0) / std_at(3.0);
        // moving along the viewing ray keeps the direction, so the law is exact
        assert!((ratio - 0.5).abs() < 1e-6, "ratio {ratio}");
    }

    #[test]
    fn rotation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = Intrinsics::centered(48, 40, 45.0);
        let cloud = GaussianCloud::from_splats([Splat {
            position: [0.2, -0.1, 0.3],
            rotation: random_quat(&mut rng),
            log_scale: [-1.5, -1.2, -2.0],
            opacity_logit: 1.0,
            color_logit: [0.0; 3],
        }]);
        let pose = Pose::look_at(
            nalgebra::Point3::new(0.5, -3.0, 1.0),
            nalgebra::Point3::origin(),
            Vector3::z(),
        );
        let (a, _) = project(&cloud, 0, &pose, &k).unwrap();
        let g = UnitQuaternion::from_euler_angles(0.3, -0.7, 1.1);
        let mut rotated = cloud.clone();
        rotated.positions[0] = (g * Vector3::from(cloud.positions[0])).into();
        let q = cloud.rotations[0];
        let gq = g.quaternion() * nalgebra::Quaternion::new(q[0], q[1], q[2], q[3]);
        rotated.rotations[0] = [gq.w, gq.i, gq.j, gq.k];
        let moved = Pose::new(g * pose.rotation, g * pose.translation);
        let (b, _) = project(&rotated, 0, &moved, &k).unwrap();
        assert!((a.mean2d - b.mean2d).norm() < 1e-6);
        assert!((a.cov2d - b.cov2d).norm() < 1e-6);
    }

    #[test]
    fn gaussian2d_values() {
        let k = Intrinsics::centered(64, 64, 50.0);
        let cloud = GaussianCloud::from_splats([Splat {
            position: [0.1, 0.05, 3.0],
            rotation: normalize_quat(&[0.9, 0.2, -0.3, 0.1]).0,
            log_scale: [-1.0, -2.0, -1.5],
            opacity_logit: 0.0,
            color_logit: [0.0; 3],
        }]);
        let (p, _) = project(&cloud, 0, &Pose::identity(), &k).unwrap();
        assert!((eval_gaussian2d(&p, p.mean2d) - 1.0).abs() < 1e-15);
        let eig = SymmetricEigen::new(p.cov2d);
        for a in 0..2 {
            let d = eig.eigenvectors.column(a) * eig.eigenvalues[a].sqrt();
            let w = eval_gaussian2d(&p, p.mean2d + d);
            assert!((w - (-0.5f64).exp()).abs() < 1e-12);
            let w2 = eval_gaussian2d(&p, p.mean2d - d);
            assert!((w - w2).abs() < 1e-14);
        }
        let off = eval_gaussian2d(&p, p.mean2d + Vector2::new(0.7, -0.4));
        assert!(off > 0.0 && off < 1.0);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cloud = GaussianCloud::from_splats((0..5).map(|_| Splat {
            position: [0; 3].map(|_| rng.random_range(-1.0..1.0)),
            rotation: random_quat(&mut rng),
            log_scale: [0; 3].map(|_| rng.random_range(-3.0..0.0)),
            opacity_logit: rng.random_range(-2.0..2.0),
            color_logit: [0; 3].map(|_| rng.random_range(-2.0..2.0)),
        }));
        let bytes = cloud.encode(Precision::F64);
        assert_eq!(GaussianCloud::decode(&bytes).unwrap().0, cloud);
        let f32_back = GaussianCloud::decode(&cloud.encode(Precision::F32)).unwrap().0;
        assert!((f32_back.positions[2][1] - cloud.positions[2][1]).abs() < 1e-6);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(GaussianCloud::decode(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(
            GaussianCloud::decode(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn retain_mask_keeps_alignment() {
        let mut cloud = GaussianCloud::from_splats((0..4).map(|i| Splat {
            position: [i as f64; 3],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [0.0; 3],
            opacity_logit: i as f64,
            color_logit: [0.0; 3],
        }));
        cloud.retain_mask(&[true, false, true, false]);
        assert_eq!(cloud.opacity_logits, vec![0.0, 2.0]);
        assert_eq!(cloud.positions[1], [2.0; 3]);
    }
}
