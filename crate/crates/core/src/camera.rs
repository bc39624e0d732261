//! Pinhole intrinsics, rigid camera poses and time-indexed trajectories.
//!
//! Camera frame convention: +x right, +y down, +z forward. A pixel `(px, py)`
//! covers `[px, px+1) × [py, py+1)` and is sampled at its center.

use nalgebra::{Point3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub height: usize,
    pub width: usize,
}

impl Intrinsics {
    /// Square pixels, principal point at the image center.
    pub fn centered(width: usize, height: usize, focal: f64) -> Self {
        Self {
            fx: focal,
            fy: focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            height,
            width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) || !self.fx.is_finite() || !self.fy.is_finite() {
            return Err(Error::config("intrinsics", format!("focal lengths must be > 0, got ({}, {})", self.fx, self.fy)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::config("intrinsics", "resolution must be non-zero"));
        }
        Ok(())
    }

    /// Unnormalized camera-frame direction through a (sub)pixel position.
    pub fn ray_dir(&self, u: f64, v: f64) -> Vector3<f64> {
        Vector3::new((u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0)
    }

    pub fn project(&self, p_cam: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p_cam.x / p_cam.z + self.cx,
            self.fy * p_cam.y / p_cam.z + self.cy,
        )
    }
}

/// Camera-to-world rigid transform: `rotation` maps camera axes to world axes,
/// `translation` is the camera origin in world coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction
    /// (image rows run opposite to it).
    pub fn look_at(eye: Point3<f64>, target: Point3<f64>, up: Vector3<f64>) -> Self {
        let forward = (target - eye).normalize();
        let mut right = forward.cross(&up);
        if right.norm() < 1e-12 {
            // looking along up: pick any perpendicular
            right = forward.cross(&Vector3::x());
            if right.norm() < 1e-12 {
                right = forward.cross(&Vector3::y());
            }
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let m = nalgebra::Matrix3::from_columns(&[right, down, forward]);
        let rot = Rotation3::from_matrix_unchecked(m);
        Self {
            rotation: UnitQuaternion::from_rotation_matrix(&rot),
            translation: eye.coords,
        }
    }

    /// Quaternion as `[w, x, y, z]`.
    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn from_wxyz(q: [f64; 4], t: [f64; 3]) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = raw.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::Input(format!("degenerate quaternion {q:?}")));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(raw),
            translation: Vector3::new(t[0], t[1], t[2]),
        })
    }

    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse_transform_vector(&(p - self.translation))
    }

    pub fn camera_to_world_dir(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transform_vector(d)
    }

    /// Rotation matrix of the world-to-camera transform.
    pub fn world_to_camera_rotation(&self) -> nalgebra::Matrix3<f64> {
        self.rotation.inverse().to_rotation_matrix().into_inner()
    }

    /// Slerp on rotation, lerp on translation.
    pub fn interpolate(&self, other: &Pose, s: f64) -> Pose {
        let rotation = self
            .rotation
            .try_slerp(&other.rotation, s, 1e-12)
            .unwrap_or(self.rotation);
        Pose {
            rotation,
            translation: self.translation.lerp(&other.translation, s),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CameraTrajectory {
    pub intrinsics: Intrinsics,
    /// One pose per readout, indexed by frame.
    pub poses: Vec<Pose>,
    pub readout_period_us: f64,
    pub speed_scale: f64,
}

impl CameraTrajectory {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Pose at a fractional frame time. Integer times return the stored pose
    /// verbatim; times outside the trajectory clamp to its ends.
    pub fn pose_at(&self, t: f64) -> Pose {
        let last = self.poses.len() - 1;
        if t <= 0.0 {
            return self.poses[0];
        }
        if t >= last as f64 {
            return self.poses[last];
        }
        let i = t.floor() as usize;
        let s = t - i as f64;
        if s == 0.0 {
            self.poses[i]
        } else {
            self.poses[i].interpolate(&self.poses[i + 1], s)
        }
    }
}

// JSON interchange for the poses file.

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PoseRecord {
    pub t: usize,
    pub q: [f64; 4],
    pub tvec: [f64; 3],
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct PosesFile {
    pub intrinsics: Intrinsics,
    pub readout_period_us: f64,
    #[serde(default = "one")]
    pub speed_scale: f64,
    pub poses: Vec<PoseRecord>,
}

fn one() -> f64 {
    1.0
}

impl From<&CameraTrajectory> for PosesFile {
    fn from(traj: &CameraTrajectory) -> Self {
        PosesFile {
            intrinsics: traj.intrinsics,
            readout_period_us: traj.readout_period_us,
            speed_scale: traj.speed_scale,
            poses: traj
                .poses
                .iter()
                .enumerate()
                .map(|(t, p)| PoseRecord {
                    t,
                    q: p.quat_wxyz(),
                    tvec: p.translation.into(),
                })
                .collect(),
        }
    }
}

impl PosesFile {
    pub fn into_trajectory(self) -> Result<CameraTrajectory> {
        self.intrinsics.validate()?;
        let mut records = self.poses;
        records.sort_by_key(|r| r.t);
        for (i, r) in records.iter().enumerate() {
            if r.t != i {
                return Err(Error::Malformed(format!("pose indices must be 0..N contiguous; found t={} at position {i}", r.t)));
            }
        }
        if records.is_empty() {
            return Err(Error::Malformed("poses file has no poses".into()));
        }
        let poses = records
            .iter()
            .map(|r| Pose::from_wxyz(r.q, r.tvec))
            .collect::<Result<Vec<_>>>()?;
        Ok(CameraTrajectory {
            intrinsics: self.intrinsics,
            poses,
            readout_period_us: self.readout_period_us,
            speed_scale: self.speed_scale,
        })
    }
}
