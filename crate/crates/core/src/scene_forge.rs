//! Synthetic ground truth: ray-cast lambertian scenes, camera trajectories and
//! spike datasets generated from them.

use std::path::{Path, PathBuf};

use nalgebra::{Point3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{CameraTrajectory, Intrinsics, Pose, PosesFile};
use crate::error::{Error, Result};
use crate::image::{write_atomic, Image};
use crate::sensor_sim::{simulate, SensorConfig};
use crate::spike_stream::SpikeStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { value: f64 },
    /// Alternates `a`/`b` on a world-space grid of `size` (x/y for planes, all axes otherwise).
    Checker { a: f64, b: f64, size: f64 },
    /// Linear ramp along world `axis` (0=x, 1=y, 2=z) over `[lo, hi]`.
    Gradient { from: f64, to: f64, axis: usize, lo: f64, hi: f64 },
}

impl Texture {
    fn sample(&self, p: &Point3<f64>) -> f64 {
        match *self {
            Texture::Solid { value } => value,
            Texture::Checker { a, b, size } => {
                let cell = (p.x / size).floor() + (p.y / size).floor() + (p.z / size).floor();
                if (cell as i64).rem_euclid(2) == 0 {
                    a
                } else {
                    b
                }
            }
            Texture::Gradient { from, to, axis, lo, hi } => {
                let s = ((p[axis] - lo) / (hi - lo)).clamp(0.0, 1.0);
                from + (to - from) * s
            }
        }
    }

    fn max_value(&self) -> f64 {
        match *self {
            Texture::Solid { value } => value,
            Texture::Checker { a, b, .. } => a.max(b),
            Texture::Gradient { from, to, .. } => from.max(to),
        }
    }

    fn min_value(&self) -> f64 {
        match *self {
            Texture::Solid { value } => value,
            Texture::Checker { a, b, .. } => a.min(b),
            Texture::Gradient { from, to, .. } => from.min(to),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "shape", rename_all = "snake_case")]
pub enum Shape {
    Sphere { center: [f64; 3], radius: f64 },
    AaBox { min: [f64; 3], max: [f64; 3] },
    /// Horizontal plane `z = height`, limited to `|x|, |y| <= half_extent`.
    GroundPlane { height: f64, half_extent: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Primitive {
    pub shape: Shape,
    pub albedo: Texture,
    /// Radiance emitted toward the viewer, scaled by albedo and `|n·v|`.
    #[serde(default)]
    pub emissive: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Lighting {
    /// Unit vector pointing toward the light.
    pub direction: [f64; 3],
    pub ambient: f64,
    pub diffuse: f64,
}

impl Default for Lighting {
    fn default() -> Self {
        let d = Vector3::new(0.35, 0.25, 0.9).normalize();
        Self {
            direction: d.into(),
            ambient: 0.35,
            diffuse: 0.65,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneBounds {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl SceneBounds {
    pub fn center(&self) -> Point3<f64> {
        Point3::from((Vector3::from(self.min) + Vector3::from(self.max)) / 2.0)
    }

    pub fn diameter(&self) -> f64 {
        (Vector3::from(self.max) - Vector3::from(self.min)).norm()
    }

    /// Ray parameter range inside the box, if the ray hits it.
    pub fn ray_range(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Option<(f64, f64)> {
        slab(origin, dir, &self.min, &self.max)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticScene {
    pub name: String,
    pub primitives: Vec<Primitive>,
    pub background: f64,
    #[serde(default)]
    pub lighting: Lighting,
    /// Sub-samples per pixel axis (anti-aliasing).
    pub supersample: usize,
    pub bounds: SceneBounds,
}

fn slab(o: &Vector3<f64>, d: &Vector3<f64>, lo: &[f64; 3], hi: &[f64; 3]) -> Option<(f64, f64)> {
    let mut t0 = f64::NEG_INFINITY;
    let mut t1 = f64::INFINITY;
    for a in 0..3 {
        if d[a].abs() < 1e-300 {
            if o[a] < lo[a] || o[a] > hi[a] {
                return None;
            }
        } else {
            let inv = 1.0 / d[a];
            let (mut ta, mut tb) = ((lo[a] - o[a]) * inv, (hi[a] - o[a]) * inv);
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
    }
    (t1 >= t0.max(0.0)).then_some((t0.max(0.0), t1))
}

struct Hit {
    t: f64,
    normal: Vector3<f64>,
}

const RAY_EPS: f64 = 1e-9;

impl Shape {
    fn intersect(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<Hit> {
        match self {
            Shape::Sphere { center, radius } => {
                let c = Vector3::from(*center);
                let oc = o - c;
                let a = d.dot(d);
                let b = oc.dot(d);
                let disc = b * b - a * (oc.dot(&oc) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let sq = disc.sqrt();
                let t = [(-b - sq) / a, (-b + sq) / a].into_iter().find(|&t| t > RAY_EPS)?;
                let normal = (o + d * t - c) / *radius;
                Some(Hit { t, normal })
            }
            Shape::AaBox { min, max } => {
                let (t0, t1) = slab(o, d, min, max)?;
                let t = if t0 > RAY_EPS { t0 } else if t1 > RAY_EPS { t1 } else { return None };
                let p = o + d * t;
                // face normal: axis whose face is closest to the hit point
                let mut best = (f64::INFINITY, Vector3::zeros());
                for a in 0..3 {
                    for (face, sign) in [(min[a], -1.0), (max[a], 1.0)] {
                        let dist = (p[a] - face).abs();
                        if dist < best.0 {
                            let mut n = Vector3::zeros();
                            n[a] = sign;
                            best = (dist, n);
                        }
                    }
                }
                Some(Hit { t, normal: best.1 })
            }
            Shape::GroundPlane { height, half_extent } => {
                if d.z.abs() < 1e-300 {
                    return None;
                }
                let t = (height - o.z) / d.z;
                if t <= RAY_EPS {
                    return None;
                }
                let p = o + d * t;
                if p.x.abs() > *half_extent || p.y.abs() > *half_extent {
                    return None;
                }
                let normal = if o.z >= *height { Vector3::z() } else { -Vector3::z() };
                Some(Hit { t, normal })
            }
        }
    }
}

impl SyntheticScene {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !unit(self.background) {
            return Err(Error::config("background", "must lie in [0, 1]"));
        }
        for p in &self.primitives {
            if !unit(p.albedo.max_value()) || !unit(p.albedo.min_value()) {
                return Err(Error::config("albedo", "texture values must lie in [0, 1]"));
            }
            if !(0.0..=1.0).contains(&p.emissive) {
                return Err(Error::config("emissive", "must lie in [0, 1]"));
            }
        }
        if self.supersample == 0 {
            return Err(Error::config("supersample", "must be >= 1"));
        }
        Ok(())
    }

    /// Radiance along a world-space ray.
    pub fn trace(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> f64 {
        let mut nearest: Option<(Hit, &Primitive)> = None;
        for prim in &self.primitives {
            if let Some(hit) = prim.shape.intersect(origin, dir) {
                if nearest.as_ref().is_none_or(|(h, _)| hit.t < h.t) {
                    nearest = Some((hit, prim));
                }
            }
        }
        let Some((hit, prim)) = nearest else {
            return self.background;
        };
        let p = Point3::from(origin + dir * hit.t);
        let albedo = prim.albedo.sample(&p);
        let light = Vector3::from(self.lighting.direction);
        let view = -dir.normalize();
        // shade the side facing the viewer
        let n = if hit.normal.dot(&view) < 0.0 { -hit.normal } else { hit.normal };
        let diffuse = n.dot(&light).max(0.0);
        let shaded = albedo * (self.lighting.ambient + self.lighting.diffuse * diffuse);
        let emitted = prim.emissive * albedo * n.dot(&view).abs();
        (shaded + emitted).clamp(0.0, 1.0)
    }
}

/// Renders the single-channel radiance seen from `pose`.
pub fn render_frame(scene: &SyntheticScene, pose: &Pose, intrinsics: &Intrinsics) -> Result<Image> {
    intrinsics.validate()?;
    let (w, h) = (intrinsics.width, intrinsics.height);
    if w < 8 || h < 8 {
        return Err(Error::config("resolution", format!("must be at least 8x8, got {w}x{h}")));
    }
    let ss = scene.supersample.max(1);
    let inv = 1.0 / (ss * ss) as f64;
    let data: Vec<f64> = (0..w * h)
        .into_par_iter()
        .map(|i| {
            let (px, py) = ((i % w) as f64, (i / w) as f64);
            let mut acc = 0.0;
            for sy in 0..ss {
                for sx in 0..ss {
                    let u = px + (sx as f64 + 0.5) / ss as f64;
                    let v = py + (sy as f64 + 0.5) / ss as f64;
                    let d = pose.camera_to_world_dir(&intrinsics.ray_dir(u, v));
                    acc += scene.trace(&pose.translation, &d);
                }
            }
            acc * inv
        })
        .collect();
    Image::from_vec(w, h, 1, data)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Orbit,
    Line,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "line" => Ok(Self::Line),
            _ => Err(Error::config("traj", format!("unknown trajectory kind {s:?} (orbit|line)"))),
        }
    }
}

/// Geometry of the generated camera paths. Per-frame motion is
/// `speed_scale` times the base step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectoryParams {
    /// Camera distance from the scene center.
    pub distance: f64,
    pub elevation_deg: f64,
    pub start_azimuth_deg: f64,
    /// Orbit angle per frame at speed 1, radians.
    pub base_angular_step: f64,
    /// Line translation per frame at speed 1, world units.
    pub base_linear_step: f64,
    pub readout_period_us: f64,
}

impl Default for TrajectoryParams {
    fn default() -> Self {
        Self {
            distance: 5.5,
            elevation_deg: 55.0,
            start_azimuth_deg: -90.0,
            base_angular_step: 0.0025,
            base_linear_step: 0.004,
            readout_period_us: 25.0,
        }
    }
}

pub fn make_trajectory(
    kind: TrajectoryKind,
    duration_frames: usize,
    speed_scale: f64,
    bounds: &SceneBounds,
    intrinsics: Intrinsics,
    params: &TrajectoryParams,
) -> Result<CameraTrajectory> {
    if duration_frames < 2 {
        return Err(Error::config("frames", format!("must be >= 2, got {duration_frames}")));
    }
    if !(speed_scale > 0.0) || !speed_scale.is_finite() {
        return Err(Error::config("speed", format!("must be > 0, got {speed_scale}")));
    }
    intrinsics.validate()?;
    let center = bounds.center();
    let elev = params.elevation_deg.to_radians();
    let az0 = params.start_azimuth_deg.to_radians();
    let horiz = params.distance * elev.cos();
    let lift = params.distance * elev.sin();
    let eye_at = |az: f64| Point3::new(center.x + horiz * az.cos(), center.y + horiz * az.sin(), center.z + lift);
    let poses = match kind {
        TrajectoryKind::Orbit => (0..duration_frames)
            .map(|t| {
                let az = az0 + params.base_angular_step * speed_scale * t as f64;
                Pose::look_at(eye_at(az), center, Vector3::z())
            })
            .collect(),
        TrajectoryKind::Line => {
            let start = eye_at(az0);
            // tangent to the orbit at the start: sideways motion
            let dir = Vector3::new(-az0.sin(), az0.cos(), 0.0);
            let step = params.base_linear_step * speed_scale;
            (0..duration_frames)
                .map(|t| Pose::look_at(start + dir * (step * t as f64), center, Vector3::z()))
                .collect()
        }
    };
    Ok(CameraTrajectory {
        intrinsics,
        poses,
        readout_period_us: params.readout_period_us,
        speed_scale,
    })
}

/// A trajectory that holds one pose for every frame.
pub fn stationary_trajectory(pose: Pose, frames: usize, intrinsics: Intrinsics) -> CameraTrajectory {
    CameraTrajectory {
        intrinsics,
        poses: vec![pose; frames],
        readout_period_us: TrajectoryParams::default().readout_period_us,
        speed_scale: 0.0,
    }
}

/// Frame indices held out for evaluation: `stride/2 + k*stride`.
pub fn holdout_indices(num_frames: usize, stride: usize) -> Vec<usize> {
    if stride == 0 {
        return Vec::new();
    }
    (stride / 2..num_frames).step_by(stride).collect()
}

#[derive(Clone, Debug)]
pub struct HoldoutView {
    pub frame: usize,
    pub image: Image,
}

#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub stream: SpikeStream,
    pub trajectory: CameraTrajectory,
    pub holdout: Vec<HoldoutView>,
    pub bounds: SceneBounds,
    pub scene_name: String,
}

impl DatasetBundle {
    pub fn holdout_frames(&self) -> Vec<usize> {
        self.holdout.iter().map(|h| h.frame).collect()
    }
}

pub fn generate_dataset(
    scene: &SyntheticScene,
    trajectory: &CameraTrajectory,
    sensor: &SensorConfig,
    holdout_stride: usize,
) -> Result<DatasetBundle> {
    scene.validate()?;
    if holdout_stride == 0 {
        return Err(Error::config("holdout_stride", "must be >= 1"));
    }
    let frames = trajectory
        .poses
        .iter()
        .map(|p| render_frame(scene, p, &trajectory.intrinsics))
        .collect::<Result<Vec<_>>>()?;
    let sensor = SensorConfig {
        readout_period_us: trajectory.readout_period_us,
        ..sensor.clone()
    };
    let stream = simulate(&frames, &sensor)?;
    let holdout = holdout_indices(frames.len(), holdout_stride)
        .into_iter()
        .map(|t| HoldoutView { frame: t, image: frames[t].clone() })
        .collect();
    Ok(DatasetBundle {
        stream,
        trajectory: trajectory.clone(),
        holdout,
        bounds: scene.bounds,
        scene_name: scene.name.clone(),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DatasetMeta {
    scene: String,
    bounds: SceneBounds,
    holdout_frames: Vec<usize>,
}

pub const STREAM_FILE: &str = "stream.spks";
pub const POSES_FILE: &str = "poses.json";
pub const DATASET_FILE: &str = "dataset.json";
pub const HOLDOUT_DIR: &str = "holdout";

fn holdout_path(dir: &Path, frame: usize, ext: &str) -> PathBuf {
    dir.join(HOLDOUT_DIR).join(format!("view_{frame:05}.{ext}"))
}

impl DatasetBundle {
    /// Writes `stream.spks`, `poses.json`, `dataset.json` and `holdout/view_*.{png,f32}`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join(HOLDOUT_DIR)).map_err(|e| Error::io(dir, e))?;
        self.stream.save(&dir.join(STREAM_FILE))?;
        let poses = serde_json::to_vec_pretty(&PosesFile::from(&self.trajectory))?;
        write_atomic(&dir.join(POSES_FILE), &poses)?;
        let meta = DatasetMeta {
            scene: self.scene_name.clone(),
            bounds: self.bounds,
            holdout_frames: self.holdout_frames(),
        };
        write_atomic(&dir.join(DATASET_FILE), &serde_json::to_vec_pretty(&meta)?)?;
        for v in &self.holdout {
            v.image.save_f32(&holdout_path(dir, v.frame, "f32"))?;
            v.image.save_8bit(&holdout_path(dir, v.frame, "png"))?;
        }
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<DatasetBundle> {
        let read = |name: &str| {
            let p = dir.join(name);
            std::fs::read(&p).map_err(|e| Error::io(&p, e))
        };
        let stream = SpikeStream::decode(&read(STREAM_FILE)?)?;
        let poses: PosesFile = serde_json::from_slice(&read(POSES_FILE)?)?;
        let trajectory = poses.into_trajectory()?;
        let meta: DatasetMeta = serde_json::from_slice(&read(DATASET_FILE)?)?;
        if trajectory.len() != stream.num_frames() {
            return Err(Error::Malformed(format!(
                "{} poses for a stream of {} frames",
                trajectory.len(),
                stream.num_frames()
            )));
        }
        let holdout = meta
            .holdout_frames
            .iter()
            .map(|&t| {
                Ok(HoldoutView {
                    frame: t,
                    image: Image::load_f32(&holdout_path(dir, t, "f32"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DatasetBundle {
            stream,
            trajectory,
            holdout,
            bounds: meta.bounds,
            scene_name: meta.scene,
        })
    }
}

// Preset scenes. Albedo is gray so monochrome supervision is lossless.

pub fn checker_scene() -> SyntheticScene {
    SyntheticScene {
        name: "checker".into(),
        primitives: vec![
            Primitive {
                shape: Shape::GroundPlane { height: 0.0, half_extent: 4.0 },
                albedo: Texture::Checker { a: 0.85, b: 0.3, size: 1.0 },
                emissive: 0.0,
            },
            Primitive {
                shape: Shape::Sphere { center: [0.0, 0.0, 0.6], radius: 0.6 },
                albedo: Texture::Solid { value: 0.7 },
                emissive: 0.0,
            },
            Primitive {
                shape: Shape::AaBox { min: [0.9, -1.6, 0.0], max: [1.6, -0.9, 0.7] },
                albedo: Texture::Gradient { from: 0.35, to: 0.9, axis: 2, lo: 0.0, hi: 0.7 },
                emissive: 0.0,
            },
        ],
        background: 0.1,
        lighting: Lighting::default(),
        supersample: 3,
        bounds: SceneBounds { min: [-4.0, -4.0, 0.0], max: [4.0, 4.0, 1.2] },
    }
}

/// Textureless plane: every visible pixel has the same radiance.
pub fn flat_scene(value: f64) -> SyntheticScene {
    SyntheticScene {
        name: "flat".into(),
        primitives: vec![Primitive {
            shape: Shape::GroundPlane { height: 0.0, half_extent: 1e6 },
            albedo: Texture::Solid { value },
            emissive: 0.0,
        }],
        background: value,
        lighting: Lighting { direction: [0.0, 0.0, 1.0], ambient: 1.0, diffuse: 0.0 },
        supersample: 1,
        bounds: SceneBounds { min: [-4.0, -4.0, -0.5], max: [4.0, 4.0, 0.5] },
    }
}

pub fn empty_scene(background: f64) -> SyntheticScene {
    SyntheticScene {
        name: "empty".into(),
        primitives: Vec::new(),
        background,
        lighting: Lighting::default(),
        supersample: 1,
        bounds: SceneBounds { min: [-1.0; 3], max: [1.0; 3] },
    }
}

pub fn preset_scene(name: &str) -> Result<SyntheticScene> {
    match name {
        "checker" => Ok(checker_scene()),
        "flat" => Ok(flat_scene(0.5)),
        "empty" => Ok(empty_scene(0.5)),
        _ => Err(Error::config("scene", format!("unknown preset {name:?} (checker|flat|empty)"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cam(w: usize, f: f64) -> Intrinsics {
        Intrinsics::centered(w, w, f)
    }

    #[test]
    fn empty_scene_is_uniform() {
        let img = render_frame(&empty_scene(0.5), &Pose::identity(), &cam(16, 16.0)).unwrap();
        assert!(img.data.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn emissive_sphere_is_radially_symmetric() {
        let scene = SyntheticScene {
            name: "glow".into(),
            primitives: vec![Primitive {
                shape: Shape::Sphere { center: [0.0, 0.0, 5.0], radius: 1.0 },
                albedo: Texture::Solid { value: 1.0 },
                emissive: 1.0,
            }],
            background: 0.0,
            lighting: Lighting { direction: [0.0, 0.0, 1.0], ambient: 0.0, diffuse: 0.0 },
            supersample: 1,
            bounds: SceneBounds { min: [-1.0, -1.0, 4.0], max: [1.0, 1.0, 6.0] },
        };
        let n = 32;
        let img = render_frame(&scene, &Pose::identity(), &cam(n, 40.0)).unwrap();
        for y in 0..n {
            for x in 0..n {
                let v = img.get(x, y, 0);
                // mirror symmetry about both axes and the diagonal
                assert!((v - img.get(n - 1 - x, y, 0)).abs() < 1e-12);
                assert!((v - img.get(x, n - 1 - y, 0)).abs() < 1e-12);
                assert!((v - img.get(y, x, 0)).abs() < 1e-12);
            }
        }
        let peak = img.data.iter().cloned().fold(0.0, f64::max);
        // the four pixels around the principal point hold the maximum
        assert_eq!(img.get(n / 2, n / 2, 0), peak);
        assert_eq!(img.get(n / 2 - 1, n / 2 - 1, 0), peak);
        assert!(img.get(n / 2 + 4, n / 2, 0) < peak);
    }

    #[test]
    fn frontal_checker_matches_analytic_pattern() {
        let (a, b) = (0.9, 0.2);
        let scene = SyntheticScene {
            name: "board".into(),
            primitives: vec![Primitive {
                shape: Shape::GroundPlane { height: 0.0, half_extent: 100.0 },
                albedo: Texture::Checker { a, b, size: 1.0 },
                emissive: 0.0,
            }],
            background: 0.0,
            lighting: Lighting { direction: [0.0, 0.0, 1.0], ambient: 0.0, diffuse: 1.0 },
            supersample: 4,
            bounds: SceneBounds { min: [-2.0, -2.0, 0.0], max: [2.0, 2.0, 0.0] },
        };
        // 4 units above the plane, f=16: one pixel spans 0.25 world units,
        // so checker edges (every 1.0) fall on every 4th pixel edge.
        let pose = Pose::look_at(Point3::new(0.0, 0.0, 4.0), Point3::origin(), Vector3::y());
        let img = render_frame(&scene, &pose, &cam(16, 16.0)).unwrap();
        for py in 0..16 {
            for px in 0..16 {
                // image right = +x, image down = -y for this look-at
                let wx = (px as f64 + 0.5 - 8.0) * 0.25;
                let wy = -(py as f64 + 0.5 - 8.0) * 0.25;
                let cell = wx.floor() as i64 + wy.floor() as i64;
                let expected = if cell.rem_euclid(2) == 0 { a } else { b };
                assert!((img.get(px, py, 0) - expected).abs() < 1e-12, "pixel ({px},{py})");
            }
        }
    }

    #[test]
    fn degenerate_intrinsics_rejected() {
        let mut k = cam(16, 16.0);
        k.fx = 0.0;
        assert!(render_frame(&empty_scene(0.1), &Pose::identity(), &k).is_err());
        assert!(render_frame(&empty_scene(0.1), &Pose::identity(), &cam(4, 4.0)).is_err());
    }

    #[test]
    fn orbit_geometry() {
        let scene = checker_scene();
        let params = TrajectoryParams::default();
        let k = cam(32, 30.0);
        let t1 = make_trajectory(TrajectoryKind::Orbit, 40, 1.0, &scene.bounds, k, &params).unwrap();
        let t2 = make_trajectory(TrajectoryKind::Orbit, 40, 2.0, &scene.bounds, k, &params).unwrap();
        let c = scene.bounds.center().coords;
        for p in &t1.poses {
            assert!(((p.translation - c).norm() - params.distance).abs() < 1e-9);
            assert!((p.rotation.norm() - 1.0).abs() < 1e-9);
        }
        let swept = |t: &CameraTrajectory| {
            let a = t.poses[0].translation - c;
            let b = t.poses[39].translation - c;
            a.xy().angle(&b.xy())
        };
        assert!((swept(&t2) - 2.0 * swept(&t1)).abs() < 1e-9);
    }

    #[test]
    fn line_steps_are_constant() {
        let scene = checker_scene();
        let t = make_trajectory(TrajectoryKind::Line, 30, 3.0, &scene.bounds, cam(16, 16.0), &TrajectoryParams::default())
            .unwrap();
        let d0 = t.poses[1].translation - t.poses[0].translation;
        for w in t.poses.windows(2) {
            assert!((w[1].translation - w[0].translation - d0).norm() < 1e-12);
        }
    }

    #[test]
    fn trajectory_errors() {
        let b = checker_scene().bounds;
        let p = TrajectoryParams::default();
        assert!(make_trajectory(TrajectoryKind::Orbit, 10, 0.0, &b, cam(16, 16.0), &p).is_err());
        assert!(make_trajectory(TrajectoryKind::Orbit, 10, -1.0, &b, cam(16, 16.0), &p).is_err());
        assert!(make_trajectory(TrajectoryKind::Orbit, 1, 1.0, &b, cam(16, 16.0), &p).is_err());
    }

    #[test]
    fn holdout_count() {
        assert_eq!(holdout_indices(128, 16).len(), 8);
        assert_eq!(holdout_indices(128, 16)[0], 8);
    }
}
