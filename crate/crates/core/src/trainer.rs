//! Optimization loop: point initialization from interval images, window
//! sampling, the scheduled two-loss update, adaptive density control and
//! checkpointing.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::CameraTrajectory;
use crate::error::{Error, Result};
use crate::gauss_model::{logit, quat_to_rotation, GaussianCloud, Precision, Splat, NEAR_PLANE};
use crate::image::{write_atomic, Image};
use crate::objective::{accumulation_loss, interval_loss, LossConfig, LossWeights};
use crate::optim::{adam_step, AdamParams, Moments};
use crate::quality::{evaluate, EvalReport};
use crate::rasterizer::{
    forward_accumulated, forward_interval, interval_pose, GradientBundle, RenderOptions, Renderer, MAX_KEYFRAMES,
};
use crate::recon::{interval_supervision_set, tfi, tfp, IntervalImage, DEFAULT_MAX_INTERVAL};
use crate::scene_forge::{DatasetBundle, SceneBounds};
use crate::spike_stream::SpikeStream;

pub const OPTIM_MAGIC: [u8; 4] = *b"GSOP";
pub const OPTIM_VERSION: u16 = 1;
pub const CLOUD_FILE: &str = "cloud.gsck";
pub const OPTIM_FILE: &str = "optim.bin";
pub const METRICS_FILE: &str = "metrics.csv";

/// Values per splat in each parameter group, in cloud order.
const GROUP_STRIDES: [usize; 5] = [3, 4, 3, 1, 3];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LearningRates {
    /// Initial position rate, multiplied by the scene extent. Decays
    /// log-linearly to `position_final` over the run.
    pub position: f64,
    pub position_final: f64,
    pub rotation: f64,
    pub log_scale: f64,
    pub opacity: f64,
    pub color: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-3,
            position_final: 1.6e-5,
            rotation: 1e-2,
            log_scale: 1e-2,
            opacity: 5e-2,
            color: 2e-2,
        }
    }
}

impl LearningRates {
    pub fn position_at(&self, iter: usize, iterations: usize, extent: f64) -> f64 {
        let f = if iterations <= 1 {
            0.0
        } else {
            (iter as f64 / (iterations - 1) as f64).clamp(0.0, 1.0)
        };
        extent * (self.position.ln() * (1.0 - f) + self.position_final.ln() * f).exp()
    }

    fn per_group(&self, iter: usize, iterations: usize, extent: f64) -> [f64; 5] {
        [
            self.position_at(iter, iterations, extent),
            self.rotation,
            self.log_scale,
            self.opacity,
            self.color,
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Keyframes averaged per accumulation render, `1..=9`.
    pub n_keyframes: usize,
    /// Frames per supervision window.
    pub window_length: usize,
    pub init_num_points: usize,
    /// Interval images used by the initializer.
    pub init_interval_images: usize,
    /// Depth hypotheses tried per back-projected pixel.
    pub init_depth_candidates: usize,
    /// Relative tolerance of the initializer's consistency check.
    pub init_tolerance: f64,
    pub max_interval: usize,
    pub max_splats: usize,
    pub lr: LearningRates,
    pub adam: AdamParams,
    pub densify_interval: usize,
    pub densify_from: usize,
    /// Densification stops after this fraction of the run.
    pub densify_until: f64,
    /// Threshold on the mean screen-space mean gradient norm (pixels).
    pub densify_grad_threshold: f64,
    /// Splats larger than this fraction of the scene extent are split rather
    /// than cloned.
    pub percent_dense: f64,
    pub opacity_prune_threshold: f64,
    pub loss: LossConfig,
    pub weights: LossWeights,
    pub use_accumulation_loss: bool,
    pub use_interval_loss: bool,
    /// Zero interval-loss gradients to colors once λ_in drops below 0.5.
    pub interval_color_gate: bool,
    pub early_stop_transmittance: f64,
    /// 0 disables intermediate checkpoints.
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 7000,
            n_keyframes: 9,
            window_length: 32,
            init_num_points: 1000,
            init_interval_images: 8,
            init_depth_candidates: 8,
            init_tolerance: 0.2,
            max_interval: DEFAULT_MAX_INTERVAL,
            max_splats: 2000,
            lr: LearningRates::default(),
            adam: AdamParams::default(),
            densify_interval: 100,
            densify_from: 100,
            densify_until: 0.5,
            densify_grad_threshold: 2e-5,
            percent_dense: 0.01,
            opacity_prune_threshold: 0.005,
            loss: LossConfig::default(),
            weights: LossWeights::default(),
            use_accumulation_loss: true,
            use_interval_loss: true,
            interval_color_gate: true,
            early_stop_transmittance: 1e-4,
            checkpoint_every: 500,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=MAX_KEYFRAMES).contains(&self.n_keyframes) {
            return Err(Error::config("n_keyframes", format!("must lie in 1..={MAX_KEYFRAMES}")));
        }
        if self.window_length < self.n_keyframes {
            return Err(Error::config("window_length", "must be >= n_keyframes"));
        }
        if self.init_num_points == 0 {
            return Err(Error::config("init_num_points", "must be >= 1"));
        }
        if self.init_interval_images < 2 {
            return Err(Error::config("init_interval_images", "must be >= 2"));
        }
        if self.init_depth_candidates == 0 {
            return Err(Error::config("init_depth_candidates", "must be >= 1"));
        }
        if !(self.init_tolerance > 0.0) {
            return Err(Error::config("init_tolerance", "must be > 0"));
        }
        if self.max_interval == 0 {
            return Err(Error::config("max_interval", "must be >= 1"));
        }
        if self.max_splats == 0 {
            return Err(Error::config("max_splats", "must be >= 1"));
        }
        let lr = &self.lr;
        for (name, v) in [
            ("lr.position", lr.position),
            ("lr.position_final", lr.position_final),
            ("lr.rotation", lr.rotation),
            ("lr.log_scale", lr.log_scale),
            ("lr.opacity", lr.opacity),
            ("lr.color", lr.color),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, "must be finite and >= 0"));
            }
        }
        if !(lr.position > 0.0 && lr.position_final > 0.0) {
            return Err(Error::config("lr.position", "position rates must be > 0 (log-linear decay)"));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return Err(Error::config("adam", "need 0 <= beta < 1 and eps > 0"));
        }
        if self.densify_interval == 0 {
            return Err(Error::config("densify_interval", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.densify_until) {
            return Err(Error::config("densify_until", "must lie in [0, 1]"));
        }
        if !(self.densify_grad_threshold >= 0.0) {
            return Err(Error::config("densify_grad_threshold", "must be >= 0"));
        }
        if !(self.percent_dense > 0.0) {
            return Err(Error::config("percent_dense", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.opacity_prune_threshold) {
            return Err(Error::config("opacity_prune_threshold", "must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.loss.lambda1) {
            return Err(Error::config("loss.lambda1", "must lie in [0, 1]"));
        }
        if !(0.0..1.0).contains(&self.early_stop_transmittance) {
            return Err(Error::config("early_stop_transmittance", "must lie in [0, 1)"));
        }
        self.weights.validate()
    }

    /// Stable 64-bit FNV-1a hash of the JSON form, as 16 hex digits.
    pub fn fingerprint(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }

    fn renderer(&self) -> Renderer {
        Renderer::new(RenderOptions {
            early_stop_transmittance: self.early_stop_transmittance,
            ..RenderOptions::default()
        })
    }
}

/// Half the bounding-box diagonal; the length unit for position rates and
/// the clone/split decision.
pub fn scene_extent(bounds: &SceneBounds) -> f64 {
    0.5 * bounds.diameter()
}

/// Per-iteration generator. Training randomness is a pure function of
/// `(seed, iteration, purpose)`, so a resumed run replays exactly.
pub fn iteration_rng(seed: u64, iter: usize, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((iter as u64) << 4) | purpose);
    rng
}

// --- initialization ---------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitParams {
    pub num_points: usize,
    pub depth_candidates: usize,
    /// Relative tolerance between interval values of the same point seen in
    /// two images.
    pub tolerance: f64,
    /// Fraction of the views seeing a candidate that must agree with it.
    pub min_agreement: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        Self {
            num_points: 1000,
            depth_candidates: 8,
            tolerance: 0.2,
            min_agreement: 0.5,
        }
    }
}

/// Back-projects valid interval pixels to depths sampled inside `bounds` and
/// keeps the hypotheses whose reprojections agree with the other interval
/// images. Colors come from the interval value, opacity starts at 0.1 and
/// scales are isotropic at the mean distance to the three nearest points.
pub fn init_points(
    intervals: &[IntervalImage],
    trajectory: &CameraTrajectory,
    bounds: &SceneBounds,
    params: &InitParams,
    seed: u64,
) -> Result<GaussianCloud> {
    if params.num_points == 0 {
        return Err(Error::config("num_points", "must be >= 1"));
    }
    if params.depth_candidates == 0 {
        return Err(Error::config("depth_candidates", "must be >= 1"));
    }
    let k = trajectory.intrinsics;
    let views: Vec<(&IntervalImage, crate::camera::Pose)> = intervals
        .iter()
        .filter(|iv| iv.valid_count() > 0)
        .map(|iv| Ok((iv, interval_pose(iv, trajectory)?)))
        .collect::<Result<_>>()?;
    if views.len() < 2 {
        return Err(Error::Input(format!(
            "initialization needs at least 2 interval images with valid pixels, got {}",
            views.len()
        )));
    }
    for (iv, _) in &views {
        if iv.width != k.width || iv.height != k.height {
            return Err(Error::Shape(format!(
                "interval image {}x{} vs camera {}x{}",
                iv.width, iv.height, k.width, k.height
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<(usize, usize)> = views
        .iter()
        .enumerate()
        .flat_map(|(vi, (iv, _))| iv.valid.iter().enumerate().filter(|(_, &v)| v).map(move |(p, _)| (vi, p)))
        .collect();
    order.shuffle(&mut rng);

    let agreement = |x: &Vector3<f64>, skip: usize, value: f64| -> Option<f64> {
        let (mut seen, mut agree) = (0usize, 0usize);
        for (j, (iv, pose)) in views.iter().enumerate() {
            if j == skip {
                continue;
            }
            let pc = pose.world_to_camera(x);
            if pc.z <= NEAR_PLANE {
                continue;
            }
            let (u, v) = k.project(&pc);
            if !(u >= 0.0 && v >= 0.0 && u < k.width as f64 && v < k.height as f64) {
                continue;
            }
            seen += 1;
            let p = v as usize * k.width + u as usize;
            if iv.valid[p] && (iv.values[p] - value).abs() <= params.tolerance * value {
                agree += 1;
            }
        }
        (seen > 0).then(|| agree as f64 / seen as f64)
    };

    let mut points: Vec<([f64; 3], f64)> = Vec::with_capacity(params.num_points);
    for (vi, p) in order {
        if points.len() == params.num_points {
            break;
        }
        let (iv, pose) = &views[vi];
        let (px, py) = (p % k.width, p / k.width);
        let origin = pose.translation;
        let dir = pose.camera_to_world_dir(&k.ray_dir(px as f64 + 0.5, py as f64 + 0.5));
        let Some((t_lo, t_hi)) = bounds.ray_range(&origin, &dir) else {
            continue;
        };
        let t_lo = t_lo.max(0.0);
        if t_hi <= t_lo {
            continue;
        }
        let value = iv.values[p];
        let mut best: Option<(f64, Vector3<f64>)> = None;
        for _ in 0..params.depth_candidates {
            let t = t_lo + rng.random::<f64>() * (t_hi - t_lo);
            let x = origin + dir * t;
            if let Some(score) = agreement(&x, vi, value) {
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, x));
                }
            }
        }
        if let Some((score, x)) = best {
            if score >= params.min_agreement {
                points.push(([x.x, x.y, x.z], value));
            }
        }
    }
    if points.is_empty() {
        return Err(Error::Input("no back-projected point passed the consistency check".into()));
    }

    let positions: Vec<Vector3<f64>> = points.iter().map(|(p, _)| Vector3::from(*p)).collect();
    let fallback = 0.01 * bounds.diameter();
    let nn: Vec<f64> = positions
        .par_iter()
        .enumerate()
        .map(|(i, a)| {
            let mut best = [f64::INFINITY; 3];
            for (j, b) in positions.iter().enumerate() {
                if i == j {
                    continue;
                }
                let d = (a - b).norm_squared();
                if d < best[2] {
                    best[2] = d;
                    best.sort_by(f64::total_cmp);
                }
            }
            let found: Vec<f64> = best.iter().filter(|d| d.is_finite()).map(|d| d.sqrt()).collect();
            if found.is_empty() {
                fallback
            } else {
                found.iter().sum::<f64>() / found.len() as f64
            }
        })
        .collect();
    let lo = 1e-4 * bounds.diameter();
    Ok(GaussianCloud::from_splats(points.iter().zip(&nn).map(|(&(position, value), &d)| {
        let c = logit(value.clamp(0.01, 0.99));
        let s = d.max(lo).min(fallback * 10.0).ln();
        Splat {
            position,
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [s; 3],
            opacity_logit: logit(0.1),
            color_logit: [c; 3],
        }
    })))
}

/// The initializer as the trainer runs it: interval images at stratified
/// times, then [`init_points`].
pub fn initial_cloud(bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<GaussianCloud> {
    let intervals =
        interval_supervision_set(&bundle.stream, cfg.init_interval_images, cfg.seed, cfg.max_interval)?;
    let params = InitParams {
        num_points: cfg.init_num_points,
        depth_candidates: cfg.init_depth_candidates,
        tolerance: cfg.init_tolerance,
        ..InitParams::default()
    };
    init_points(&intervals, &bundle.trajectory, &bundle.bounds, &params, cfg.seed)
}

// --- sampling ---------------------------------------------------------------

/// Frame indices of `n` keyframes spread uniformly over `[t0, t1]`, ends
/// included, rounded half down.
pub fn keyframe_indices(t0: usize, t1: usize, n: usize) -> Result<Vec<usize>> {
    if t1 < t0 {
        return Err(Error::BadWindow { start: t0, end: t1, len: t1 + 1 });
    }
    let len = t1 - t0 + 1;
    if n == 0 || n > len {
        return Err(Error::config("n_keyframes", format!("{n} keyframes do not fit a {len}-frame window")));
    }
    if n == 1 {
        return Ok(vec![t0 + (len - 1) / 2]);
    }
    let b = (n - 1) as i64;
    Ok((0..n as i64)
        .map(|k| {
            // ceil(k·(len−1)/(n−1) − 1/2)
            let p = 2 * k * (len as i64 - 1) - b;
            let q = 2 * b;
            let r = p.div_euclid(q) + i64::from(p.rem_euclid(q) != 0);
            t0 + r as usize
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct TrainBatch {
    pub t0: usize,
    pub t1: usize,
    /// Accumulation target over `[t0, t1]`.
    pub tfp: Image,
    pub keyframes: Vec<usize>,
    pub keyframe_poses: Vec<crate::camera::Pose>,
    /// Interval target referenced at the window center.
    pub interval: IntervalImage,
}

pub fn sample_window(
    stream: &SpikeStream,
    trajectory: &CameraTrajectory,
    cfg: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainBatch> {
    let n = stream.num_frames();
    if trajectory.len() != n {
        return Err(Error::Shape(format!("{} poses for {n} frames", trajectory.len())));
    }
    let len = cfg.window_length;
    if len == 0 || len > n {
        return Err(Error::config(
            "window_length",
            format!("window of {len} frames does not fit a {n}-frame stream"),
        ));
    }
    let t0 = rng.random_range(0..=n - len);
    let t1 = t0 + len - 1;
    let keyframes = keyframe_indices(t0, t1, cfg.n_keyframes)?;
    Ok(TrainBatch {
        t0,
        t1,
        tfp: tfp(stream, t0, t1)?,
        keyframe_poses: keyframes.iter().map(|&t| trajectory.poses[t]).collect(),
        keyframes,
        interval: tfi(stream, t0 + (len - 1) / 2, cfg.max_interval)?,
    })
}

// --- state ------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub cloud: GaussianCloud,
    /// Adam moments for positions, rotations, log-scales, opacities, colors.
    pub moments: [Moments; 5],
    /// Completed iterations. Together with the seed this fixes every random
    /// draw still to come.
    pub iteration: usize,
    /// Summed screen-space gradient norms since the last densification.
    pub grad_accum: Vec<f64>,
    pub grad_count: Vec<u64>,
}

impl TrainState {
    pub fn new(cloud: GaussianCloud) -> Self {
        let n = cloud.len();
        Self {
            moments: GROUP_STRIDES.map(|s| Moments::zeros(n * s)),
            cloud,
            iteration: 0,
            grad_accum: vec![0.0; n],
            grad_count: vec![0; n],
        }
    }

    fn reset_stats(&mut self) {
        let n = self.cloud.len();
        self.grad_accum = vec![0.0; n];
        self.grad_count = vec![0; n];
    }

    /// Optimizer blob: magic, version, reserved, iteration and splat count as
    /// u64, then per group `m` and `v`, then the gradient statistics. All
    /// little-endian.
    pub fn encode_optimizer(&self) -> Vec<u8> {
        let n = self.cloud.len();
        let mut out = Vec::with_capacity(24 + n * 8 * (2 * 14 + 2));
        out.extend_from_slice(&OPTIM_MAGIC);
        out.extend_from_slice(&OPTIM_VERSION.to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        out.extend_from_slice(&(self.iteration as u64).to_le_bytes());
        out.extend_from_slice(&(n as u64).to_le_bytes());
        for m in &self.moments {
            for v in m.m.iter().chain(&m.v) {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in &self.grad_accum {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for c in &self.grad_count {
            out.extend_from_slice(&c.to_le_bytes());
        }
        out
    }

    pub fn decode_optimizer(bytes: &[u8], cloud: GaussianCloud) -> Result<Self> {
        if bytes.len() < 24 {
            return Err(Error::Truncated { what: "optimizer header", needed: 24, available: bytes.len() });
        }
        if bytes[..4] != OPTIM_MAGIC {
            return Err(Error::BadMagic { expected: OPTIM_MAGIC, found: bytes[..4].try_into().unwrap() });
        }
        let version = u16::from_le_bytes([bytes[4], bytes[5]]);
        if version != OPTIM_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let iteration = u64_at(8) as usize;
        let n = u64_at(16) as usize;
        if n != cloud.len() {
            return Err(Error::Malformed(format!("optimizer state for {n} splats, cloud has {}", cloud.len())));
        }
        let per_splat: usize = GROUP_STRIDES.iter().sum::<usize>() * 2 + 2;
        let needed = 24 + n * per_splat * 8;
        if bytes.len() != needed {
            return Err(if bytes.len() < needed {
                Error::Truncated { what: "optimizer payload", needed, available: bytes.len() }
            } else {
                Error::Malformed(format!("{} trailing bytes after optimizer state", bytes.len() - needed))
            });
        }
        let mut off = 24;
        let mut take_f64 = |count: usize| -> Vec<f64> {
            let v = bytes[off..off + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            off += count * 8;
            v
        };
        let moments = GROUP_STRIDES.map(|s| {
            let m = take_f64(n * s);
            let v = take_f64(n * s);
            Moments { m, v }
        });
        let grad_accum = take_f64(n);
        let grad_count = bytes[off..off + n * 8]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(Self { cloud, moments, iteration, grad_accum, grad_count })
    }

    /// Writes `cloud.gsck` (f64) and `optim.bin` into `dir`, each atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_atomic(&dir.join(CLOUD_FILE), &self.cloud.encode(Precision::F64))?;
        write_atomic(&dir.join(OPTIM_FILE), &self.encode_optimizer())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let cloud = GaussianCloud::load(&dir.join(CLOUD_FILE))?;
        let path = dir.join(OPTIM_FILE);
        let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::decode_optimizer(&bytes, cloud)
    }
}

// --- one step ---------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub iter: usize,
    pub l_accu: Option<f64>,
    pub l_in: Option<f64>,
    pub lambda_accu: f64,
    pub lambda_in: f64,
    pub total: f64,
    pub num_splats: usize,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "iter,l_accu,l_in,lambda_accu,lambda_in,total,num_splats";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.9e}")).unwrap_or_default();
        format!(
            "{},{},{},{},{},{:.9e},{}",
            self.iter,
            opt(self.l_accu),
            opt(self.l_in),
            self.lambda_accu,
            self.lambda_in,
            self.total,
            self.num_splats
        )
    }
}

fn apply_adam<const N: usize>(
    params: &mut [[f64; N]],
    grads: &[[f64; N]],
    m: &mut Moments,
    lr: f64,
    step: u64,
    hp: &AdamParams,
) {
    adam_step(params.as_flattened_mut(), grads.as_flattened(), m, lr, step, hp);
}

/// Scheduled weights for iteration `iter` after applying the ablation flags.
pub fn effective_weights(cfg: &TrainConfig, iter: usize) -> (f64, f64) {
    let la = if cfg.use_accumulation_loss { cfg.weights.lambda_accu(iter, cfg.iterations) } else { 0.0 };
    let li = if cfg.use_interval_loss { cfg.weights.lambda_in(iter, cfg.iterations) } else { 0.0 };
    (la, li)
}

/// One optimization step on `batch`. When neither loss carries weight the
/// parameters and optimizer state are left untouched.
pub fn train_step(
    state: &mut TrainState,
    batch: &TrainBatch,
    trajectory: &CameraTrajectory,
    cfg: &TrainConfig,
    extent: f64,
) -> Result<StepRecord> {
    let iter = state.iteration;
    let (la, li) = effective_weights(cfg, iter);
    let renderer = cfg.renderer();
    let k = &trajectory.intrinsics;
    let n = state.cloud.len();
    let mut grad = GradientBundle::zeros(n);
    let mut l_accu = None;
    let mut l_in = None;

    if la > 0.0 {
        let fwd = forward_accumulated(&renderer, &state.cloud, &batch.keyframe_poses, k)?;
        let loss = accumulation_loss(&fwd.rendered.image, &batch.tfp, &cfg.loss)?;
        let g = renderer.backward(&state.cloud, &fwd, &loss.grad)?;
        grad.add_scaled(&g, la);
        l_accu = Some(loss.value);
    }
    if li > 0.0 && batch.interval.valid_count() > 0 {
        let fwd = forward_interval(&renderer, &state.cloud, &batch.interval, trajectory)?;
        let loss = interval_loss(&fwd.rendered.image, &batch.interval, &cfg.loss)?;
        let mut g = renderer.backward(&state.cloud, &fwd, &loss.grad)?;
        if cfg.interval_color_gate && cfg.weights.lambda_in(iter, cfg.iterations) < 0.5 {
            g.color_logits.iter_mut().for_each(|c| *c = [0.0; 3]);
        }
        grad.add_scaled(&g, li);
        l_in = Some(loss.value);
    }
    let total = la * l_accu.unwrap_or(0.0) + li * l_in.unwrap_or(0.0);
    if !total.is_finite() || !grad.all_finite() {
        return Err(Error::NonFinite(format!(
            "iteration {iter}: window [{}, {}], L_accu={l_accu:?}, L_in={l_in:?}, total={total}, {n} splats, gradients finite: {}",
            batch.t0,
            batch.t1,
            grad.all_finite()
        )));
    }

    if l_accu.is_some() || l_in.is_some() {
        let lrs = cfg.lr.per_group(iter, cfg.iterations, extent);
        let step = iter as u64 + 1;
        let hp = &cfg.adam;
        let [m_pos, m_rot, m_scale, m_op, m_col] = &mut state.moments;
        let c = &mut state.cloud;
        apply_adam(&mut c.positions, &grad.positions, m_pos, lrs[0], step, hp);
        apply_adam(&mut c.rotations, &grad.rotations, m_rot, lrs[1], step, hp);
        apply_adam(&mut c.log_scales, &grad.log_scales, m_scale, lrs[2], step, hp);
        adam_step(&mut c.opacity_logits, &grad.opacity_logits, m_op, lrs[3], step, hp);
        apply_adam(&mut c.color_logits, &grad.color_logits, m_col, lrs[4], step, hp);
        c.renormalize_rotations();
        if !c.all_finite() {
            return Err(Error::NonFinite(format!("iteration {iter}: parameters became non-finite after update")));
        }
        for (i, &g) in grad.mean2d_norms.iter().enumerate() {
            if g > 0.0 {
                state.grad_accum[i] += g;
                state.grad_count[i] += 1;
            }
        }
    }
    state.iteration += 1;
    Ok(StepRecord {
        iter,
        l_accu,
        l_in,
        lambda_accu: la,
        lambda_in: li,
        total,
        num_splats: n,
    })
}

// --- density control --------------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct DensifyReport {
    pub cloned: usize,
    pub split: usize,
    pub pruned: usize,
}

/// Clones small and splits large splats whose mean screen-space gradient
/// exceeds the threshold (largest gradients first, within `max_splats`),
/// prunes nearly transparent ones and resets the gradient statistics. A split
/// replaces one splat by two samples from it, scaled down by 1.6.
pub fn densify_and_prune(state: &mut TrainState, cfg: &TrainConfig, extent: f64, rng: &mut impl Rng) -> DensifyReport {
    let n = state.cloud.len();
    let mut candidates: Vec<(usize, f64)> = (0..n)
        .filter(|&i| state.grad_count[i] > 0)
        .map(|i| (i, state.grad_accum[i] / state.grad_count[i] as f64))
        .filter(|&(_, g)| g > cfg.densify_grad_threshold)
        .collect();
    candidates.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let mut room = cfg.max_splats.saturating_sub(n);
    let mut split_away = vec![false; n];
    let mut report = DensifyReport::default();
    let shrink = 1.6f64.ln();
    for (i, _) in candidates {
        if room == 0 {
            break;
        }
        let s = state.cloud.splat(i);
        let max_scale = s.log_scale.iter().copied().fold(f64::NEG_INFINITY, f64::max).exp();
        if max_scale <= cfg.percent_dense * extent {
            state.cloud.push(s);
            report.cloned += 1;
        } else {
            let rot = quat_to_rotation(&s.rotation);
            let scale = s.log_scale.map(f64::exp);
            for _ in 0..2 {
                let z = Vector3::new(
                    scale[0] * rng.sample::<f64, _>(StandardNormal),
                    scale[1] * rng.sample::<f64, _>(StandardNormal),
                    scale[2] * rng.sample::<f64, _>(StandardNormal),
                );
                let p = Vector3::from(s.position) + rot * z;
                state.cloud.push(Splat {
                    position: [p.x, p.y, p.z],
                    log_scale: s.log_scale.map(|l| l - shrink),
                    ..s
                });
            }
            split_away[i] = true;
            report.split += 1;
        }
        room -= 1;
    }

    let total = state.cloud.len();
    for (m, s) in state.moments.iter_mut().zip(GROUP_STRIDES) {
        m.extend_zeros((total - n) * s);
    }
    let mut keep: Vec<bool> = (0..total).map(|i| i >= n || !split_away[i]).collect();
    for (i, k) in keep.iter_mut().enumerate() {
        if *k && state.cloud.opacity(i) < cfg.opacity_prune_threshold {
            *k = false;
            report.pruned += 1;
        }
    }
    if keep.iter().any(|k| !k) {
        state.cloud.retain_mask(&keep);
        for (m, s) in state.moments.iter_mut().zip(GROUP_STRIDES) {
            m.retain(&keep, s);
        }
    }
    state.reset_stats();
    report
}

// --- loop -------------------------------------------------------------------

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Checkpoints, metrics and the final state go here when set.
    pub out_dir: Option<PathBuf>,
    /// Continue from this state instead of initializing.
    pub resume: Option<TrainState>,
    /// Stop once this many iterations are complete (clamped to the config).
    pub stop_at: Option<usize>,
    /// Score holdout views at start, at checkpoints and at the end.
    pub evaluate: bool,
    /// Print a progress line to stderr every this many iterations; 0 = quiet.
    pub log_every: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<StepRecord>,
    pub initial_eval: Option<EvalReport>,
    /// `(iteration, report)` at each intermediate checkpoint.
    pub checkpoint_evals: Vec<(usize, EvalReport)>,
    pub final_eval: Option<EvalReport>,
}

fn open_metrics(dir: &Path, append: bool) -> Result<BufWriter<File>> {
    let path = dir.join(METRICS_FILE);
    let exists = path.exists();
    let file = if append && exists {
        OpenOptions::new().append(true).open(&path)
    } else {
        File::create(&path)
    }
    .map_err(|e| Error::io(&path, e))?;
    let mut w = BufWriter::new(file);
    if !(append && exists) {
        writeln!(w, "{}", StepRecord::CSV_HEADER).map_err(|e| Error::io(&path, e))?;
    }
    Ok(w)
}

pub fn train(bundle: &DatasetBundle, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    if bundle.trajectory.len() != bundle.stream.num_frames() {
        return Err(Error::Shape(format!(
            "{} poses for {} frames",
            bundle.trajectory.len(),
            bundle.stream.num_frames()
        )));
    }
    let extent = scene_extent(&bundle.bounds);
    let fingerprint = cfg.fingerprint();
    let resumed = opts.resume.is_some();
    let mut state = match &opts.resume {
        Some(s) => s.clone(),
        None => TrainState::new(initial_cloud(bundle, cfg)?),
    };
    let eval = |cloud: &GaussianCloud| -> Result<Option<EvalReport>> {
        if !opts.evaluate || bundle.holdout.is_empty() {
            return Ok(None);
        }
        evaluate(cloud, &bundle.holdout, &bundle.trajectory, &bundle.scene_name, &fingerprint).map(Some)
    };
    let initial_eval = if state.iteration == 0 { eval(&state.cloud)? } else { None };

    let metrics_path = opts.out_dir.as_ref().map(|d| d.join(METRICS_FILE));
    let mut metrics = match &opts.out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            Some(open_metrics(dir, resumed)?)
        }
        None => None,
    };

    let end = opts.stop_at.map_or(cfg.iterations, |s| s.min(cfg.iterations));
    let densify_until = (cfg.densify_until * cfg.iterations as f64).floor() as usize;
    let mut log = Vec::with_capacity(end.saturating_sub(state.iteration));
    let mut checkpoint_evals = Vec::new();
    while state.iteration < end {
        let iter = state.iteration;
        let mut rng = iteration_rng(cfg.seed, iter, 0);
        let batch = sample_window(&bundle.stream, &bundle.trajectory, cfg, &mut rng)?;
        let rec = match train_step(&mut state, &batch, &bundle.trajectory, cfg, extent) {
            Ok(r) => r,
            Err(e @ Error::NonFinite(_)) => {
                if let Some(dir) = &opts.out_dir {
                    let _ = state.save(&dir.join("nonfinite_dump"));
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if let (Some(w), Some(p)) = (metrics.as_mut(), &metrics_path) {
            writeln!(w, "{}", rec.csv_row()).map_err(|e| Error::io(p, e))?;
        }
        if opts.log_every > 0 && iter % opts.log_every == 0 {
            let term = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
            eprintln!(
                "iter {iter:>6}  total {:.5}  L_accu {}  L_in {}  splats {}",
                rec.total,
                term(rec.l_accu),
                term(rec.l_in),
                rec.num_splats
            );
        }
        log.push(rec);

        let done = state.iteration;
        if done % cfg.densify_interval == 0 && done >= cfg.densify_from && done <= densify_until {
            let mut rng = iteration_rng(cfg.seed, iter, 1);
            densify_and_prune(&mut state, cfg, extent, &mut rng);
        }
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < cfg.iterations {
            if let Some(dir) = &opts.out_dir {
                state.save(&dir.join("checkpoints").join(format!("iter_{done:06}")))?;
                if let (Some(w), Some(p)) = (metrics.as_mut(), &metrics_path) {
                    w.flush().map_err(|e| Error::io(p, e))?;
                }
            }
            if let Some(r) = eval(&state.cloud)? {
                checkpoint_evals.push((done, r));
            }
        }
    }

    if let (Some(w), Some(p)) = (metrics.as_mut(), &metrics_path) {
        w.flush().map_err(|e| Error::io(p, e))?;
    }
    let final_eval = eval(&state.cloud)?;
    if let Some(dir) = &opts.out_dir {
        state.save(dir)?;
        if let Some(r) = &final_eval {
            write_atomic(&dir.join("eval.json"), serde_json::to_string_pretty(r)?.as_bytes())?;
        }
    }
    Ok(TrainOutcome { state, log, initial_eval, checkpoint_evals, final_eval })
}
