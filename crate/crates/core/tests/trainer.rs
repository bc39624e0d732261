use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use spikesplat::camera::{Intrinsics, Pose};
use spikesplat::gauss_model::{logit, GaussianCloud, Splat};
use spikesplat::image::Image;
use spikesplat::objective::LossWeights;
use spikesplat::recon::IntervalImage;
use spikesplat::scene_forge::{
    checker_scene, generate_dataset, make_trajectory, stationary_trajectory, DatasetBundle, TrajectoryKind,
    TrajectoryParams,
};
use spikesplat::sensor_sim::SensorConfig;
use spikesplat::trainer::{
    initial_cloud, iteration_rng, sample_window, scene_extent, train, train_step, TrainBatch, TrainConfig,
    TrainOptions, TrainState,
};

fn small_bundle(frames: usize) -> DatasetBundle {
    let scene = checker_scene();
    let k = Intrinsics::centered(32, 32, 32.0);
    let traj = make_trajectory(TrajectoryKind::Orbit, frames, 1.0, &scene.bounds, k, &TrajectoryParams::default())
        .unwrap();
    generate_dataset(&scene, &traj, &SensorConfig::default(), 16).unwrap()
}

fn small_config(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        window_length: 16,
        init_num_points: 150,
        max_splats: 300,
        densify_from: 4,
        densify_interval: 4,
        checkpoint_every: 5,
        ..Default::default()
    }
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let bundle = small_bundle(64);
    // λ_accu ramps from 0 at iteration 0; the interval loss is off
    let cfg = TrainConfig { use_interval_loss: false, ..small_config(10) };
    let mut state = TrainState::new(initial_cloud(&bundle, &cfg).unwrap());
    let before = state.clone();
    let batch = sample_window(&bundle.stream, &bundle.trajectory, &cfg, &mut iteration_rng(0, 0, 0)).unwrap();
    let rec = train_step(&mut state, &batch, &bundle.trajectory, &cfg, scene_extent(&bundle.bounds)).unwrap();
    assert_eq!(rec.total, 0.0);
    assert_eq!(state.cloud, before.cloud);
    assert_eq!(state.moments, before.moments);
}

#[test]
fn single_splat_loss_decreases() {
    let k = Intrinsics::centered(16, 16, 16.0);
    let traj = stationary_trajectory(Pose::identity(), 32, k);
    let cloud = GaussianCloud::from_splats([Splat {
        position: [0.1, -0.05, 3.0],
        rotation: [1.0, 0.0, 0.0, 0.0],
        log_scale: [0.4f64.ln(); 3],
        opacity_logit: logit(0.5),
        color_logit: [logit(0.2); 3],
    }]);
    let target = 0.6;
    let batch = TrainBatch {
        t0: 0,
        t1: 31,
        tfp: Image::filled(16, 16, 1, target),
        keyframes: vec![0, 15, 31],
        keyframe_poses: vec![Pose::identity(); 3],
        interval: IntervalImage {
            width: 16,
            height: 16,
            values: vec![target; 256],
            valid: vec![true; 256],
            mid_time: vec![15.5; 256],
            t_ref: 15,
        },
    };
    // constant schedule weights so the loss is comparable across steps
    let weights = LossWeights { accu_ramp_end: 0.0, in_decay_start: 1.0, in_decay_end: 1.0, lambda_in_min: 1.0 };
    let cfg = TrainConfig { iterations: 50, n_keyframes: 3, weights, ..Default::default() };
    let mut state = TrainState::new(cloud);
    let losses: Vec<f64> = (0..50)
        .map(|_| train_step(&mut state, &batch, &traj, &cfg, 1.0).unwrap().total)
        .collect();
    for w in losses.windows(2) {
        assert!(w[1] < w[0], "{losses:?}");
    }
}

#[test]
fn identical_seeds_give_identical_runs() {
    let bundle = small_bundle(64);
    let cfg = small_config(12);
    let a = train(&bundle, &cfg, &TrainOptions::default()).unwrap();
    let b = train(&bundle, &cfg, &TrainOptions::default()).unwrap();
    let la: Vec<f64> = a.log.iter().map(|r| r.total).collect();
    let lb: Vec<f64> = b.log.iter().map(|r| r.total).collect();
    assert_eq!(la, lb);
    assert_eq!(a.state, b.state);
    let c = train(&bundle, &TrainConfig { seed: 1, ..cfg }, &TrainOptions::default()).unwrap();
    assert_ne!(c.log.iter().map(|r| r.total).collect::<Vec<_>>(), la);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let bundle = small_bundle(64);
    let cfg = small_config(15);
    let dir = tempfile::tempdir().unwrap();
    let full = train(&bundle, &cfg, &TrainOptions::default()).unwrap();

    let first = TrainOptions { out_dir: Some(dir.path().to_path_buf()), stop_at: Some(10), ..Default::default() };
    train(&bundle, &cfg, &first).unwrap();
    let saved = TrainState::load(&dir.path().join("checkpoints/iter_000010")).unwrap();
    assert_eq!(saved.iteration, 10);
    let rest = TrainOptions { out_dir: Some(dir.path().to_path_buf()), resume: Some(saved), ..Default::default() };
    let resumed = train(&bundle, &cfg, &rest).unwrap();
    assert_eq!(resumed.state, full.state);
    assert_eq!(resumed.log, full.log[10..]);
    // metrics continue the first segment: header + 15 rows
    let csv = std::fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 16);
}

#[test]
fn zero_iterations_returns_initial_cloud() {
    let bundle = small_bundle(64);
    let cfg = small_config(0);
    let out = train(&bundle, &cfg, &TrainOptions::default()).unwrap();
    assert_eq!(out.state.cloud, initial_cloud(&bundle, &cfg).unwrap());
    assert!(out.log.is_empty());
}

#[test]
fn whole_stream_window_and_seeded_sampling() {
    let bundle = small_bundle(32);
    let cfg = TrainConfig { window_length: 32, n_keyframes: 3, ..Default::default() };
    let b = sample_window(&bundle.stream, &bundle.trajectory, &cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    assert_eq!((b.t0, b.t1), (0, 31));
    assert_eq!(b.keyframes, vec![0, 15, 31]);

    let cfg = TrainConfig { window_length: 8, ..cfg };
    let draw = |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..20)
            .map(|_| sample_window(&bundle.stream, &bundle.trajectory, &cfg, &mut rng).unwrap().t0)
            .collect::<Vec<_>>()
    };
    assert_eq!(draw(5), draw(5));
}

/// Distance from `p` to the nearest checker-scene surface.
fn checker_surface_distance(p: &Vector3<f64>) -> f64 {
    // ground plane z = 0, |x|, |y| <= 4
    let dx = (p.x.abs() - 4.0).max(0.0);
    let dy = (p.y.abs() - 4.0).max(0.0);
    let plane = (dx * dx + dy * dy + p.z * p.z).sqrt();
    let sphere = ((p - Vector3::new(0.0, 0.0, 0.6)).norm() - 0.6).abs();
    // box surface: outside distance, or depth to the nearest face inside
    let (lo, hi) = (Vector3::new(0.9, -1.6, 0.0), Vector3::new(1.6, -0.9, 0.7));
    let out = Vector3::from_fn(|i, _| (lo[i] - p[i]).max(p[i] - hi[i]).max(0.0));
    let inside = (0..3).map(|i| (p[i] - lo[i]).min(hi[i] - p[i])).fold(f64::INFINITY, f64::min);
    let aabox = if out.norm() > 0.0 { out.norm() } else { inside };
    plane.min(sphere).min(aabox)
}

#[test]
fn init_points_lie_near_checker_surfaces() {
    let scene = checker_scene();
    let k = Intrinsics::centered(64, 64, 64.0);
    let traj =
        make_trajectory(TrajectoryKind::Orbit, 256, 1.0, &scene.bounds, k, &TrajectoryParams::default()).unwrap();
    let bundle = generate_dataset(&scene, &traj, &SensorConfig::default(), 16).unwrap();
    let cfg = TrainConfig::default();
    let cloud = initial_cloud(&bundle, &cfg).unwrap();
    assert_eq!(cloud.len(), cfg.init_num_points);
    let tol = 0.1 * bundle.bounds.diameter();
    let near = cloud
        .positions
        .iter()
        .filter(|p| checker_surface_distance(&Vector3::from(**p)) <= tol)
        .count();
    assert!(near * 2 >= cloud.len(), "{near} of {} within {tol}", cloud.len());
}
