//! Generates the checker-orbit dataset and trains on it, printing holdout
//! scores. Usage: `train_checker [iterations] [speed] [n_keyframes] [seed]`.

use std::time::Instant;

use spikesplat::camera::Intrinsics;
use spikesplat::scene_forge::{checker_scene, generate_dataset, make_trajectory, TrajectoryKind, TrajectoryParams};
use spikesplat::sensor_sim::SensorConfig;
use spikesplat::trainer::{train, TrainConfig, TrainOptions};

fn main() -> spikesplat::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let iterations = arg(1, 2000.0) as usize;
    let speed = arg(2, 1.0);
    let n_keyframes = arg(3, 9.0) as usize;
    let seed = arg(4, 0.0) as u64;

    let scene = checker_scene();
    let k = Intrinsics::centered(64, 64, 64.0);
    let traj = make_trajectory(TrajectoryKind::Orbit, 256, speed, &scene.bounds, k, &TrajectoryParams::default())?;
    let t = Instant::now();
    let bundle = generate_dataset(&scene, &traj, &SensorConfig::default(), 16)?;
    eprintln!("dataset in {:.1?}", t.elapsed());

    let cfg = TrainConfig { iterations, n_keyframes, seed, ..Default::default() };
    let t = Instant::now();
    let out = train(&bundle, &cfg, &TrainOptions { evaluate: true, log_every: 100, ..Default::default() })?;
    eprintln!("trained in {:.1?}", t.elapsed());
    let init = out.initial_eval.unwrap();
    let fin = out.final_eval.unwrap();
    println!(
        "init {:.2} dB  final {:.2} dB  ssim {:.3}  splats {}",
        init.mean_psnr,
        fin.mean_psnr,
        fin.mean_ssim,
        out.state.cloud.len()
    );
    Ok(())
}
