//! `spikesplat`: simulate spike datasets, reconstruct TFP/TFI images, train
//! and render Gaussian clouds, and score them on holdout views.
//!
//! Exit codes: 0 success, 1 usage, 2 I/O or parse failure, 3 numerical
//! failure, 4 evaluation below the `--min-psnr` gate.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use spikesplat::camera::Intrinsics;
use spikesplat::gauss_model::GaussianCloud;
use spikesplat::image::{write_atomic, Image};
use spikesplat::quality::evaluate;
use spikesplat::rasterizer::{render, render_accumulated};
use spikesplat::recon::{tfi, tfp, DEFAULT_MAX_INTERVAL};
use spikesplat::scene_forge::{
    generate_dataset, make_trajectory, preset_scene, DatasetBundle, SyntheticScene, TrajectoryKind, TrajectoryParams,
};
use spikesplat::sensor_sim::SensorConfig;
use spikesplat::spike_stream::SpikeStream;
use spikesplat::trainer::{keyframe_indices, train, TrainConfig, TrainOptions, TrainState, CLOUD_FILE};
use spikesplat::Error;

const MANIFEST_FILE: &str = "manifest.json";
const CONFIG_FILE: &str = "config.json";

#[derive(Parser, Debug)]
#[command(name = "spikesplat", version, about = "Spike-camera supervised Gaussian splatting")]
struct Cli {
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic scene along a trajectory and simulate the spike camera.
    Simulate(SimulateArgs),
    /// Reconstruct a TFP or TFI image from a spike stream.
    Reconstruct(ReconstructArgs),
    /// Train a Gaussian cloud on a dataset bundle.
    Train(TrainArgs),
    /// Render a checkpoint at a trajectory pose.
    Render(RenderArgs),
    /// Score a checkpoint on the bundle's holdout views.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// JSON simulation config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset scene name (checker, flat, empty).
    #[arg(long)]
    scene: Option<String>,
    /// JSON scene description, used instead of a preset.
    #[arg(long, conflicts_with = "scene")]
    scene_file: Option<PathBuf>,
    /// Trajectory kind (orbit, line).
    #[arg(long)]
    traj: Option<String>,
    /// Camera speed multiplier.
    #[arg(long)]
    speed: Option<f64>,
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Focal length in pixels.
    #[arg(long)]
    focal: Option<f64>,
    /// Spike threshold.
    #[arg(long)]
    threshold: Option<f64>,
    /// Enable dark current and threshold jitter.
    #[arg(long)]
    noise: bool,
    #[arg(long)]
    dark_current: Option<f64>,
    #[arg(long)]
    jitter: Option<f64>,
    /// Every n-th frame is kept as a clean holdout view.
    #[arg(long)]
    holdout_stride: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct SimulateConfig {
    scene: String,
    scene_file: Option<PathBuf>,
    traj: String,
    speed: f64,
    frames: usize,
    width: usize,
    height: usize,
    focal: f64,
    holdout_stride: usize,
    trajectory: TrajectoryParams,
    sensor: SensorConfig,
}

impl Default for SimulateConfig {
    fn default() -> Self {
        Self {
            scene: "checker".into(),
            scene_file: None,
            traj: "orbit".into(),
            speed: 1.0,
            frames: 256,
            width: 64,
            height: 64,
            focal: 64.0,
            holdout_stride: 16,
            trajectory: TrajectoryParams::default(),
            sensor: SensorConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum ReconMode {
    Tfp,
    Tfi,
}

#[derive(Args, Debug)]
struct ReconstructArgs {
    /// Input `.spks` stream.
    #[arg(long)]
    stream: PathBuf,
    #[arg(long, value_enum)]
    mode: ReconMode,
    /// TFP window as `a..b` (inclusive); default is the whole stream.
    #[arg(long)]
    window: Option<String>,
    /// TFI reference frame; default is the middle frame.
    #[arg(long)]
    t: Option<usize>,
    #[arg(long, default_value_t = DEFAULT_MAX_INTERVAL)]
    max_interval: usize,
    /// Output 8-bit image (`.png`, `.pgm`); an `.f32` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Dataset bundle directory written by `simulate`.
    #[arg(long)]
    data: PathBuf,
    /// JSON training config; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    n_keyframes: Option<usize>,
    #[arg(long)]
    window_length: Option<usize>,
    #[arg(long)]
    max_splats: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Drop the accumulation (TFP) loss.
    #[arg(long)]
    no_accumulation_loss: bool,
    /// Drop the interval (TFI) loss.
    #[arg(long)]
    no_interval_loss: bool,
    /// Continue from the state saved in this directory.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Skip holdout evaluation.
    #[arg(long)]
    no_eval: bool,
    /// Progress line every n iterations; 0 = quiet.
    #[arg(long, default_value_t = 100)]
    log_every: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct RenderArgs {
    /// Checkpoint file, or a directory containing `cloud.gsck`.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset bundle providing poses and intrinsics.
    #[arg(long)]
    data: PathBuf,
    /// Trajectory time in frames (may be fractional).
    #[arg(long, conflicts_with = "accumulate")]
    t: Option<f64>,
    /// Average this many keyframe renders over `--window`.
    #[arg(long, requires = "window")]
    accumulate: Option<usize>,
    /// Frame window `a..b` (inclusive) for `--accumulate`.
    #[arg(long)]
    window: Option<String>,
    /// Output 8-bit image; an `.f32` sidecar is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Checkpoint file, or a directory containing `cloud.gsck`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Writes `eval.json` and `eval.txt` here.
    #[arg(long)]
    out: PathBuf,
    /// Exit with code 4 when the mean holdout PSNR falls below this.
    #[arg(long)]
    min_psnr: Option<f64>,
}

#[derive(Debug, Serialize)]
struct RunManifest {
    command: String,
    config_path: Option<PathBuf>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
    seed: Option<u64>,
    tool_version: String,
    timestamp: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    config: Option<serde_json::Value>,
}

impl RunManifest {
    fn new(command: &str) -> Self {
        Self {
            command: command.into(),
            config_path: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            seed: None,
            tool_version: env!("CARGO_PKG_VERSION").into(),
            timestamp: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            config: None,
        }
    }

    fn write(&self, path: &Path) -> Result<(), Failure> {
        Ok(write_atomic(path, &serde_json::to_vec_pretty(self).map_err(Error::from)?)?)
    }
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Core(Error),
    BelowGate { psnr: f64, gate: f64 },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config { .. } => Failure::Usage(e.to_string()),
            e => Failure::Core(e),
        }
    }
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Core(Error::NonFinite(_)) => 3,
            Failure::Core(_) => 2,
            Failure::BelowGate { .. } => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage error: {m}"),
            Failure::Core(e) => write!(f, "{e}"),
            Failure::BelowGate { psnr, gate } => write!(f, "mean PSNR {psnr:.3} dB is below the {gate} dB gate"),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let bytes = std::fs::read(path).map_err(|e| Error::Io { path: path.display().to_string(), source: e })?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))
}

fn create_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| Failure::Core(Error::Io { path: dir.display().to_string(), source: e }))
}

/// `a..b`, both ends inclusive.
fn parse_window(s: &str) -> Result<(usize, usize), Failure> {
    let bad = || Failure::Usage(format!("window {s:?} is not of the form a..b"));
    let (a, b) = s.split_once("..").ok_or_else(bad)?;
    let a = a.trim().parse().map_err(|_| bad())?;
    let b = b.trim().parse().map_err(|_| bad())?;
    if b < a {
        return Err(Failure::Usage(format!("window {s:?} ends before it starts")));
    }
    Ok((a, b))
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("f32")
}

fn file_manifest(path: &Path) -> PathBuf {
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{name}.manifest.json"))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

fn save_image(img: &Image, path: &Path) -> Result<(), Failure> {
    ensure_parent(path)?;
    img.save_8bit(path)?;
    img.save_f32(&sidecar(path))?;
    Ok(())
}

fn checkpoint_file(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CLOUD_FILE)
    } else {
        path.to_path_buf()
    }
}

fn cmd_simulate(a: SimulateArgs) -> CmdResult {
    let mut cfg: SimulateConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => SimulateConfig::default(),
    };
    if let Some(v) = a.scene {
        cfg.scene = v;
        cfg.scene_file = None;
    }
    if let Some(v) = a.scene_file {
        cfg.scene_file = Some(v);
    }
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag { cfg.$($field).+ = v; })*
        };
    }
    set!(traj => traj, speed => speed, frames => frames, width => width, height => height, focal => focal,
        holdout_stride => holdout_stride, threshold => sensor.threshold, dark_current => sensor.dark_current,
        jitter => sensor.threshold_jitter_std, seed => sensor.rng_seed);
    if a.noise {
        cfg.sensor.noise_enabled = true;
    }

    let scene: SyntheticScene = match &cfg.scene_file {
        Some(p) => read_json(p)?,
        None => preset_scene(&cfg.scene)?,
    };
    let kind: TrajectoryKind = cfg.traj.parse()?;
    let k = Intrinsics::centered(cfg.width, cfg.height, cfg.focal);
    let traj = make_trajectory(kind, cfg.frames, cfg.speed, &scene.bounds, k, &cfg.trajectory)?;
    let bundle = generate_dataset(&scene, &traj, &cfg.sensor, cfg.holdout_stride)?;
    create_dir(&a.out)?;
    bundle.save(&a.out)?;

    let mut m = RunManifest::new("simulate");
    m.config_path = a.config;
    m.inputs = cfg.scene_file.iter().cloned().collect();
    m.outputs = vec![a.out.clone()];
    m.seed = Some(cfg.sensor.rng_seed);
    m.config = serde_json::to_value(&cfg).ok();
    m.write(&a.out.join(MANIFEST_FILE))?;
    eprintln!(
        "wrote {} frames of {}x{} ({} spikes, {} holdout views) to {}",
        bundle.stream.num_frames(),
        bundle.stream.width(),
        bundle.stream.height(),
        bundle.stream.popcount(),
        bundle.holdout.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_reconstruct(a: ReconstructArgs) -> CmdResult {
    let stream = SpikeStream::load(&a.stream)?;
    let n = stream.num_frames();
    if n == 0 {
        return Err(Failure::Core(Error::Input("stream has no frames".into())));
    }
    let mut m = RunManifest::new("reconstruct");
    m.inputs = vec![a.stream.clone()];
    m.outputs = vec![a.out.clone(), sidecar(&a.out)];
    let img = match a.mode {
        ReconMode::Tfp => {
            let (t0, t1) = match &a.window {
                Some(w) => parse_window(w)?,
                None => (0, n - 1),
            };
            m.config = Some(serde_json::json!({ "mode": a.mode, "window": [t0, t1] }));
            tfp(&stream, t0, t1)?
        }
        ReconMode::Tfi => {
            let t = a.t.unwrap_or(n / 2);
            let interval = tfi(&stream, t, a.max_interval)?;
            let mask_path = a.out.with_file_name(format!(
                "{}_mask.png",
                a.out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
            ));
            ensure_parent(&mask_path)?;
            interval.mask_image().save_8bit(&mask_path)?;
            m.outputs.push(mask_path);
            m.config = Some(serde_json::json!({ "mode": a.mode, "t": t, "max_interval": a.max_interval }));
            if interval.valid_count() == 0 {
                eprintln!("warning: no pixel has a spike interval around frame {t}; the image is empty");
            }
            interval.to_image()
        }
    };
    save_image(&img, &a.out)?;
    m.write(&file_manifest(&a.out))
}

fn cmd_train(a: TrainArgs) -> CmdResult {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident),*) => { $(if let Some(v) = a.$flag { cfg.$flag = v; })* };
    }
    set!(iterations, n_keyframes, window_length, max_splats, checkpoint_every, seed);
    if a.no_accumulation_loss {
        cfg.use_accumulation_loss = false;
    }
    if a.no_interval_loss {
        cfg.use_interval_loss = false;
    }
    cfg.validate()?;

    let bundle = DatasetBundle::load(&a.data)?;
    let resume = a.resume.as_deref().map(TrainState::load).transpose()?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join(CONFIG_FILE), &serde_json::to_vec_pretty(&cfg).map_err(Error::from)?)?;
    let opts = TrainOptions {
        out_dir: Some(a.out.clone()),
        resume,
        stop_at: None,
        evaluate: !a.no_eval,
        log_every: a.log_every,
    };
    let outcome = train(&bundle, &cfg, &opts)?;
    if let (Some(i), Some(f)) = (&outcome.initial_eval, &outcome.final_eval) {
        eprintln!("holdout PSNR {:.2} dB -> {:.2} dB", i.mean_psnr, f.mean_psnr);
    }
    eprintln!("{} splats after {} iterations", outcome.state.cloud.len(), outcome.state.iteration);

    let mut m = RunManifest::new("train");
    m.config_path = a.config;
    m.inputs = [Some(a.data), a.resume].into_iter().flatten().collect();
    m.outputs = vec![a.out.join(CLOUD_FILE)];
    m.seed = Some(cfg.seed);
    m.config = serde_json::to_value(&cfg).ok();
    m.write(&a.out.join(MANIFEST_FILE))
}

fn cmd_render(a: RenderArgs) -> CmdResult {
    let ckpt = checkpoint_file(&a.checkpoint);
    let cloud = GaussianCloud::load(&ckpt)?;
    let bundle = DatasetBundle::load(&a.data)?;
    let traj = &bundle.trajectory;
    let last = (traj.len() - 1) as f64;
    let mut m = RunManifest::new("render");
    m.inputs = vec![ckpt, a.data.clone()];
    m.outputs = vec![a.out.clone(), sidecar(&a.out)];
    let img = match a.accumulate {
        Some(n) => {
            let (t0, t1) = parse_window(a.window.as_deref().unwrap_or_default())?;
            if t1 >= traj.len() {
                return Err(Failure::Core(Error::BadWindow { start: t0, end: t1, len: traj.len() }));
            }
            let poses: Vec<_> = keyframe_indices(t0, t1, n)?.into_iter().map(|t| traj.poses[t]).collect();
            m.config = Some(serde_json::json!({ "accumulate": n, "window": [t0, t1] }));
            render_accumulated(&cloud, &poses, &traj.intrinsics)?.image
        }
        None => {
            let t = a.t.unwrap_or(0.0);
            if !(0.0..=last).contains(&t) {
                return Err(Failure::Usage(format!("--t {t} outside the trajectory [0, {last}]")));
            }
            m.config = Some(serde_json::json!({ "t": t }));
            render(&cloud, &traj.pose_at(t), &traj.intrinsics)?.image
        }
    };
    save_image(&img, &a.out)?;
    m.write(&file_manifest(&a.out))
}

fn cmd_eval(a: EvalArgs) -> CmdResult {
    let ckpt = checkpoint_file(&a.checkpoint);
    let cloud = GaussianCloud::load(&ckpt)?;
    let bundle = DatasetBundle::load(&a.data)?;
    // the training config lives next to the checkpoint when trained by this tool
    let fingerprint = ckpt
        .parent()
        .map(|d| d.join(CONFIG_FILE))
        .filter(|p| p.is_file())
        .map(|p| read_json::<TrainConfig>(&p).map(|c| c.fingerprint()))
        .transpose()?
        .unwrap_or_else(|| "unknown".into());
    let report = evaluate(&cloud, &bundle.holdout, &bundle.trajectory, &bundle.scene_name, &fingerprint)?;
    create_dir(&a.out)?;
    write_atomic(&a.out.join("eval.json"), &serde_json::to_vec_pretty(&report).map_err(Error::from)?)?;
    let table = report.to_table();
    write_atomic(&a.out.join("eval.txt"), table.as_bytes())?;
    print!("{table}");

    let mut m = RunManifest::new("eval");
    m.inputs = vec![ckpt, a.data];
    m.outputs = vec![a.out.join("eval.json"), a.out.join("eval.txt")];
    m.config = Some(serde_json::json!({ "min_psnr": a.min_psnr }));
    m.write(&a.out.join(MANIFEST_FILE))?;
    match a.min_psnr {
        Some(gate) if !(report.mean_psnr >= gate) => Err(Failure::BelowGate { psnr: report.mean_psnr, gate }),
        _ => Ok(()),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
        eprintln!("warning: thread pool: {e}");
    }
    let result = match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Train(a) => cmd_train(a),
        Command::Render(a) => cmd_render(a),
        Command::Eval(a) => cmd_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
