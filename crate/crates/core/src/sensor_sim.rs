//! Integrate-and-fire spike camera simulator.
//!
//! Each pixel integrates radiance once per readout interval. When the
//! accumulator reaches the threshold a spike is emitted and the threshold is
//! subtracted, so the accumulator holds the integral modulo the threshold.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::spike_stream::SpikeStream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensorConfig {
    pub threshold: f64,
    pub readout_period_us: f64,
    pub noise_enabled: bool,
    /// Added to every pixel's input on every readout when noise is enabled.
    pub dark_current: f64,
    /// Relative std-dev of the per-pixel, per-readout threshold jitter.
    pub threshold_jitter_std: f64,
    pub rng_seed: u64,
}

impl Default for SensorConfig {
    fn default() -> Self {
        Self {
            threshold: 1.0,
            readout_period_us: 25.0,
            noise_enabled: false,
            dark_current: 0.0,
            threshold_jitter_std: 0.0,
            rng_seed: 0,
        }
    }
}

impl SensorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0) || !self.threshold.is_finite() {
            return Err(Error::config("threshold", format!("must be > 0, got {}", self.threshold)));
        }
        if !(self.readout_period_us > 0.0) || !self.readout_period_us.is_finite() {
            return Err(Error::config(
                "readout_period_us",
                format!("must be > 0, got {}", self.readout_period_us),
            ));
        }
        if !(self.dark_current >= 0.0) {
            return Err(Error::config("dark_current", format!("must be >= 0, got {}", self.dark_current)));
        }
        if !(0.0..=0.5).contains(&self.threshold_jitter_std) {
            return Err(Error::config(
                "threshold_jitter_std",
                format!("must lie in [0, 0.5], got {}", self.threshold_jitter_std),
            ));
        }
        Ok(())
    }

    fn noisy(&self) -> bool {
        self.noise_enabled && (self.dark_current > 0.0 || self.threshold_jitter_std > 0.0)
    }
}

/// Per-pixel accumulator residuals plus the number of readouts consumed so far
/// (which keys the noise generator).
#[derive(Clone, Debug, PartialEq)]
pub struct AccumulatorState {
    pub width: usize,
    pub height: usize,
    pub residual: Vec<f64>,
    pub readouts: u64,
}

impl AccumulatorState {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            residual: vec![0.0; width * height],
            readouts: 0,
        }
    }
}

fn check_frame(frame: &Image, width: usize, height: usize, config: &SensorConfig) -> Result<()> {
    if frame.channels != 1 || frame.width != width || frame.height != height {
        return Err(Error::Shape(format!(
            "radiance frame {}x{}x{} does not match sensor {}x{}x1",
            frame.width, frame.height, frame.channels, width, height
        )));
    }
    let mut max = 0.0f64;
    for &v in &frame.data {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Input(format!("radiance must be finite and >= 0, got {v}")));
        }
        max = max.max(v);
    }
    if config.threshold < max {
        return Err(Error::config(
            "threshold",
            format!(
                "{} is below the peak radiance {max}; a readout could need more than one spike",
                config.threshold
            ),
        ));
    }
    Ok(())
}

/// Integrates one readout interval. Returns the new state and the binary frame.
pub fn step(
    state: &AccumulatorState,
    frame: &Image,
    config: &SensorConfig,
) -> Result<(AccumulatorState, Vec<bool>)> {
    config.validate()?;
    check_frame(frame, state.width, state.height, config)?;
    let mut next = state.clone();
    let spikes = integrate(&mut next, frame, config);
    Ok((next, spikes))
}

/// Relative slack on the threshold comparison, so that sums such as
/// `0.3 + 0.3 + ...` that land on a multiple of φ up to rounding still fire.
pub const CROSSING_TOL: f64 = 1e-9;

fn integrate(state: &mut AccumulatorState, frame: &Image, config: &SensorConfig) -> Vec<bool> {
    let phi = config.threshold;
    let mut spikes = vec![false; frame.data.len()];
    if config.noisy() {
        let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
        rng.set_stream(state.readouts);
        for ((acc, &r), s) in state.residual.iter_mut().zip(&frame.data).zip(spikes.iter_mut()) {
            let jitter: f64 = StandardNormal.sample(&mut rng);
            let eff = (phi * (1.0 + config.threshold_jitter_std * jitter)).max(0.1 * phi);
            *acc += r + config.dark_current;
            if *acc >= eff * (1.0 - CROSSING_TOL) {
                *acc = (*acc - eff).max(0.0);
                *s = true;
            }
        }
    } else {
        state
            .residual
            .par_iter_mut()
            .zip(frame.data.par_iter())
            .zip(spikes.par_iter_mut())
            .for_each(|((acc, &r), s)| {
                *acc += r;
                if *acc >= phi * (1.0 - CROSSING_TOL) {
                    *acc = (*acc - phi).max(0.0);
                    *s = true;
                }
            });
    }
    state.readouts += 1;
    spikes
}

/// Runs the simulator over a frame sequence, one frame per readout.
pub fn simulate(frames: &[Image], config: &SensorConfig) -> Result<SpikeStream> {
    simulate_with_state(frames, config).map(|(s, _)| s)
}

/// Like [`simulate`], also returning the final accumulator state.
pub fn simulate_with_state(
    frames: &[Image],
    config: &SensorConfig,
) -> Result<(SpikeStream, AccumulatorState)> {
    config.validate()?;
    let first = frames
        .first()
        .ok_or_else(|| Error::Input("simulate needs at least one frame".into()))?;
    let (w, h) = (first.width, first.height);
    for f in frames {
        check_frame(f, w, h, config)?;
    }
    let mut state = AccumulatorState::new(w, h);
    let spikes: Vec<Vec<bool>> = frames.iter().map(|f| integrate(&mut state, f, config)).collect();
    let stream = SpikeStream::from_frames(
        h,
        w,
        config.threshold as f32,
        config.readout_period_us as f32,
        &spikes,
    )?;
    Ok((stream, state))
}

/// Loads a frame sequence from a directory of `.pgm`/`.png` (8-bit) or `.f32`
/// raw dumps, ordered by file name.
pub fn load_frames_dir(dir: &Path) -> Result<Vec<Image>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()),
                Some("pgm" | "png" | "f32")
            )
        })
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| match p.extension().and_then(|e| e.to_str()) {
            Some("f32") => Image::load_f32(p).map(|img| img.luminance()),
            _ => Image::load_gray(p),
        })
        .collect()
}
