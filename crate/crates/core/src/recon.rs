//! Intensity estimators over spike windows: spike counting (TFP) and
//! inter-spike interval (TFI).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::spike_stream::SpikeStream;

pub const DEFAULT_MAX_INTERVAL: usize = 64;

/// Per-pixel interval estimate with its validity mask and interval midpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct IntervalImage {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
    /// `(t1 + t2) / 2` in frame units, meaningful where valid.
    pub mid_time: Vec<f64>,
    /// The reference frame the brackets were searched around.
    pub t_ref: usize,
}

impl IntervalImage {
    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    pub fn valid_fraction(&self) -> f64 {
        self.valid_count() as f64 / self.valid.len() as f64
    }

    pub fn to_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.values.clone(),
        }
    }

    pub fn mask_image(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.valid.iter().map(|&v| v as u8 as f64).collect(),
        }
    }

    /// Median interval midpoint over valid pixels, or `None` if none are valid.
    pub fn median_mid_time(&self) -> Option<f64> {
        let mut mids: Vec<f64> = self
            .mid_time
            .iter()
            .zip(&self.valid)
            .filter(|(_, &v)| v)
            .map(|(&m, _)| m)
            .collect();
        if mids.is_empty() {
            return None;
        }
        mids.sort_by(f64::total_cmp);
        let n = mids.len();
        Some(if n % 2 == 1 {
            mids[n / 2]
        } else {
            0.5 * (mids[n / 2 - 1] + mids[n / 2])
        })
    }
}

/// Spike-count estimate over frames `[t0, t1]`: `threshold / N_w * count`.
pub fn tfp(stream: &SpikeStream, t0: usize, t1: usize) -> Result<Image> {
    let counts = stream.counts(t0, t1)?;
    let scale = stream.threshold() as f64 / (t1 - t0 + 1) as f64;
    Image::from_vec(
        stream.width(),
        stream.height(),
        1,
        counts.into_iter().map(|c| c as f64 * scale).collect(),
    )
}

/// Interval estimate around `t_ref`: the last spike at or before `t_ref` and
/// the next one after it bracket an interval `d`; the value is `threshold / d`.
/// Pixels without such a bracket, or with `d > max_interval`, are invalid.
pub fn tfi(stream: &SpikeStream, t_ref: usize, max_interval: usize) -> Result<IntervalImage> {
    let n = stream.num_frames();
    if t_ref >= n {
        return Err(Error::OutOfBounds { axis: "t", index: t_ref, len: n });
    }
    let phi = stream.threshold() as f64;
    let npx = stream.width() * stream.height();
    let per_pixel: Vec<(f64, bool, f64)> = (0..npx)
        .into_par_iter()
        .map(|p| {
            let Some(t1) = (0..=t_ref).rev().find(|&t| stream.bit(p, t)) else {
                return (0.0, false, 0.0);
            };
            let Some(t2) = (t1 + 1..n).find(|&t| stream.bit(p, t)) else {
                return (0.0, false, 0.0);
            };
            let d = t2 - t1;
            if d > max_interval {
                return (0.0, false, 0.0);
            }
            (phi / d as f64, true, 0.5 * (t1 + t2) as f64)
        })
        .collect();
    Ok(IntervalImage {
        width: stream.width(),
        height: stream.height(),
        values: per_pixel.iter().map(|p| p.0).collect(),
        valid: per_pixel.iter().map(|p| p.1).collect(),
        mid_time: per_pixel.iter().map(|p| p.2).collect(),
        t_ref,
    })
}

/// Reference times for `num_targets` interval images: one per equal stratum of
/// the stream, jittered within the stratum by `seed`. Strictly increasing.
pub fn interval_reference_times(num_frames: usize, num_targets: usize, seed: u64) -> Result<Vec<usize>> {
    if num_targets == 0 {
        return Err(Error::config("num_targets", "must be >= 1"));
    }
    if num_targets > num_frames {
        return Err(Error::config(
            "num_targets",
            format!("{num_targets} targets cannot be distinct in {num_frames} frames"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_targets)
        .map(|k| {
            let lo = k * num_frames / num_targets;
            let hi = (k + 1) * num_frames / num_targets;
            rng.random_range(lo..hi)
        })
        .collect())
}

pub fn interval_supervision_set(
    stream: &SpikeStream,
    num_targets: usize,
    seed: u64,
    max_interval: usize,
) -> Result<Vec<IntervalImage>> {
    interval_reference_times(stream.num_frames(), num_targets, seed)?
        .into_iter()
        .map(|t| tfi(stream, t, max_interval))
        .collect()
}
