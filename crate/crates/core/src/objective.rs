//! Photometric + structural losses against spike reconstructions, and the
//! iteration schedules that blend them.
//!
//! SSIM uses an 11×11 Gaussian window (σ = 1.5), K1 = 0.01, K2 = 0.03 and a
//! dynamic range of 1. Windows are clipped at the image border and, when a
//! validity mask is given, restricted to valid pixels; weights are
//! renormalized over whatever remains. Windows centered on invalid pixels or
//! covering fewer than two valid pixels are skipped.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::recon::IntervalImage;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
const C1: f64 = SSIM_K1 * SSIM_K1;
const C2: f64 = SSIM_K2 * SSIM_K2;

fn gaussian_kernel() -> [f64; SSIM_WINDOW] {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k = [0.0; SSIM_WINDOW];
    for (i, v) in k.iter_mut().enumerate() {
        let x = i as f64 - half;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k.iter().sum();
    k.map(|v| v / s)
}

/// Mean SSIM of two single-channel images plus, optionally, its gradient with
/// respect to `a`. Returns `None` when every window is degenerate.
pub fn ssim_masked(a: &Image, b: &Image, mask: Option<&[bool]>, want_grad: bool) -> Result<Option<(f64, Option<Vec<f64>>)>> {
    a.check_same_shape(b)?;
    if a.channels != 1 {
        return Err(Error::Shape(format!("ssim expects single-channel images, got {}", a.channels)));
    }
    let (w, h) = (a.width, a.height);
    if let Some(m) = mask {
        if m.len() != w * h {
            return Err(Error::Shape(format!("mask has {} entries for {} pixels", m.len(), w * h)));
        }
    }
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let kern = gaussian_kernel();
    let half = (SSIM_WINDOW / 2) as isize;

    let mut total = 0.0;
    let mut windows = 0usize;
    let mut grad = want_grad.then(|| vec![0.0; w * h]);
    let mut taps: Vec<(usize, f64)> = Vec::with_capacity(SSIM_WINDOW * SSIM_WINDOW);

    for cy in 0..h {
        for cx in 0..w {
            if !valid(cy * w + cx) {
                continue;
            }
            taps.clear();
            let mut wsum = 0.0;
            for dy in -half..=half {
                let y = cy as isize + dy;
                if y < 0 || y >= h as isize {
                    continue;
                }
                for dx in -half..=half {
                    let x = cx as isize + dx;
                    if x < 0 || x >= w as isize {
                        continue;
                    }
                    let i = y as usize * w + x as usize;
                    if !valid(i) {
                        continue;
                    }
                    let wt = kern[(dy + half) as usize] * kern[(dx + half) as usize];
                    taps.push((i, wt));
                    wsum += wt;
                }
            }
            if taps.len() < 2 {
                continue;
            }
            let (mut mu_a, mut mu_b, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for &(i, wt) in &taps {
                let wt = wt / wsum;
                let (va, vb) = (a.data[i], b.data[i]);
                mu_a += wt * va;
                mu_b += wt * vb;
                saa += wt * va * va;
                sbb += wt * vb * vb;
                sab += wt * va * vb;
            }
            let var_a = saa - mu_a * mu_a;
            let var_b = sbb - mu_b * mu_b;
            let cov = sab - mu_a * mu_b;
            let num1 = 2.0 * mu_a * mu_b + C1;
            let num2 = 2.0 * cov + C2;
            let den1 = mu_a * mu_a + mu_b * mu_b + C1;
            let den2 = var_a + var_b + C2;
            let s = (num1 * num2) / (den1 * den2);
            total += s;
            windows += 1;
            if let Some(g) = grad.as_mut() {
                let ds_dmu_a = s * (2.0 * mu_b / num1 - 2.0 * mu_a / den1);
                let ds_dvar_a = -s / den2;
                let ds_dcov = 2.0 * s / num2;
                for &(i, wt) in &taps {
                    let wt = wt / wsum;
                    g[i] += wt * (ds_dmu_a + 2.0 * ds_dvar_a * (a.data[i] - mu_a) + ds_dcov * (b.data[i] - mu_b));
                }
            }
        }
    }
    if windows == 0 {
        return Ok(None);
    }
    let inv = 1.0 / windows as f64;
    if let Some(g) = grad.as_mut() {
        g.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Some((total * inv, grad)))
}

/// Mean SSIM of two images. Multi-channel images are compared per channel and
/// averaged.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    let mut acc = 0.0;
    for c in 0..a.channels {
        let plane = |img: &Image| Image {
            width: img.width,
            height: img.height,
            channels: 1,
            data: img.data.iter().skip(c).step_by(img.channels).copied().collect(),
        };
        let (v, _) = ssim_masked(&plane(a), &plane(b), None, false)?
            .ok_or_else(|| Error::Input("ssim needs at least two pixels".into()))?;
        acc += v;
    }
    Ok(acc / a.channels as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhotometricNorm {
    Mse,
    L1,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the D-SSIM term.
    pub lambda1: f64,
    pub norm: PhotometricNorm,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda1: 0.2,
            norm: PhotometricNorm::Mse,
        }
    }
}

/// Loss value with its gradient w.r.t. the rendered image (same shape).
#[derive(Clone, Debug)]
pub struct LossValue {
    pub value: f64,
    pub grad: Image,
    /// Whether the structural term contributed (false when all SSIM windows
    /// were degenerate).
    pub ssim_used: bool,
}

/// `(1−λ1)·photometric + λ1·(1 − SSIM)` between the luminance of `rendered`
/// and a single-channel `target`, over the pixels in `mask`.
fn masked_loss(rendered: &Image, target: &Image, mask: Option<&[bool]>, cfg: &LossConfig) -> Result<LossValue> {
    if target.channels != 1 || rendered.width != target.width || rendered.height != target.height {
        return Err(Error::Shape(format!(
            "rendered {}x{} vs target {}x{}x{} (target must be single-channel)",
            rendered.width, rendered.height, target.width, target.height, target.channels
        )));
    }
    if !(0.0..=1.0).contains(&cfg.lambda1) {
        return Err(Error::config("lambda1", "must lie in [0, 1]"));
    }
    let lum = rendered.luminance();
    let npx = lum.data.len();
    let valid = |i: usize| mask.is_none_or(|m| m[i]);
    let count = (0..npx).filter(|&i| valid(i)).count();
    if count == 0 {
        return Err(Error::Input("loss mask selects no pixels".into()));
    }
    let inv = 1.0 / count as f64;
    let mut photo = 0.0;
    let mut g_lum = vec![0.0; npx];
    for i in (0..npx).filter(|&i| valid(i)) {
        let d = lum.data[i] - target.data[i];
        match cfg.norm {
            PhotometricNorm::Mse => {
                photo += d * d * inv;
                g_lum[i] = (1.0 - cfg.lambda1) * 2.0 * d * inv;
            }
            PhotometricNorm::L1 => {
                photo += d.abs() * inv;
                g_lum[i] = (1.0 - cfg.lambda1) * d.signum() * inv;
            }
        }
    }
    let mut value = (1.0 - cfg.lambda1) * photo;
    let mut ssim_used = false;
    if cfg.lambda1 > 0.0 {
        if let Some((s, Some(gs))) = ssim_masked(&lum, target, mask, true)? {
            value += cfg.lambda1 * (1.0 - s);
            for (g, d) in g_lum.iter_mut().zip(&gs) {
                *g -= cfg.lambda1 * d;
            }
            ssim_used = true;
        }
    }
    let ch = rendered.channels;
    let per = 1.0 / ch as f64;
    let grad = Image {
        width: rendered.width,
        height: rendered.height,
        channels: ch,
        data: g_lum.iter().flat_map(|&g| std::iter::repeat_n(g * per, ch)).collect(),
    };
    Ok(LossValue { value, grad, ssim_used })
}

pub fn accumulation_loss(rendered: &Image, tfp_target: &Image, cfg: &LossConfig) -> Result<LossValue> {
    masked_loss(rendered, tfp_target, None, cfg)
}

/// Interval loss over the interval image's valid pixels. Invalid pixels get
/// exactly zero gradient. When no SSIM window survives the mask, only the
/// `(1−λ1)`-weighted photometric term remains.
pub fn interval_loss(rendered: &Image, interval: &IntervalImage, cfg: &LossConfig) -> Result<LossValue> {
    masked_loss(rendered, &interval.to_image(), Some(&interval.valid), cfg)
}

/// Schedules for the accumulation and interval weights, as functions of the
/// training fraction `t / (iterations − 1)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// λ_accu rises linearly from 0 to 1 over `[0, accu_ramp_end]`.
    pub accu_ramp_end: f64,
    /// λ_in is 1 until `in_decay_start`, then falls linearly to
    /// `lambda_in_min` at `in_decay_end` and stays there.
    pub in_decay_start: f64,
    pub in_decay_end: f64,
    pub lambda_in_min: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            accu_ramp_end: 0.3,
            in_decay_start: 0.3,
            in_decay_end: 0.6,
            lambda_in_min: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.accu_ramp_end) {
            return Err(Error::config("accu_ramp_end", "must lie in [0, 1]"));
        }
        if !(0.0 <= self.in_decay_start && self.in_decay_start <= self.in_decay_end && self.in_decay_end <= 1.0) {
            return Err(Error::config("in_decay_start", "need 0 <= in_decay_start <= in_decay_end <= 1"));
        }
        if !(0.0..=1.0).contains(&self.lambda_in_min) {
            return Err(Error::config("lambda_in_min", "must lie in [0, 1]"));
        }
        Ok(())
    }

    fn fraction(iter: usize, iterations: usize) -> f64 {
        if iterations <= 1 {
            return 1.0;
        }
        (iter as f64 / (iterations - 1) as f64).clamp(0.0, 1.0)
    }

    pub fn lambda_accu(&self, iter: usize, iterations: usize) -> f64 {
        let f = Self::fraction(iter, iterations);
        if self.accu_ramp_end <= 0.0 {
            1.0
        } else {
            (f / self.accu_ramp_end).min(1.0)
        }
    }

    pub fn lambda_in(&self, iter: usize, iterations: usize) -> f64 {
        let f = Self::fraction(iter, iterations);
        if f <= self.in_decay_start {
            1.0
        } else if f >= self.in_decay_end {
            self.lambda_in_min
        } else {
            let s = (f - self.in_decay_start) / (self.in_decay_end - self.in_decay_start);
            1.0 + (self.lambda_in_min - 1.0) * s
        }
    }
}

pub fn combined_loss(iter: usize, iterations: usize, l_accu: f64, l_in: f64, weights: &LossWeights) -> f64 {
    weights.lambda_accu(iter, iterations) * l_accu + weights.lambda_in(iter, iterations) * l_in
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(w: usize, h: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_vec(w, h, 1, (0..w * h).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn ssim_identity_and_constants() {
        let x = random_image(12, 9, 1);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let zero = Image::filled(12, 12, 1, 0.0);
        let one = Image::filled(12, 12, 1, 1.0);
        let expected = (C1 * C2) / ((1.0 + C1) * C2);
        assert!((ssim(&zero, &one).unwrap() - expected).abs() < 1e-15);
        assert!(ssim(&zero, &Image::new(3, 3, 1)).is_err());
    }

    #[test]
    fn ssim_symmetric_and_decreasing_with_noise() {
        let a = random_image(24, 24, 2);
        let b = random_image(24, 24, 3);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        let smooth = Image::from_vec(
            32,
            32,
            1,
            (0..1024).map(|i| 0.5 + 0.3 * ((i % 32) as f64 / 5.0).sin()).collect(),
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let noise: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
        let scores: Vec<f64> = [0.02, 0.08, 0.2]
            .iter()
            .map(|amp| {
                let noisy = Image { data: smooth.data.iter().zip(&noise).map(|(v, n)| v + amp * n).collect(), ..smooth.clone() };
                ssim(&smooth, &noisy).unwrap()
            })
            .collect();
        assert!(scores[0] > scores[1] && scores[1] > scores[2], "{scores:?}");
    }

    #[test]
    fn loss_zero_on_equal_and_mse_when_lambda_zero() {
        let t = random_image(8, 8, 5);
        let rendered = t.replicate(3);
        let l = accumulation_loss(&rendered, &t, &LossConfig::default()).unwrap();
        assert!(l.value.abs() < 1e-12);
        let r = random_image(8, 8, 6).replicate(3);
        let cfg = LossConfig { lambda1: 0.0, ..Default::default() };
        let l = accumulation_loss(&r, &t, &cfg).unwrap();
        let mse: f64 = r.luminance().data.iter().zip(&t.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0;
        assert_eq!(l.value, mse);
    }

    #[test]
    fn interval_loss_masking() {
        let t = random_image(8, 8, 7);
        let r = random_image(8, 8, 8).replicate(3);
        let full = IntervalImage {
            width: 8,
            height: 8,
            values: t.data.clone(),
            valid: vec![true; 64],
            mid_time: vec![0.0; 64],
            t_ref: 0,
        };
        let cfg = LossConfig::default();
        let a = interval_loss(&r, &full, &cfg).unwrap();
        let b = accumulation_loss(&r, &t, &cfg).unwrap();
        assert_eq!(a.value, b.value);

        let mut one = full.clone();
        one.valid = vec![false; 64];
        one.valid[27] = true;
        let l = interval_loss(&r, &one, &cfg).unwrap();
        let e = r.luminance().data[27] - t.data[27];
        assert!(!l.ssim_used);
        assert!((l.value - (1.0 - cfg.lambda1) * e * e).abs() < 1e-15);
        for (i, px) in l.grad.data.chunks(3).enumerate() {
            if i != 27 {
                assert!(px.iter().all(|&g| g == 0.0));
            }
        }

        let mut sparse = full.clone();
        for (i, v) in sparse.valid.iter_mut().enumerate() {
            *v = i % 3 != 0;
        }
        let l = interval_loss(&r, &sparse, &cfg).unwrap();
        for (i, px) in l.grad.data.chunks(3).enumerate() {
            if !sparse.valid[i] {
                assert!(px.iter().all(|&g| g == 0.0));
            }
        }
        let none = IntervalImage { valid: vec![false; 64], ..full };
        assert!(interval_loss(&r, &none, &cfg).is_err());
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        let w = LossWeights::default();
        let n = 1001;
        assert_eq!(w.lambda_accu(0, n), 0.0);
        assert_eq!(w.lambda_in(0, n), 1.0);
        assert_eq!(w.lambda_accu(n - 1, n), 1.0);
        assert_eq!(w.lambda_in(n - 1, n), w.lambda_in_min);
        assert!((w.lambda_accu(150, n) - 0.5).abs() < 1e-12);
        for t in 1..n {
            assert!(w.lambda_accu(t, n) >= w.lambda_accu(t - 1, n));
            assert!(w.lambda_in(t, n) <= w.lambda_in(t - 1, n));
            assert!(w.lambda_in(t, n) >= w.lambda_in_min);
        }
        assert_eq!(combined_loss(0, n, 3.0, 2.0, &w), 2.0);
    }

    #[test]
    fn shape_mismatch() {
        let a = Image::new(4, 4, 1);
        assert!(ssim(&a, &Image::new(5, 4, 1)).is_err());
        assert!(accumulation_loss(&Image::new(4, 4, 3), &Image::new(4, 5, 1), &LossConfig::default()).is_err());
    }
}
