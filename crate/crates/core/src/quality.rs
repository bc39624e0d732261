//! Image-quality metrics and novel-view evaluation.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::camera::CameraTrajectory;
use crate::error::{Error, Result};
use crate::gauss_model::GaussianCloud;
use crate::image::Image;
use crate::objective::ssim;
use crate::rasterizer::render;
use crate::scene_forge::HoldoutView;

/// `10·log10(1 / MSE)` for images in `[0, 1]`; `+inf` for identical images.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    a.check_same_shape(b)?;
    if a.data.is_empty() {
        return Err(Error::Input("psnr of empty images".into()));
    }
    let mse = a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn ser_db<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_infinite() && *v > 0.0 {
        s.serialize_str("inf")
    } else {
        s.serialize_f64(*v)
    }
}

fn de_db<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Db {
        Num(f64),
        Text(String),
    }
    match Db::deserialize(d)? {
        Db::Num(v) => Ok(v),
        Db::Text(t) if t == "inf" => Ok(f64::INFINITY),
        Db::Text(t) => Err(serde::de::Error::custom(format!("bad dB value {t:?}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewScore {
    pub frame: usize,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scene: String,
    pub config_fingerprint: String,
    pub views: Vec<ViewScore>,
    #[serde(serialize_with = "ser_db", deserialize_with = "de_db")]
    pub mean_psnr: f64,
    pub mean_ssim: f64,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let db = |v: f64| if v.is_infinite() { "inf".to_string() } else { format!("{v:.3}") };
        let _ = writeln!(out, "scene: {}  config: {}", self.scene, self.config_fingerprint);
        let _ = writeln!(out, "{:>8}  {:>10}  {:>8}", "frame", "PSNR (dB)", "SSIM");
        for v in &self.views {
            let _ = writeln!(out, "{:>8}  {:>10}  {:>8.4}", v.frame, db(v.psnr), v.ssim);
        }
        let _ = writeln!(out, "{:>8}  {:>10}  {:>8.4}", "mean", db(self.mean_psnr), self.mean_ssim);
        out
    }
}

/// Renders each holdout pose with the sharp single-pose renderer and scores
/// the luminance against the clean view.
pub fn evaluate(
    cloud: &GaussianCloud,
    holdout: &[HoldoutView],
    trajectory: &CameraTrajectory,
    scene: &str,
    config_fingerprint: &str,
) -> Result<EvalReport> {
    if holdout.is_empty() {
        return Err(Error::Input("evaluation needs at least one holdout view".into()));
    }
    let views = holdout
        .par_iter()
        .map(|v| {
            let pose = trajectory
                .poses
                .get(v.frame)
                .ok_or(Error::OutOfBounds { axis: "t", index: v.frame, len: trajectory.len() })?;
            let rendered = render(cloud, pose, &trajectory.intrinsics)?.image.luminance();
            Ok(ViewScore {
                frame: v.frame,
                psnr: psnr(&rendered, &v.image)?,
                ssim: ssim(&rendered, &v.image)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = views.len() as f64;
    Ok(EvalReport {
        scene: scene.to_string(),
        config_fingerprint: config_fingerprint.to_string(),
        mean_psnr: views.iter().map(|v| v.psnr).sum::<f64>() / n,
        mean_ssim: views.iter().map(|v| v.ssim).sum::<f64>() / n,
        views,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_cases() {
        let a = Image::filled(8, 8, 1, 0.3);
        assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
        let z = Image::filled(8, 8, 1, 0.0);
        let p = Image::filled(8, 8, 1, 0.1);
        assert!((psnr(&z, &p).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&z, &p).unwrap(), psnr(&p, &z).unwrap());
        assert!(psnr(&z, &Image::new(4, 4, 1)).is_err());
    }

    #[test]
    fn psnr_uniform_noise_expectation() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Image::from_vec(128, 128, 1, (0..128 * 128).map(|_| rng.random_range(0.1..0.9)).collect()).unwrap();
        let b = Image { data: a.data.iter().map(|v| v + rng.random_range(-0.05..0.05)).collect(), ..a.clone() };
        // Var(U(-h, h)) = h²/3 = 0.1²/12
        let expected = 10.0 * (12.0f64 / 0.01).log10();
        assert!((psnr(&a, &b).unwrap() - expected).abs() < 0.5);
    }

    #[test]
    fn report_json_keeps_inf() {
        let r = EvalReport {
            scene: "s".into(),
            config_fingerprint: "f".into(),
            views: vec![ViewScore { frame: 3, psnr: f64::INFINITY, ssim: 1.0 }],
            mean_psnr: f64::INFINITY,
            mean_ssim: 1.0,
        };
        let json = serde_json::to_string(&r).unwrap();
        assert!(json.contains("\"inf\""));
        let back: EvalReport = serde_json::from_str(&json).unwrap();
        assert_eq!(back, r);
        assert!(r.to_table().contains("inf"));
    }
}
