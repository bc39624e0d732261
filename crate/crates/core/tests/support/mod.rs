//! Shared fixtures: random scenes, a naive blending oracle and a
//! central-difference gradient checker.
#![allow(dead_code)]

use nalgebra::Vector2;
use rand::Rng;

use spikesplat::camera::{Intrinsics, Pose};
use spikesplat::gauss_model::{eval_gaussian2d, logit, project, GaussianCloud, Splat, ALPHA_EPS};
use spikesplat::image::Image;
use spikesplat::rasterizer::{GradientBundle, ALPHA_MAX};

pub const GROUP_NAMES: [&str; 5] = ["position", "rotation", "log_scale", "opacity", "color"];

/// `n` splats in front of an identity camera with focal `0.9·width`, spread
/// over the frustum. Opacities stay in `[lo, hi]`.
pub fn random_cloud(rng: &mut impl Rng, n: usize, k: &Intrinsics, opacity: (f64, f64)) -> GaussianCloud {
    GaussianCloud::from_splats((0..n).map(|_| {
        let z = rng.random_range(2.0..5.0);
        let u = rng.random_range(0.1..0.9) * k.width as f64;
        let v = rng.random_range(0.1..0.9) * k.height as f64;
        let x = (u - k.cx) * z / k.fx;
        let y = (v - k.cy) * z / k.fy;
        // 0.6 to 3 px standard deviation on screen
        let px_to_world = z / k.fx;
        let log_scale = [0; 3].map(|_| (rng.random_range(0.6..3.0) * px_to_world).ln());
        let q: [f64; 4] = [0; 4].map(|_| rng.random_range(-1.0..1.0));
        let qn = q.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-3);
        Splat {
            position: [x, y, z],
            rotation: q.map(|v| v / qn),
            log_scale,
            opacity_logit: logit(rng.random_range(opacity.0..opacity.1)),
            color_logit: [0; 3].map(|_| rng.random_range(-1.5..1.5)),
        }
    }))
}

/// Front-to-back blend evaluated independently at every pixel: every splat,
/// no tiles, no early termination.
pub fn naive_render(cloud: &GaussianCloud, pose: &Pose, k: &Intrinsics) -> Image {
    let mut projected: Vec<_> = (0..cloud.len()).filter_map(|i| project(cloud, i, pose, k)).map(|(p, _)| p).collect();
    projected.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    let mut img = Image::new(k.width, k.height, 3);
    for y in 0..k.height {
        for x in 0..k.width {
            let px = Vector2::new(x as f64 + 0.5, y as f64 + 0.5);
            let mut t = 1.0;
            let mut c = [0.0; 3];
            for p in &projected {
                let raw = p.opacity * eval_gaussian2d(p, px);
                if raw < ALPHA_EPS {
                    continue;
                }
                let alpha = raw.min(ALPHA_MAX);
                for ch in 0..3 {
                    c[ch] += p.color[ch] * alpha * t;
                }
                t *= 1.0 - alpha;
            }
            for ch in 0..3 {
                img.set(x, y, ch, c[ch]);
            }
        }
    }
    img
}

fn param_mut(cloud: &mut GaussianCloud, group: usize, flat: usize) -> &mut f64 {
    match group {
        0 => &mut cloud.positions[flat / 3][flat % 3],
        1 => &mut cloud.rotations[flat / 4][flat % 4],
        2 => &mut cloud.log_scales[flat / 3][flat % 3],
        3 => &mut cloud.opacity_logits[flat],
        _ => &mut cloud.color_logits[flat / 3][flat % 3],
    }
}

/// Central differences of `f` for every parameter, grouped like
/// `GaussianCloud::groups`.
pub fn finite_differences(cloud: &GaussianCloud, eps: f64, f: impl Fn(&GaussianCloud) -> f64) -> [Vec<f64>; 5] {
    let sizes = cloud.groups().map(|g| g.len());
    let mut work = cloud.clone();
    let mut out: [Vec<f64>; 5] = Default::default();
    for (g, &n) in sizes.iter().enumerate() {
        for i in 0..n {
            let orig = *param_mut(&mut work, g, i);
            *param_mut(&mut work, g, i) = orig + eps;
            let plus = f(&work);
            *param_mut(&mut work, g, i) = orig - eps;
            let minus = f(&work);
            *param_mut(&mut work, g, i) = orig;
            out[g].push((plus - minus) / (2.0 * eps));
        }
    }
    out
}

/// `max|a − f| / max|f|` per group; groups whose numeric gradient is
/// (near) zero report the absolute error instead.
pub fn relative_errors(analytic: &GradientBundle, numeric: &[Vec<f64>; 5]) -> [f64; 5] {
    let a = analytic.groups();
    std::array::from_fn(|g| {
        let scale = numeric[g].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let err = a[g].iter().zip(&numeric[g]).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        if scale < 1e-8 {
            err
        } else {
            err / scale
        }
    })
}

/// Dot product of two same-shape images.
pub fn dot(a: &Image, b: &Image) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

pub fn random_image(rng: &mut impl Rng, w: usize, h: usize, c: usize) -> Image {
    Image::from_vec(w, h, c, (0..w * h * c).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
}
