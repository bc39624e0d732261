//! Differentiable splat rasterization.
//!
//! Forward: project, sort front-to-back by `(depth, index)`, bin into 16×16
//! tiles, and alpha-blend per pixel:
//!
//! ```text
//! C = Σ_i c_i α_i T_i,   T_i = Π_{j<i} (1 − α_j),   α_i = min(o_i · g_i, 0.99)
//! ```
//!
//! Backward replays each pixel's front-to-back list and walks it back to
//! front, then chains screen-space gradients through the projection. Per-tile
//! partial gradients are reduced in tile order, so results do not depend on
//! the thread count.

use nalgebra::{Matrix2, Vector2};
use rayon::prelude::*;

use crate::camera::{CameraTrajectory, Intrinsics, Pose};
use crate::error::{Error, Result};
use crate::gauss_model::{project, project_backward, GaussianCloud, ProjectedSplat, ProjectionCache, ALPHA_EPS};
use crate::image::Image;
use crate::recon::IntervalImage;

pub const ALPHA_MAX: f64 = 0.99;
pub const TILE_SIZE: usize = 16;
pub const MAX_KEYFRAMES: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderOptions {
    /// Stop blending a pixel once transmittance falls below this; 0 disables.
    pub early_stop_transmittance: f64,
    pub tile_size: usize,
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            early_stop_transmittance: 1e-4,
            tile_size: TILE_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RenderedImage {
    /// RGB, `[0, 1]`.
    pub image: Image,
    /// Transmittance left after blending, per pixel.
    pub transmittance: Vec<f64>,
    pub valid_mask: Option<Vec<bool>>,
}

/// Gradients mirroring the cloud layout, plus per-splat screen-space mean
/// gradient norms (used for densification).
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub positions: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<[f64; 3]>,
    pub mean2d_norms: Vec<f64>,
}

impl GradientBundle {
    pub fn zeros(n: usize) -> Self {
        Self {
            positions: vec![[0.0; 3]; n],
            rotations: vec![[0.0; 4]; n],
            log_scales: vec![[0.0; 3]; n],
            opacity_logits: vec![0.0; n],
            color_logits: vec![[0.0; 3]; n],
            mean2d_norms: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &GradientBundle, s: f64) {
        fn axpy<const N: usize>(a: &mut [[f64; N]], b: &[[f64; N]], s: f64) {
            for (x, y) in a.iter_mut().zip(b) {
                for k in 0..N {
                    x[k] += s * y[k];
                }
            }
        }
        axpy(&mut self.positions, &other.positions, s);
        axpy(&mut self.rotations, &other.rotations, s);
        axpy(&mut self.log_scales, &other.log_scales, s);
        axpy(&mut self.color_logits, &other.color_logits, s);
        for (x, y) in self.opacity_logits.iter_mut().zip(&other.opacity_logits) {
            *x += s * y;
        }
        for (x, y) in self.mean2d_norms.iter_mut().zip(&other.mean2d_norms) {
            *x += s.abs() * y;
        }
    }

    /// Flattened groups in cloud order: positions, rotations, log-scales,
    /// opacity logits, color logits.
    pub fn groups(&self) -> [Vec<f64>; 5] {
        [
            self.positions.iter().flatten().copied().collect(),
            self.rotations.iter().flatten().copied().collect(),
            self.log_scales.iter().flatten().copied().collect(),
            self.opacity_logits.clone(),
            self.color_logits.iter().flatten().copied().collect(),
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.groups().iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Everything the backward pass needs from one view's forward pass.
#[derive(Clone, Debug)]
pub struct ViewState {
    pub pose: Pose,
    /// Visible splats sorted front to back.
    pub splats: Vec<(ProjectedSplat, ProjectionCache)>,
    /// Per tile, indices into `splats` in blend order.
    pub tiles: Vec<Vec<u32>>,
    /// Final transmittance per pixel, filled by the forward pass.
    pub transmittance: Vec<f64>,
    /// Per pixel, how many entries of its tile list were blended before
    /// early termination.
    pub stop: Vec<u32>,
}

/// Result of a (possibly multi-pose) forward pass. `views` is empty when the
/// forward state was not kept.
#[derive(Clone, Debug)]
pub struct Forward {
    pub rendered: RenderedImage,
    pub views: Vec<ViewState>,
    pub intrinsics: Intrinsics,
    pub options: RenderOptions,
    num_splats: usize,
}

struct TileGrid {
    size: usize,
    nx: usize,
    ny: usize,
}

impl TileGrid {
    fn new(k: &Intrinsics, size: usize) -> Self {
        Self {
            size,
            nx: k.width.div_ceil(size),
            ny: k.height.div_ceil(size),
        }
    }

    fn count(&self) -> usize {
        self.nx * self.ny
    }

    /// Pixel rectangle `[x0, x1) × [y0, y1)` of a tile.
    fn rect(&self, tile: usize, k: &Intrinsics) -> (usize, usize, usize, usize) {
        let (tx, ty) = (tile % self.nx, tile / self.nx);
        let x0 = tx * self.size;
        let y0 = ty * self.size;
        (x0, y0, (x0 + self.size).min(k.width), (y0 + self.size).min(k.height))
    }
}

fn prepare_view(cloud: &GaussianCloud, pose: &Pose, k: &Intrinsics, opts: &RenderOptions) -> ViewState {
    let mut splats: Vec<(ProjectedSplat, ProjectionCache)> = (0..cloud.len())
        .into_par_iter()
        .filter_map(|i| project(cloud, i, pose, k))
        .collect();
    splats.sort_by(|a, b| a.0.depth.total_cmp(&b.0.depth).then(a.0.index.cmp(&b.0.index)));

    let grid = TileGrid::new(k, opts.tile_size.max(1));
    let mut tiles = vec![Vec::new(); grid.count()];
    for (j, (p, _)) in splats.iter().enumerate() {
        let Some((x0, y0, x1, y1)) = p.pixel_bounds(k.width, k.height) else {
            continue;
        };
        for ty in y0 / grid.size..=y1 / grid.size {
            for tx in x0 / grid.size..=x1 / grid.size {
                tiles[ty * grid.nx + tx].push(j as u32);
            }
        }
    }
    ViewState {
        pose: *pose,
        splats,
        tiles,
        transmittance: Vec::new(),
        stop: Vec::new(),
    }
}

/// Transmittance below which a pixel always stops, even with early
/// termination disabled, so that the backward pass can divide it back out.
const MIN_TRANSMITTANCE: f64 = 1e-290;

/// Screen-space splat packed for the blend loops, with its footprint clipped
/// to one tile.
#[derive(Clone, Copy, Debug)]
struct Kernel {
    mean: [f64; 2],
    /// Conic entries `[m00, m01, m11]`.
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
    /// Inclusive tile-local pixel rectangle.
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
}

impl Kernel {
    /// Row terms of the exponent for pixel-center row `py`.
    #[inline(always)]
    fn row(&self, py: f64) -> (f64, f64, f64) {
        let dy = py - self.mean[1];
        (dy, 2.0 * self.conic[1] * dy, self.conic[2] * dy * dy)
    }

    /// `(alpha, g, dx)` at pixel-center column `px` of a row; alpha is zero
    /// outside the footprint. Forward and backward both go through here so
    /// they agree on every footprint test.
    #[inline(always)]
    fn alpha(&self, px: f64, bdy: f64, cdy: f64) -> (f64, f64, f64) {
        let dx = px - self.mean[0];
        // conic is positive definite, so a positive exponent is rounding
        let power = (-0.5 * (self.conic[0] * dx * dx + bdy * dx + cdy)).min(0.0);
        let g = power.exp();
        let raw = self.opacity * g;
        let alpha = if raw >= ALPHA_EPS { raw.min(ALPHA_MAX) } else { 0.0 };
        (alpha, g, dx)
    }
}

/// A tile's pixel rectangle and its splats in blend order.
struct TileWork {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    /// Pixel-center coordinates of the tile's columns and rows.
    xs: Vec<f64>,
    ys: Vec<f64>,
    kernels: Vec<Kernel>,
}

impl TileWork {
    fn new(view: &ViewState, k: &Intrinsics, grid: &TileGrid, tile: usize) -> Self {
        let (x0, y0, x1, y1) = grid.rect(tile, k);
        let kernels = view.tiles[tile]
            .iter()
            .map(|&j| {
                let p = &view.splats[j as usize].0;
                let (bx0, by0, bx1, by1) = p.pixel_bounds(k.width, k.height).expect("binned splats have bounds");
                Kernel {
                    mean: [p.mean2d.x, p.mean2d.y],
                    conic: [p.conic[(0, 0)], p.conic[(0, 1)], p.conic[(1, 1)]],
                    opacity: p.opacity,
                    color: p.color,
                    x0: bx0.max(x0) - x0,
                    y0: by0.max(y0) - y0,
                    x1: bx1.min(x1 - 1) - x0,
                    y1: by1.min(y1 - 1) - y0,
                }
            })
            .collect();
        Self {
            x0,
            y0,
            w: x1 - x0,
            h: y1 - y0,
            xs: (x0..x1).map(|x| x as f64 + 0.5).collect(),
            ys: (y0..y1).map(|y| y as f64 + 0.5).collect(),
            kernels,
        }
    }
}

/// Per-pixel blend state of one tile, channel-planar.
struct TileBlend {
    rgb: [Vec<f64>; 3],
    t: Vec<f64>,
    /// Blended list length per pixel.
    stop: Vec<f64>,
}

fn blend_tile(work: &TileWork, opts: &RenderOptions) -> TileBlend {
    let n = work.w * work.h;
    let len = work.kernels.len() as f64;
    let thr = opts.early_stop_transmittance.max(MIN_TRANSMITTANCE);
    let mut out = TileBlend {
        rgb: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        t: vec![1.0; n],
        stop: vec![len; n],
    };
    let [red, green, blue] = &mut out.rgb;
    for (j, p) in work.kernels.iter().enumerate() {
        let jf = (j + 1) as f64;
        for ly in p.y0..=p.y1 {
            let (_, bdy, cdy) = p.row(work.ys[ly]);
            let span = ly * work.w + p.x0..=ly * work.w + p.x1;
            let cells = work.xs[p.x0..=p.x1]
                .iter()
                .zip(&mut red[span.clone()])
                .zip(&mut green[span.clone()])
                .zip(&mut blue[span.clone()])
                .zip(&mut out.t[span.clone()])
                .zip(&mut out.stop[span]);
            for (((((&px, r), g), b), t), stop) in cells {
                let (a, _, _) = p.alpha(px, bdy, cdy);
                let alpha = if *stop == len { a } else { 0.0 };
                let w = alpha * *t;
                *r += p.color[0] * w;
                *g += p.color[1] * w;
                *b += p.color[2] * w;
                let tn = *t * (1.0 - alpha);
                *stop = if alpha > 0.0 && tn < thr { jf } else { *stop };
                *t = tn;
            }
        }
    }
    out
}

/// Renders one view and records its transmittance and stop counts.
fn forward_view(view: &mut ViewState, k: &Intrinsics, opts: &RenderOptions) -> Vec<f64> {
    let grid = TileGrid::new(k, opts.tile_size.max(1));
    let per_tile: Vec<(TileWork, TileBlend)> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let work = TileWork::new(view, k, &grid, tile);
            let blend = blend_tile(&work, opts);
            (work, blend)
        })
        .collect();
    let npx = k.width * k.height;
    let mut rgb = vec![0.0; npx * 3];
    view.transmittance = vec![1.0; npx];
    view.stop = vec![0; npx];
    for (work, blend) in &per_tile {
        for ly in 0..work.h {
            for lx in 0..work.w {
                let li = ly * work.w + lx;
                let i = (work.y0 + ly) * k.width + work.x0 + lx;
                for c in 0..3 {
                    rgb[i * 3 + c] = blend.rgb[c][li];
                }
                view.transmittance[i] = blend.t[li];
                view.stop[i] = blend.stop[li] as u32;
            }
        }
    }
    rgb
}

#[derive(Clone, Copy, Default)]
struct ScreenGrad {
    mean2d: Vector2<f64>,
    conic: Matrix2<f64>,
    opacity_logit: f64,
    color: [f64; 3],
}

fn backward_view(
    view: &ViewState,
    k: &Intrinsics,
    opts: &RenderOptions,
    upstream: &Image,
    weight: f64,
    out: &mut GradientBundle,
) {
    let grid = TileGrid::new(k, opts.tile_size.max(1));
    let partials: Vec<Vec<ScreenGrad>> = (0..grid.count())
        .into_par_iter()
        .map(|tile| {
            let work = TileWork::new(view, k, &grid, tile);
            let n = work.w * work.h;
            let mut local = vec![ScreenGrad::default(); work.kernels.len()];
            let mut d_pix = vec![[0.0; 3]; n];
            let mut t = vec![0.0; n];
            let mut stop = vec![0u32; n];
            let mut any = false;
            for ly in 0..work.h {
                for lx in 0..work.w {
                    let li = ly * work.w + lx;
                    let i = (work.y0 + ly) * k.width + work.x0 + lx;
                    d_pix[li] = [0, 1, 2].map(|c| upstream.data[i * 3 + c] * weight);
                    t[li] = view.transmittance[i];
                    stop[li] = view.stop[i];
                    any |= d_pix[li].iter().any(|&v| v != 0.0);
                }
            }
            if !any {
                return local;
            }
            let mut behind = vec![[0.0; 3]; n];
            // back to front; T before each splat is recovered by dividing out
            // its (1 − alpha) from the transmittance behind it
            for (j, p) in work.kernels.iter().enumerate().rev() {
                let sg = &mut local[j];
                for ly in p.y0..=p.y1 {
                    let (dy, bdy, cdy) = p.row(work.ys[ly]);
                    for lx in p.x0..=p.x1 {
                        let i = ly * work.w + lx;
                        let dp = d_pix[i];
                        if j as u32 >= stop[i] || dp == [0.0; 3] {
                            continue;
                        }
                        let (alpha, g, dx) = p.alpha(work.xs[lx], bdy, cdy);
                        if alpha == 0.0 {
                            continue;
                        }
                        let t_i = t[i] / (1.0 - alpha);
                        t[i] = t_i;
                        let b = &mut behind[i];
                        let mut d_alpha = 0.0;
                        for c in 0..3 {
                            sg.color[c] += alpha * t_i * dp[c];
                            d_alpha += t_i * (p.color[c] - b[c]) * dp[c];
                            b[c] = p.color[c] * alpha + (1.0 - alpha) * b[c];
                        }
                        if p.opacity * g >= ALPHA_MAX {
                            continue; // clamped: alpha is constant here
                        }
                        sg.opacity_logit += d_alpha * g * p.opacity * (1.0 - p.opacity);
                        let d_power = d_alpha * p.opacity * g;
                        // power = -½ dᵀ M d, d = pixel - mean
                        let [ca, cb, cc] = p.conic;
                        sg.mean2d += Vector2::new(ca * dx + cb * dy, cb * dx + cc * dy) * d_power;
                        let h = -0.5 * d_power;
                        sg.conic += Matrix2::new(dx * dx * h, dx * dy * h, dx * dy * h, dy * dy * h);
                    }
                }
            }
            local
        })
        .collect();

    let mut screen = vec![ScreenGrad::default(); view.splats.len()];
    for (tile, local) in partials.iter().enumerate() {
        for (li, sg) in local.iter().enumerate() {
            let acc = &mut screen[view.tiles[tile][li] as usize];
            acc.mean2d += sg.mean2d;
            acc.conic += sg.conic;
            acc.opacity_logit += sg.opacity_logit;
            for c in 0..3 {
                acc.color[c] += sg.color[c];
            }
        }
    }

    let geo: Vec<_> = view
        .splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|((p, cache), sg)| project_backward(cache, p, k, &sg.mean2d, &sg.conic))
        .collect();
    for (((p, _), sg), gg) in view.splats.iter().zip(&screen).zip(&geo) {
        let i = p.index;
        for a in 0..3 {
            out.positions[i][a] += gg.position[a];
            out.log_scales[i][a] += gg.log_scale[a];
            out.color_logits[i][a] += sg.color[a] * p.color[a] * (1.0 - p.color[a]);
        }
        for a in 0..4 {
            out.rotations[i][a] += gg.rotation[a];
        }
        out.opacity_logits[i] += sg.opacity_logit;
        out.mean2d_norms[i] += sg.mean2d.norm();
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Renderer {
    pub options: RenderOptions,
}

impl Renderer {
    pub fn new(options: RenderOptions) -> Self {
        Self { options }
    }

    /// Mean of the single-pose renders at `poses`, keeping forward state.
    pub fn forward(&self, cloud: &GaussianCloud, poses: &[Pose], k: &Intrinsics) -> Result<Forward> {
        if poses.is_empty() {
            return Err(Error::Input("at least one pose is required".into()));
        }
        k.validate()?;
        let mut views: Vec<ViewState> = poses.iter().map(|p| prepare_view(cloud, p, k, &self.options)).collect();
        let npx = k.width * k.height;
        let mut rgb = vec![0.0; npx * 3];
        let mut trans = vec![0.0; npx];
        let inv = 1.0 / poses.len() as f64;
        for v in views.iter_mut() {
            let c = forward_view(v, k, &self.options);
            if poses.len() == 1 {
                rgb = c;
                trans.clone_from(&v.transmittance);
            } else {
                for (a, b) in rgb.iter_mut().zip(&c) {
                    *a += b * inv;
                }
                for (a, b) in trans.iter_mut().zip(&v.transmittance) {
                    *a += b * inv;
                }
            }
        }
        Ok(Forward {
            rendered: RenderedImage {
                image: Image::from_vec(k.width, k.height, 3, rgb)?,
                transmittance: trans,
                valid_mask: None,
            },
            views,
            intrinsics: *k,
            options: self.options,
            num_splats: cloud.len(),
        })
    }

    pub fn render(&self, cloud: &GaussianCloud, pose: &Pose, k: &Intrinsics) -> Result<RenderedImage> {
        Ok(self.forward(cloud, std::slice::from_ref(pose), k)?.rendered)
    }

    /// Gradients of `Σ upstream · pixels` w.r.t. every splat parameter.
    pub fn backward(&self, cloud: &GaussianCloud, fwd: &Forward, upstream: &Image) -> Result<GradientBundle> {
        if fwd.views.is_empty() {
            return Err(Error::Input("missing forward cache".into()));
        }
        if fwd.num_splats != cloud.len() {
            return Err(Error::Input(format!(
                "forward cache was built for {} splats, cloud has {}",
                fwd.num_splats,
                cloud.len()
            )));
        }
        let k = &fwd.intrinsics;
        if upstream.width != k.width || upstream.height != k.height || upstream.channels != 3 {
            return Err(Error::Shape(format!(
                "upstream gradient {}x{}x{} vs render {}x{}x3",
                upstream.width, upstream.height, upstream.channels, k.width, k.height
            )));
        }
        let mut out = GradientBundle::zeros(cloud.len());
        let weight = 1.0 / fwd.views.len() as f64;
        for v in &fwd.views {
            backward_view(v, k, &fwd.options, upstream, weight, &mut out);
        }
        Ok(out)
    }
}

pub fn render(cloud: &GaussianCloud, pose: &Pose, k: &Intrinsics) -> Result<RenderedImage> {
    Renderer::default().render(cloud, pose, k)
}

/// Mean of `n = keyframe_poses.len()` single-pose renders, `1 <= n <= 9`.
pub fn render_accumulated(cloud: &GaussianCloud, keyframe_poses: &[Pose], k: &Intrinsics) -> Result<RenderedImage> {
    Ok(forward_accumulated(&Renderer::default(), cloud, keyframe_poses, k)?.rendered)
}

pub fn forward_accumulated(
    renderer: &Renderer,
    cloud: &GaussianCloud,
    keyframe_poses: &[Pose],
    k: &Intrinsics,
) -> Result<Forward> {
    let n = keyframe_poses.len();
    if !(1..=MAX_KEYFRAMES).contains(&n) {
        return Err(Error::config("n_keyframes", format!("must lie in 1..={MAX_KEYFRAMES}, got {n}")));
    }
    renderer.forward(cloud, keyframe_poses, k)
}

/// Pose used to render an interval image: the trajectory pose at the median
/// interval midpoint over valid pixels.
pub fn interval_pose(interval: &IntervalImage, trajectory: &CameraTrajectory) -> Result<Pose> {
    let t = interval
        .median_mid_time()
        .ok_or_else(|| Error::Input("interval image has no valid pixels".into()))?;
    Ok(trajectory.pose_at(t))
}

pub fn forward_interval(
    renderer: &Renderer,
    cloud: &GaussianCloud,
    interval: &IntervalImage,
    trajectory: &CameraTrajectory,
) -> Result<Forward> {
    let pose = interval_pose(interval, trajectory)?;
    let mut fwd = renderer.forward(cloud, &[pose], &trajectory.intrinsics)?;
    fwd.rendered.valid_mask = Some(interval.valid.clone());
    Ok(fwd)
}

pub fn render_interval(
    cloud: &GaussianCloud,
    interval: &IntervalImage,
    trajectory: &CameraTrajectory,
) -> Result<RenderedImage> {
    Ok(forward_interval(&Renderer::default(), cloud, interval, trajectory)?.rendered)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gauss_model::{logit, Splat};

    fn k() -> Intrinsics {
        Intrinsics::centered(16, 16, 20.0)
    }

    fn splat_at_pixel_center(z: f64, opacity_logit: f64, color: [f64; 3], log_scale: f64) -> Splat {
        // pixel (8, 8) center is at (8.5, 8.5); cx = 8
        let x = 0.5 * z / 20.0;
        Splat {
            position: [x, x, z],
            rotation: [1.0, 0.0, 0.0, 0.0],
            log_scale: [log_scale; 3],
            opacity_logit,
            color_logit: color.map(logit),
        }
    }

    #[test]
    fn empty_cloud_is_black() {
        let r = render(&GaussianCloud::default(), &Pose::identity(), &k()).unwrap();
        assert!(r.image.data.iter().all(|&v| v == 0.0));
        assert!(r.transmittance.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn single_opaque_splat_clamps_to_099() {
        let c = [0.2, 0.5, 0.7];
        let cloud = GaussianCloud::from_splats([splat_at_pixel_center(3.0, 40.0, c, -2.0)]);
        let r = render(&cloud, &Pose::identity(), &k()).unwrap();
        for ch in 0..3 {
            assert!((r.image.get(8, 8, ch) - 0.99 * c[ch]).abs() < 1e-9);
        }
    }

    #[test]
    fn two_half_alpha_splats() {
        let (c1, c2) = ([0.9, 0.1, 0.3], [0.2, 0.8, 0.6]);
        let cloud = GaussianCloud::from_splats([
            splat_at_pixel_center(4.0, 0.0, c2, -2.0),
            splat_at_pixel_center(2.0, 0.0, c1, -2.0),
        ]);
        let r = render(&cloud, &Pose::identity(), &k()).unwrap();
        for ch in 0..3 {
            let expected = 0.5 * c1[ch] + 0.25 * c2[ch];
            assert!((r.image.get(8, 8, ch) - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulated_keyframe_bounds() {
        let cloud = GaussianCloud::from_splats([splat_at_pixel_center(3.0, 0.0, [0.5; 3], -2.0)]);
        assert!(render_accumulated(&cloud, &[], &k()).is_err());
        assert!(render_accumulated(&cloud, &[Pose::identity(); 10], &k()).is_err());
        let one = render_accumulated(&cloud, &[Pose::identity()], &k()).unwrap();
        assert_eq!(one, render(&cloud, &Pose::identity(), &k()).unwrap());
        let same = render_accumulated(&cloud, &[Pose::identity(); 5], &k()).unwrap();
        for (a, b) in same.image.data.iter().zip(&one.image.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_requires_cache() {
        let cloud = GaussianCloud::from_splats([splat_at_pixel_center(3.0, 0.0, [0.5; 3], -2.0)]);
        let r = Renderer::default();
        let mut fwd = r.forward(&cloud, &[Pose::identity()], &k()).unwrap();
        fwd.views.clear();
        assert!(r.backward(&cloud, &fwd, &Image::new(16, 16, 3)).is_err());
    }

    #[test]
    fn zero_upstream_gives_zero_bundle() {
        let cloud = GaussianCloud::from_splats([splat_at_pixel_center(3.0, 0.3, [0.5; 3], -2.0)]);
        let r = Renderer::default();
        let fwd = r.forward(&cloud, &[Pose::identity()], &k()).unwrap();
        let g = r.backward(&cloud, &fwd, &Image::new(16, 16, 3)).unwrap();
        assert_eq!(g, GradientBundle::zeros(1));
    }

    #[test]
    fn color_gradient_single_term() {
        let logit_c = 0.4;
        let mut s = splat_at_pixel_center(3.0, 40.0, [0.5; 3], -2.0);
        s.color_logit = [logit_c; 3];
        let cloud = GaussianCloud::from_splats([s]);
        let r = Renderer::default();
        let fwd = r.forward(&cloud, &[Pose::identity()], &k()).unwrap();
        let mut up = Image::new(16, 16, 3);
        up.set(8, 8, 0, 1.0);
        let g = r.backward(&cloud, &fwd, &up).unwrap();
        let sig = crate::gauss_model::sigmoid(logit_c);
        assert!((g.color_logits[0][0] - 0.99 * sig * (1.0 - sig)).abs() < 1e-9);
        assert_eq!(g.color_logits[0][1], 0.0);
        // clamped alpha: opacity and geometry receive nothing
        assert_eq!(g.opacity_logits[0], 0.0);
        assert_eq!(g.positions[0], [0.0; 3]);
    }
}
