//! Software Gaussian-splat renderer.
//!
//! Rendering runs in two stages: a projection pass that turns every Gaussian into a
//! screen-space quad (center, conic, extent, color, opacity), and a compositing pass
//! that depth-sorts the quads globally and alpha-blends them front to back over
//! 16x16 pixel tiles. Both passes run in parallel and are bit-identical to serial
//! execution: each pixel is produced by exactly one tile, which walks its quads in
//! global sort order.
//!
//! [`render_oracle`] is the brute-force reference: every splat at every pixel, no
//! bounding quads, no early termination.

mod scene;
mod sh;

pub use scene::random_scene;
pub use sh::{dc_from_color, eval_sh, sh_basis};

use nalgebra::{Matrix2, Matrix2x3, Matrix3, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::metrics::Image;
use crate::splat::{Camera, Gaussian, SplatSet};

/// Splats at or in front of this camera-space depth are culled.
pub const NEAR_PLANE: f64 = 0.01;
/// Added to both diagonal entries of the projected covariance (px^2).
pub const COV_FLOOR: f64 = 0.3;
/// Upper bound on a single splat's opacity at any pixel.
pub const ALPHA_MAX: f64 = 0.999;

#[derive(Clone, Debug, PartialEq)]
pub struct RenderOptions {
    /// Minimum quad half-size in units of the projected standard deviation along the
    /// dominant axis.
    pub extent_sigmas: f64,
    /// The quad is widened until the splat's opacity at its border falls below this
    /// value. Zero keeps the plain `extent_sigmas` rule.
    pub alpha_cutoff: f64,
    /// Compositing stops once transmittance drops below this value.
    pub min_transmittance: f64,
    pub tile_size: usize,
    /// Thread count for the parallel passes; `None` uses the global rayon pool.
    pub workers: Option<usize>,
}

impl Default for RenderOptions {
    fn default() -> Self {
        RenderOptions {
            extent_sigmas: 3.0,
            alpha_cutoff: 1e-7,
            min_transmittance: 1e-6,
            tile_size: 16,
            workers: None,
        }
    }
}

impl RenderOptions {
    /// Plain 3-sigma quads with early termination at `T < 1e-4`. Faster, but differs
    /// from the oracle by up to about `1e-2` where bright splats are truncated.
    pub fn fast() -> Self {
        RenderOptions {
            alpha_cutoff: 0.0,
            min_transmittance: 1e-4,
            ..Default::default()
        }
    }

    /// Quad half-size in standard deviations for a splat of opacity `delta`.
    pub fn extent_for(&self, delta: f64) -> f64 {
        if self.alpha_cutoff > 0.0 && delta > self.alpha_cutoff {
            self.extent_sigmas
                .max((2.0 * (delta.min(ALPHA_MAX) / self.alpha_cutoff).ln()).sqrt())
        } else {
            self.extent_sigmas
        }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = Some(workers);
        self
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn full(width: usize, height: usize) -> Self {
        PixelRect {
            x0: 0,
            y0: 0,
            x1: width,
            y1: height,
        }
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectedQuad {
    pub center_px: [f64; 2],
    /// Upper triangle `(a, b, c)` of the inverse projected covariance.
    pub conic: [f64; 3],
    pub extent_px: f64,
    pub depth: f64,
    pub color: [f64; 3],
    pub delta: f64,
    /// Index of the source Gaussian; breaks depth ties.
    pub index: u32,
    /// Pixels whose centers fall inside the quad, clipped to the image.
    pub rect: PixelRect,
}

/// The 2x3 perspective Jacobian at camera-space point `p_cam`, or `None` when the point
/// is not in front of the near plane.
pub fn camera_jacobian(p_cam: &Vector3<f64>, cam: &Camera, near: f64) -> Option<Matrix2x3<f64>> {
    let z = p_cam.z;
    if !(z > near) {
        return None;
    }
    let z2 = z * z;
    Some(Matrix2x3::new(
        cam.fx / z,
        0.0,
        -cam.fx * p_cam.x / z2,
        0.0,
        cam.fy / z,
        -cam.fy * p_cam.y / z2,
    ))
}

/// `J R_c Sigma R_c^T J^T` plus the covariance floor on the diagonal. The result is
/// exactly symmetric.
pub fn projected_covariance(cov: &Matrix3<f64>, jac: &Matrix2x3<f64>, cam_rot: &Matrix3<f64>) -> Result<Matrix2<f64>> {
    let m = jac * cam_rot;
    let t = m * cov;
    let a = t.row(0).dot(&m.row(0)) + COV_FLOOR;
    let b = t.row(0).dot(&m.row(1));
    let c = t.row(1).dot(&m.row(1)) + COV_FLOOR;
    if !(a.is_finite() && b.is_finite() && c.is_finite()) {
        return Err(Error::Numeric("projected covariance is not finite".into()));
    }
    Ok(Matrix2::new(a, b, b, c))
}

/// Projected 2D covariance of a Gaussian that lies in front of the camera.
pub fn project_covariance(g: &Gaussian, cam: &Camera) -> Result<Matrix2<f64>> {
    let p_cam = cam.to_camera(&crate::math::vec3_f64(g.mu));
    let jac = camera_jacobian(&p_cam, cam, NEAR_PLANE)
        .ok_or_else(|| Error::validation(format!("gaussian at depth {} is behind the near plane", p_cam.z)))?;
    let cov = g.covariance();
    if cov.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("gaussian covariance is not finite".into()));
    }
    projected_covariance(&cov, &jac, &cam.rot)
}

/// Opacity of a splat at pixel position `p`: `delta * exp(-d^T conic d / 2)`, clamped to
/// [`ALPHA_MAX`].
#[inline]
pub fn splat_alpha(quad: &ProjectedQuad, p: [f64; 2]) -> f64 {
    let dx = p[0] - quad.center_px[0];
    let dy = p[1] - quad.center_px[1];
    let [a, b, c] = quad.conic;
    let power = (-0.5 * (a * dx * dx + 2.0 * b * dx * dy + c * dy * dy)).min(0.0);
    (quad.delta * power.exp()).min(ALPHA_MAX)
}

#[inline]
fn pixel_center(x: usize, y: usize) -> [f64; 2] {
    [x as f64 + 0.5, y as f64 + 0.5]
}

/// Projects one Gaussian. Returns `None` for splats behind the near plane, with a
/// degenerate footprint, or entirely outside the image.
pub fn project_gaussian(g: &Gaussian, index: u32, cam: &Camera, opts: &RenderOptions) -> Option<ProjectedQuad> {
    let quad = project_with_extent(g, index, cam, opts.extent_for(g.delta as f64))?;
    let r = quad.extent_px;
    let clip = |lo: f64, hi: f64, n: usize| -> (usize, usize) {
        // pixel i is covered when lo <= i + 0.5 <= hi
        let a = (lo - 0.5).ceil().max(0.0);
        let b = ((hi - 0.5).floor() + 1.0).min(n as f64);
        if b <= a {
            (0, 0)
        } else {
            (a as usize, b as usize)
        }
    };
    let (x0, x1) = clip(quad.center_px[0] - r, quad.center_px[0] + r, cam.width);
    let (y0, y1) = clip(quad.center_px[1] - r, quad.center_px[1] + r, cam.height);
    let rect = PixelRect { x0, y0, x1, y1 };
    if rect.is_empty() {
        return None;
    }
    Some(ProjectedQuad { rect, ..quad })
}

/// Projection without the bounding rectangle (rect covers the whole image).
fn project_unbounded(g: &Gaussian, index: u32, cam: &Camera) -> Option<ProjectedQuad> {
    project_with_extent(g, index, cam, RenderOptions::default().extent_sigmas)
}

fn project_with_extent(g: &Gaussian, index: u32, cam: &Camera, extent_sigmas: f64) -> Option<ProjectedQuad> {
    let mu = crate::math::vec3_f64(g.mu);
    let p_cam = cam.to_camera(&mu);
    let jac = camera_jacobian(&p_cam, cam, NEAR_PLANE)?;
    let cov = projected_covariance(&g.covariance(), &jac, &cam.rot).ok()?;
    let (a, b, c) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * c - b * b;
    if !(det > 0.0) {
        return None;
    }
    let conic = [c / det, -b / det, a / det];
    let half_tr = 0.5 * (a + c);
    let lambda_max = half_tr + (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let center_px = [cam.fx * p_cam.x / p_cam.z + cam.cx, cam.fy * p_cam.y / p_cam.z + cam.cy];
    let view_dir = (mu - cam.center()).normalize();
    Some(ProjectedQuad {
        center_px,
        conic,
        extent_px: extent_sigmas * lambda_max.sqrt(),
        depth: p_cam.z,
        color: eval_sh(&g.sh, &view_dir),
        delta: g.delta as f64,
        index,
        rect: PixelRect::full(cam.width, cam.height),
    })
}

/// Per-pixel RGB in `[0, 1]` and accumulated opacity `1 - T`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBuffer {
    pub width: usize,
    pub height: usize,
    pub rgb: Vec<[f64; 3]>,
    pub alpha: Vec<f64>,
}

impl FrameBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        FrameBuffer {
            width,
            height,
            rgb: vec![[0.0; 3]; width * height],
            alpha: vec![0.0; width * height],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        self.rgb[y * self.width + x]
    }

    /// RGB channels as a 3-channel image.
    pub fn rgb_image(&self) -> Image {
        Image::from_fn(self.width, self.height, 3, |x, y, c| self.rgb[y * self.width + x][c])
    }

    pub fn alpha_image(&self) -> Image {
        Image::from_fn(self.width, self.height, 1, |x, y, _| self.alpha[y * self.width + x])
    }

    /// Premultiplied color over an opaque background: `rgb + (1 - alpha) * bg`.
    pub fn over_background(&self, bg: &Image) -> Result<Image> {
        if bg.width != self.width || bg.height != self.height || bg.channels != 3 {
            return Err(Error::validation("background must be a 3-channel image of the frame size"));
        }
        Ok(Image::from_fn(self.width, self.height, 3, |x, y, c| {
            let i = y * self.width + x;
            (self.rgb[i][c] + (1.0 - self.alpha[i]) * bg.get(x, y, c)).clamp(0.0, 1.0)
        }))
    }

    /// Binary PPM (P6, maxval 255).
    pub fn to_ppm(&self) -> Vec<u8> {
        self.rgb_image().to_pnm()
    }

    /// Binary PGM (P5, maxval 255) of the alpha channel.
    pub fn alpha_pgm(&self) -> Vec<u8> {
        self.alpha_image().to_pnm()
    }
}

fn check_sorted(quads: &[ProjectedQuad]) -> Result<()> {
    for (i, w) in quads.windows(2).enumerate() {
        let ok = match w[0].depth.total_cmp(&w[1].depth) {
            std::cmp::Ordering::Less => true,
            std::cmp::Ordering::Equal => w[0].index < w[1].index,
            std::cmp::Ordering::Greater => false,
        };
        if !ok {
            return Err(Error::validation(format!("quads not sorted front-to-back at position {}", i + 1)));
        }
    }
    Ok(())
}

pub fn sort_quads(quads: &mut [ProjectedQuad]) {
    quads.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
}

struct PixelOut {
    rgb: [f64; 3],
    transmittance: f64,
    weight: f64,
}

#[inline]
fn shade_pixel<'a>(quads: impl Iterator<Item = &'a ProjectedQuad>, x: usize, y: usize, min_t: f64, bounded: bool) -> PixelOut {
    let p = pixel_center(x, y);
    let mut rgb = [0.0f64; 3];
    let mut t = 1.0f64;
    let mut weight = 0.0f64;
    for q in quads {
        if bounded && !q.rect.contains(x, y) {
            continue;
        }
        let a = splat_alpha(q, p);
        if a <= 0.0 {
            continue;
        }
        let w = t * a;
        for c in 0..3 {
            rgb[c] += w * q.color[c];
        }
        weight += w;
        t *= 1.0 - a;
        if t < min_t {
            break;
        }
    }
    PixelOut {
        rgb,
        transmittance: t,
        weight,
    }
}

fn with_pool<T: Send>(workers: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match workers {
        Some(n) => match rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build() {
            Ok(pool) => pool.install(f),
            Err(e) => {
                log::warn!("could not build a {n}-thread pool ({e}); using the global pool");
                f()
            }
        },
        None => f(),
    }
}

fn composite_tiles(quads: &[ProjectedQuad], width: usize, height: usize, opts: &RenderOptions) -> Vec<PixelOut> {
    let ts = opts.tile_size.max(1);
    let tiles_x = width.div_ceil(ts);
    let tiles_y = height.div_ceil(ts);
    let mut bins: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    for (qi, q) in quads.iter().enumerate() {
        if q.rect.is_empty() {
            continue;
        }
        for ty in q.rect.y0 / ts..=(q.rect.y1 - 1) / ts {
            for tx in q.rect.x0 / ts..=(q.rect.x1 - 1) / ts {
                bins[ty * tiles_x + tx].push(qi as u32);
            }
        }
    }
    let tiles: Vec<Vec<PixelOut>> = bins
        .par_iter()
        .enumerate()
        .map(|(ti, bin)| {
            let (tx, ty) = (ti % tiles_x, ti / tiles_x);
            let (x0, y0) = (tx * ts, ty * ts);
            let (x1, y1) = ((x0 + ts).min(width), (y0 + ts).min(height));
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            for y in y0..y1 {
                for x in x0..x1 {
                    out.push(shade_pixel(
                        bin.iter().map(|&i| &quads[i as usize]),
                        x,
                        y,
                        opts.min_transmittance,
                        true,
                    ));
                }
            }
            out
        })
        .collect();
    let mut pixels: Vec<Option<PixelOut>> = (0..width * height).map(|_| None).collect();
    for (ti, tile) in tiles.into_iter().enumerate() {
        let (tx, ty) = (ti % tiles_x, ti / tiles_x);
        let (x0, y0) = (tx * ts, ty * ts);
        let x1 = (x0 + ts).min(width);
        let tw = x1 - x0;
        for (k, px) in tile.into_iter().enumerate() {
            let (x, y) = (x0 + k % tw, y0 + k / tw);
            pixels[y * width + x] = Some(px);
        }
    }
    pixels.into_iter().map(|p| p.expect("every pixel belongs to one tile")).collect()
}

/// Front-to-back alpha compositing of depth-sorted quads.
pub fn composite(quads: &[ProjectedQuad], width: usize, height: usize, opts: &RenderOptions) -> Result<FrameBuffer> {
    check_sorted(quads)?;
    let pixels = with_pool(opts.workers, || composite_tiles(quads, width, height, opts));
    let mut fb = FrameBuffer::new(width, height);
    for (i, p) in pixels.into_iter().enumerate() {
        fb.rgb[i] = p.rgb.map(|v| v.clamp(0.0, 1.0));
        fb.alpha[i] = (1.0 - p.transmittance).clamp(0.0, 1.0);
    }
    Ok(fb)
}

/// Per-pixel compositing weight `sum_i alpha_i prod_{j<i} (1 - alpha_j)` using the same
/// traversal as [`composite`].
pub fn accumulated_weights(quads: &[ProjectedQuad], width: usize, height: usize, opts: &RenderOptions) -> Result<Vec<f64>> {
    check_sorted(quads)?;
    let pixels = with_pool(opts.workers, || composite_tiles(quads, width, height, opts));
    Ok(pixels.into_iter().map(|p| p.weight).collect())
}

/// Projection pass: visible quads sorted front to back.
pub fn project_all(gaussians: &[Gaussian], cam: &Camera, opts: &RenderOptions) -> Vec<ProjectedQuad> {
    let mut quads: Vec<ProjectedQuad> = with_pool(opts.workers, || {
        gaussians
            .par_iter()
            .enumerate()
            .filter_map(|(i, g)| project_gaussian(g, i as u32, cam, opts))
            .collect()
    });
    sort_quads(&mut quads);
    quads
}

pub fn render_gaussians(gaussians: &[Gaussian], cam: &Camera, opts: &RenderOptions) -> FrameBuffer {
    let quads = project_all(gaussians, cam, opts);
    composite(&quads, cam.width, cam.height, opts).expect("project_all returns sorted quads")
}

/// Renders a splat set with the tiled pipeline.
pub fn render(s: &SplatSet, cam: &Camera, opts: &RenderOptions) -> FrameBuffer {
    render_gaussians(&s.gaussians, cam, opts)
}

/// Brute-force reference renderer: every splat in front of the camera is evaluated at
/// every pixel in depth order, with no bounding quads and no early termination.
pub fn render_oracle(s: &SplatSet, cam: &Camera) -> FrameBuffer {
    render_oracle_gaussians(&s.gaussians, cam)
}

pub fn render_oracle_gaussians(gaussians: &[Gaussian], cam: &Camera) -> FrameBuffer {
    let mut quads: Vec<ProjectedQuad> = gaussians
        .iter()
        .enumerate()
        .filter_map(|(i, g)| project_unbounded(g, i as u32, cam))
        .collect();
    sort_quads(&mut quads);
    let mut fb = FrameBuffer::new(cam.width, cam.height);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let p = shade_pixel(quads.iter(), x, y, 0.0, false);
            let i = y * cam.width + x;
            fb.rgb[i] = p.rgb.map(|v| v.clamp(0.0, 1.0));
            fb.alpha[i] = (1.0 - p.transmittance).clamp(0.0, 1.0);
        }
    }
    fb
}
