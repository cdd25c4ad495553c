//! Tile-based differentiable splatting.
//!
//! Forward: project every primitive, sort the surviving splats globally by
//! `(depth, index)`, bin them into 16×16 tiles (each tile list inherits the
//! global order), then composite front to back per pixel. Pixel `(x, y)` is
//! sampled at its center `(x + 0.5, y + 0.5)`.
//!
//! Backward recomputes the per-pixel forward pass inside each tile, walks the
//! contributions back to front and accumulates splat-space gradients into a
//! tile-local buffer. Tile buffers are reduced in tile order, so gradients do
//! not depend on the number of worker threads.

pub mod attribute;
mod project;

use glam::{DMat3, DVec3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use project::{project, project_backward, screen_velocity, Splat2D, SplatGrad};

use crate::camera::{Camera, ColorCorrectionGrad};
use crate::cloud::GaussianCloud;
use crate::image::Image;
use crate::math::outer;
use crate::primitive::{layout, OpacityMode, ParamVec, DEFAULT_GAMMA};

pub const TILE: usize = 16;
/// Upper bound on the per-splat alpha.
pub const ALPHA_MAX: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderOptions {
    pub opacity_mode: OpacityMode,
    pub gamma: f64,
    /// Apply the camera's colour correction to the composited image.
    pub apply_cc: bool,
    /// Splats (and per-pixel contributions) below this alpha are skipped.
    pub alpha_min: f64,
    /// Compositing stops once transmittance falls below this value.
    pub transmittance_min: f64,
    /// Added to the diagonal of every projected covariance, in px².
    pub low_pass: f64,
    pub near: f64,
    pub background: [f64; 3],
}

impl Default for RenderOptions {
    fn default() -> Self {
        Self {
            opacity_mode: OpacityMode::Legacy,
            gamma: DEFAULT_GAMMA,
            apply_cc: false,
            alpha_min: 1.0 / 255.0,
            transmittance_min: 1e-4,
            low_pass: 0.3,
            near: 0.01,
            background: [0.0; 3],
        }
    }
}

impl RenderOptions {
    /// Same options with culling and early termination disabled, which makes
    /// the image a smooth function of every parameter (used for
    /// finite-difference checks).
    pub fn without_thresholds(mut self) -> Self {
        self.alpha_min = 0.0;
        self.transmittance_min = 0.0;
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderOutput {
    pub image: Image,
    /// Accumulated opacity `1 - Π(1 - αᵢ)`.
    pub alpha: Image,
    pub aux: Option<Image>,
}

/// Gradients produced by [`render_backward`].
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGrad {
    /// Per primitive, in parameter-vector layout. The velocity slot holds the
    /// gradient w.r.t. whichever velocity was used for rendering.
    pub params: Vec<ParamVec>,
    /// Norm of the gradient w.r.t. the projected 2D mean.
    pub mean2d_norm: Vec<f64>,
    /// Primitive survived culling in this view.
    pub visible: Vec<bool>,
    pub cc: ColorCorrectionGrad,
}

#[inline]
fn velocity_of(cloud: &GaussianCloud, velocities: Option<&[DVec3]>, i: usize) -> DVec3 {
    match velocities {
        Some(v) => v[i],
        None => cloud.primitives()[i].velocity,
    }
}

/// Projects the cloud and returns the surviving splats sorted by
/// `(depth, index)`. `velocities` overrides the stored per-primitive
/// velocities when given.
pub fn project_cloud(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
) -> Vec<Splat2D> {
    if let Some(v) = velocities {
        assert_eq!(v.len(), cloud.len(), "one velocity per primitive");
    }
    let mut splats: Vec<Splat2D> = cloud
        .primitives()
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project(g, i, velocity_of(cloud, velocities, i), cam, t, opts))
        .collect();
    splats.sort_by(|a, b| a.depth.total_cmp(&b.depth).then(a.index.cmp(&b.index)));
    splats
}

struct Tiles {
    nx: usize,
    ny: usize,
    lists: Vec<Vec<u32>>,
}

fn bin(splats: &[Splat2D], width: usize, height: usize) -> Tiles {
    let nx = width.div_ceil(TILE);
    let ny = height.div_ceil(TILE);
    let mut lists = vec![Vec::new(); nx * ny];
    let tile_range = |center: f64, r: f64, n: usize| -> Option<(usize, usize)> {
        if !r.is_finite() {
            return Some((0, n - 1));
        }
        let lo = ((center - r - 0.5) / TILE as f64).floor();
        let hi = ((center + r - 0.5) / TILE as f64).floor();
        if hi < 0.0 || lo > (n - 1) as f64 {
            return None;
        }
        Some((lo.max(0.0) as usize, (hi as usize).min(n - 1)))
    };
    for (k, s) in splats.iter().enumerate() {
        let Some((x0, x1)) = tile_range(s.mean2d[0], s.radius, nx) else { continue };
        let Some((y0, y1)) = tile_range(s.mean2d[1], s.radius, ny) else { continue };
        for ty in y0..=y1 {
            for tx in x0..=x1 {
                lists[ty * nx + tx].push(k as u32);
            }
        }
    }
    Tiles { nx, ny, lists }
}

fn tile_bounds(tile: usize, nx: usize, width: usize, height: usize) -> (usize, usize, usize, usize) {
    let (tx, ty) = (tile % nx, tile / nx);
    let x0 = tx * TILE;
    let y0 = ty * TILE;
    (x0, (x0 + TILE).min(width), y0, (y0 + TILE).min(height))
}

/// Horizontal span of one splat on one pixel row.
#[derive(Clone, Copy)]
struct Span {
    slot: u32,
    x0: f64,
    x1: f64,
}

/// Splats of a tile list that can reach row `py`, with the pixel-center
/// interval where their exponent clears `power_cut`. Everything outside the
/// span would be culled by [`composite_pixel`] anyway, so filtering by it does
/// not change any result.
fn row_spans(splats: &[Splat2D], list: &[u32], py: f64, out: &mut Vec<Span>) {
    out.clear();
    for (slot, &k) in list.iter().enumerate() {
        let s = &splats[k as usize];
        let dy = py - s.mean2d[1];
        if dy.abs() > s.radius {
            continue;
        }
        if s.power_cut == f64::NEG_INFINITY {
            out.push(Span { slot: slot as u32, x0: f64::NEG_INFINITY, x1: f64::INFINITY });
            continue;
        }
        // a·dx² + 2b·dy·dx + c·dy² + 2·cut ≤ 0
        let [a, b, c] = s.conic;
        let half_b = b * dy;
        let disc = half_b * half_b - a * (c * dy * dy + 2.0 * s.power_cut);
        if disc < 0.0 {
            continue;
        }
        let root = disc.sqrt();
        let slack = 1e-6 * (1.0 + s.radius);
        out.push(Span {
            slot: slot as u32,
            x0: s.mean2d[0] + (-half_b - root) / a - slack,
            x1: s.mean2d[0] + (-half_b + root) / a + slack,
        });
    }
}

#[inline]
fn spans_at<'a>(spans: &'a [Span], list: &'a [u32], px: f64) -> impl Iterator<Item = (usize, usize)> + 'a {
    spans
        .iter()
        .filter(move |sp| px >= sp.x0 && px <= sp.x1)
        .map(move |sp| (sp.slot as usize, list[sp.slot as usize] as usize))
}

/// One splat's contribution at one pixel.
#[derive(Clone, Copy)]
struct Hit {
    slot: usize,
    alpha: f64,
    falloff: f64,
    transmittance: f64,
    dx: f64,
    dy: f64,
    saturated: bool,
}

/// Front-to-back compositing of `order` (pairs of tile-list slot and index
/// into `splats`) at pixel center `(px, py)`. Returns colour (before
/// background) and final transmittance; `visit` sees every contributing splat.
#[inline]
fn composite_pixel(
    splats: &[Splat2D],
    order: impl Iterator<Item = (usize, usize)>,
    px: f64,
    py: f64,
    opts: &RenderOptions,
    mut visit: impl FnMut(Hit),
) -> ([f64; 3], f64) {
    let mut color = [0.0; 3];
    let mut trans = 1.0;
    for (slot, k) in order {
        let s = &splats[k];
        let dx = px - s.mean2d[0];
        let dy = py - s.mean2d[1];
        let [a, b, c] = s.conic;
        let power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy;
        if power > 0.0 || power < s.power_cut {
            continue;
        }
        let falloff = power.exp();
        let raw = s.alpha_base * falloff;
        if raw < opts.alpha_min || raw <= 0.0 {
            continue;
        }
        let saturated = raw > ALPHA_MAX;
        let alpha = if saturated { ALPHA_MAX } else { raw };
        let w = alpha * trans;
        for ch in 0..3 {
            color[ch] += s.color[ch] * w;
        }
        visit(Hit {
            slot,
            alpha,
            falloff,
            transmittance: trans,
            dx,
            dy,
            saturated,
        });
        trans *= 1.0 - alpha;
        if trans < opts.transmittance_min {
            break;
        }
    }
    (color, trans)
}

#[inline]
fn finish_pixel(color: [f64; 3], trans: f64, cam: &Camera, opts: &RenderOptions) -> [f64; 3] {
    let mut c = [0.0; 3];
    for ch in 0..3 {
        c[ch] = color[ch] + trans * opts.background[ch];
    }
    if opts.apply_cc {
        cam.cc.apply(c)
    } else {
        c
    }
}

/// Composites already projected and sorted splats through the tiled path.
pub fn composite(splats: &[Splat2D], cam: &Camera, opts: &RenderOptions) -> RenderOutput {
    let (w, h) = (cam.width, cam.height);
    let tiles = bin(splats, w, h);
    let blocks: Vec<Vec<[f64; 4]>> = (0..tiles.nx * tiles.ny)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_bounds(tile, tiles.nx, w, h);
            let list = &tiles.lists[tile];
            let mut out = Vec::with_capacity((x1 - x0) * (y1 - y0));
            let mut spans = Vec::new();
            for y in y0..y1 {
                row_spans(splats, list, y as f64 + 0.5, &mut spans);
                for x in x0..x1 {
                    let px = x as f64 + 0.5;
                    let (c, tr) = composite_pixel(splats, spans_at(&spans, list, px), px, y as f64 + 0.5, opts, |_| {});
                    let rgb = finish_pixel(c, tr, cam, opts);
                    out.push([rgb[0], rgb[1], rgb[2], 1.0 - tr]);
                }
            }
            out
        })
        .collect();

    let mut image = Image::zeros(w, h, 3);
    let mut alpha = Image::zeros(w, h, 1);
    for (tile, block) in blocks.iter().enumerate() {
        let (x0, x1, y0, y1) = tile_bounds(tile, tiles.nx, w, h);
        let mut it = block.iter();
        for y in y0..y1 {
            for x in x0..x1 {
                let v = it.next().unwrap();
                image.pixel_mut(x, y).copy_from_slice(&v[..3]);
                alpha.pixel_mut(x, y)[0] = v[3];
            }
        }
    }
    RenderOutput {
        image,
        alpha,
        aux: None,
    }
}

/// Renders the cloud at time `t` with the stored velocities.
pub fn render(cloud: &GaussianCloud, cam: &Camera, t: f64, opts: &RenderOptions) -> RenderOutput {
    render_with(cloud, cam, t, opts, None)
}

/// Renders with optional per-primitive velocity overrides (field mode).
pub fn render_with(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
) -> RenderOutput {
    let splats = project_cloud(cloud, cam, t, opts, velocities);
    composite(&splats, cam, opts)
}

/// Reference renderer: every pixel loops over every splat, no tiling.
pub fn render_naive(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
) -> RenderOutput {
    let splats = project_cloud(cloud, cam, t, opts, velocities);
    let mut image = Image::zeros(cam.width, cam.height, 3);
    let mut alpha = Image::zeros(cam.width, cam.height, 1);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let (c, tr) = composite_pixel(&splats, (0..splats.len()).map(|k| (k, k)), x as f64 + 0.5, y as f64 + 0.5, opts, |_| {});
            image.pixel_mut(x, y).copy_from_slice(&finish_pixel(c, tr, cam, opts));
            alpha.pixel_mut(x, y)[0] = 1.0 - tr;
        }
    }
    RenderOutput {
        image,
        alpha,
        aux: None,
    }
}

struct TileGrad {
    splats: Vec<SplatGrad>,
    cc_matrix: DMat3,
    cc_bias: DVec3,
}

/// Gradient of `Σ grad_image ⊙ render(...)` w.r.t. all primitive parameters
/// and the camera's colour correction.
pub fn render_backward(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
    grad_image: &Image,
) -> RenderGrad {
    let (w, h) = (cam.width, cam.height);
    assert!(
        grad_image.width == w && grad_image.height == h && grad_image.channels == 3,
        "gradient image shape must match the camera"
    );
    let splats = project_cloud(cloud, cam, t, opts, velocities);
    let tiles = bin(&splats, w, h);
    let cc_t = cam.cc.matrix.transpose();

    let tile_grads: Vec<TileGrad> = (0..tiles.nx * tiles.ny)
        .into_par_iter()
        .map(|tile| {
            let (x0, x1, y0, y1) = tile_bounds(tile, tiles.nx, w, h);
            let list = &tiles.lists[tile];
            let mut local = vec![SplatGrad::default(); list.len()];
            let mut cc_matrix = DMat3::ZERO;
            let mut cc_bias = DVec3::ZERO;
            let mut hits: Vec<Hit> = Vec::new();
            let mut spans = Vec::new();
            for y in y0..y1 {
                row_spans(&splats, list, y as f64 + 0.5, &mut spans);
                for x in x0..x1 {
                    let g_out = DVec3::from_slice(grad_image.pixel(x, y));
                    if g_out == DVec3::ZERO {
                        continue;
                    }
                    hits.clear();
                    let px = x as f64 + 0.5;
                    let order = spans_at(&spans, list, px);
                    let (color, trans) = composite_pixel(&splats, order, px, y as f64 + 0.5, opts, |hit| hits.push(hit));
                    let g_c = if opts.apply_cc {
                        let pre = DVec3::from_array(finish_pixel(color, trans, cam, &RenderOptions { apply_cc: false, ..*opts }));
                        cc_matrix += outer(g_out, pre);
                        cc_bias += g_out;
                        cc_t * g_out
                    } else {
                        g_out
                    };
                    let g_c = g_c.to_array();
                    let mut behind = [0.0; 3];
                    for ch in 0..3 {
                        behind[ch] = trans * opts.background[ch];
                    }
                    for hit in hits.iter().rev() {
                        let s = &splats[list[hit.slot] as usize];
                        let sg = &mut local[hit.slot];
                        let wgt = hit.alpha * hit.transmittance;
                        let mut g_alpha = 0.0;
                        for ch in 0..3 {
                            sg.color[ch] += g_c[ch] * wgt;
                            g_alpha += g_c[ch] * (s.color[ch] * hit.transmittance - behind[ch] / (1.0 - hit.alpha));
                            behind[ch] += s.color[ch] * wgt;
                        }
                        if hit.saturated {
                            continue;
                        }
                        sg.alpha_base += g_alpha * hit.falloff;
                        let g_power = g_alpha * hit.alpha;
                        let [a, b, c] = s.conic;
                        let (dx, dy) = (hit.dx, hit.dy);
                        sg.conic[0] -= 0.5 * g_power * dx * dx;
                        sg.conic[1] -= g_power * dx * dy;
                        sg.conic[2] -= 0.5 * g_power * dy * dy;
                        // d = pixel - mean, so d(power)/d(mean) = Q d
                        sg.mean2d[0] += g_power * (a * dx + b * dy);
                        sg.mean2d[1] += g_power * (b * dx + c * dy);
                    }
                }
            }
            TileGrad {
                splats: local,
                cc_matrix,
                cc_bias,
            }
        })
        .collect();

    let mut splat_grads = vec![SplatGrad::default(); splats.len()];
    let mut cc = ColorCorrectionGrad::default();
    for (tile, tg) in tile_grads.iter().enumerate() {
        for (slot, &k) in tiles.lists[tile].iter().enumerate() {
            splat_grads[k as usize].add(&tg.splats[slot]);
        }
        cc.matrix += tg.cc_matrix;
        cc.bias += tg.cc_bias;
    }

    let per_splat: Vec<(usize, ParamVec, f64)> = splats
        .par_iter()
        .zip(splat_grads.par_iter())
        .map(|(s, sg)| {
            let i = s.index;
            let g = &cloud.primitives()[i];
            let params = project_backward(g, velocity_of(cloud, velocities, i), cam, t, opts, sg);
            (i, params, sg.mean2d[0].hypot(sg.mean2d[1]))
        })
        .collect();

    let n = cloud.len();
    let mut out = RenderGrad {
        params: vec![[0.0; layout::NUM_PARAMS]; n],
        mean2d_norm: vec![0.0; n],
        visible: vec![false; n],
        cc,
    };
    for (i, params, norm) in per_splat {
        out.params[i] = params;
        out.mean2d_norm[i] = norm;
        out.visible[i] = true;
    }
    out
}
