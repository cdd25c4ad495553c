//! Analytic synthetic dynamic scenes.
//!
//! A scene is a static room (textured quads, boxes and spheres) plus actors
//! that translate rigidly along piecewise-linear or polynomial trajectories,
//! watched by an arc of inward-facing cameras. Ray casting gives exact
//! images, depth, actor masks, optical flow and surface point samples at any
//! time. Time is normalized to [0, 1]; frame `f` of `n` sits at `f / (n - 1)`.
//!
//! Scenes are stored as TOML ([`SceneDescription`]); [`generate`] builds one
//! from a compact [`SceneConfig`].

use std::path::Path;

use glam::{DMat3, DVec3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::camera::{Camera, ColorCorrection};
use crate::error::{Error, Result};
use crate::image::Image;

const LIGHT: DVec3 = DVec3::new(-0.35, 0.85, -0.4);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { color: [f64; 3] },
    /// 3D checkerboard with cubic cells of edge `cell`.
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
    /// `a + (b - a)·(½ + ½ sin(k·p))`.
    Waves { a: [f64; 3], b: [f64; 3], k: [f64; 3] },
}

impl Texture {
    pub fn sample(&self, p: DVec3) -> [f64; 3] {
        let mix = |a: &[f64; 3], b: &[f64; 3], u: f64| std::array::from_fn(|i| a[i] + (b[i] - a[i]) * u);
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { a, b, cell } => {
                // offset keeps surfaces lying exactly on a cell boundary on one side
                let q = ((p + DVec3::splat(1e-6)) / *cell).floor();
                if (q.x + q.y + q.z).rem_euclid(2.0) < 1.0 {
                    *a
                } else {
                    *b
                }
            }
            Texture::Waves { a, b, k } => mix(a, b, 0.5 + 0.5 * DVec3::from_array(*k).dot(p).sin()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    /// Parallelogram `origin + a·u + b·v`, `a, b ∈ [0, 1]`.
    Quad { origin: [f64; 3], u: [f64; 3], v: [f64; 3] },
    /// Axis-aligned box centred at the object position.
    Cuboid { half_extents: [f64; 3] },
    Sphere { radius: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StaticObject {
    pub shape: Shape,
    /// Centre for cuboids and spheres; ignored for quads.
    #[serde(default)]
    pub position: [f64; 3],
    pub texture: Texture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    /// Linear interpolation between `(t, position)` knots, constant outside.
    PiecewiseLinear { knots: Vec<(f64, [f64; 3])> },
    /// `Σ cₖ tᵏ`.
    Polynomial { coeffs: Vec<[f64; 3]> },
}

impl Trajectory {
    pub fn position(&self, t: f64) -> DVec3 {
        match self {
            Trajectory::PiecewiseLinear { knots } => {
                let first = knots.first().expect("validated non-empty");
                if t <= first.0 {
                    return DVec3::from_array(first.1);
                }
                for w in knots.windows(2) {
                    let (t0, p0) = (w[0].0, DVec3::from_array(w[0].1));
                    let (t1, p1) = (w[1].0, DVec3::from_array(w[1].1));
                    if t <= t1 {
                        let u = if t1 > t0 { (t - t0) / (t1 - t0) } else { 1.0 };
                        return p0 + (p1 - p0) * u;
                    }
                }
                DVec3::from_array(knots.last().unwrap().1)
            }
            Trajectory::Polynomial { coeffs } => {
                let mut acc = DVec3::ZERO;
                for c in coeffs.iter().rev() {
                    acc = acc * t + DVec3::from_array(*c);
                }
                acc
            }
        }
    }

    /// Time derivative (right derivative at knots).
    pub fn velocity(&self, t: f64) -> DVec3 {
        match self {
            Trajectory::PiecewiseLinear { knots } => {
                for w in knots.windows(2) {
                    if t >= w[0].0 && t < w[1].0 {
                        return (DVec3::from_array(w[1].1) - DVec3::from_array(w[0].1)) / (w[1].0 - w[0].0);
                    }
                }
                DVec3::ZERO
            }
            Trajectory::Polynomial { coeffs } => {
                let mut acc = DVec3::ZERO;
                for (k, c) in coeffs.iter().enumerate().skip(1).rev() {
                    acc = acc * t + DVec3::from_array(*c) * k as f64;
                }
                acc
            }
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Trajectory::PiecewiseLinear { knots } => {
                if knots.is_empty() {
                    return Err(Error::Config("piecewise-linear trajectory needs knots".into()));
                }
                if knots.windows(2).any(|w| w[1].0 < w[0].0) {
                    return Err(Error::Config("trajectory knots must be sorted by time".into()));
                }
            }
            Trajectory::Polynomial { coeffs } => {
                if coeffs.is_empty() {
                    return Err(Error::Config("polynomial trajectory needs coefficients".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Actor {
    pub shape: Shape,
    pub texture: Texture,
    pub trajectory: Trajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub eye: [f64; 3],
    pub target: [f64; 3],
    pub fx: f64,
    pub fy: f64,
    /// Colour transform applied to this camera's ground-truth images.
    pub gt_color_matrix: [[f64; 3]; 3],
    pub gt_color_bias: [f64; 3],
}

/// Complete, self-contained scene file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneDescription {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    /// Samples per pixel axis for ground-truth images.
    pub supersample: usize,
    pub bbox_min: [f64; 3],
    pub bbox_max: [f64; 3],
    pub cameras: Vec<CameraSpec>,
    pub statics: Vec<StaticObject>,
    pub actors: Vec<Actor>,
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneConfig {
    pub seed: u64,
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub supersample: usize,
    pub cameras: usize,
    /// Angular span of the camera arc.
    pub arc_degrees: f64,
    pub camera_distance: f64,
    pub fov_degrees: f64,
    pub actors: usize,
    /// Distance travelled by each actor over the sequence.
    pub actor_travel: f64,
    /// Waypoints per actor trajectory (≥ 2).
    pub actor_waypoints: usize,
    pub actor_radius: f64,
    /// Std-dev of per-camera colour-matrix perturbations of ground truth.
    pub color_matrix_sigma: f64,
    /// Std-dev of per-camera colour-bias perturbations of ground truth.
    pub color_bias_sigma: f64,
    /// Drop the actors (static-only scene).
    pub static_only: bool,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            frames: 60,
            width: 64,
            height: 64,
            supersample: 2,
            cameras: 8,
            arc_degrees: 60.0,
            camera_distance: 4.5,
            fov_degrees: 55.0,
            actors: 1,
            actor_travel: 2.0,
            actor_waypoints: 3,
            actor_radius: 0.35,
            color_matrix_sigma: 0.0,
            color_bias_sigma: 0.0,
            static_only: false,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.frames < 2 || self.width == 0 || self.height == 0 || self.supersample == 0 {
            return Err(Error::Config("scene needs ≥2 frames and a non-empty image".into()));
        }
        if self.cameras == 0 {
            return Err(Error::Config("scene needs at least one camera".into()));
        }
        if self.actor_waypoints < 2 {
            return Err(Error::Config("actor trajectories need at least 2 waypoints".into()));
        }
        if !(self.fov_degrees > 0.0 && self.fov_degrees < 180.0) {
            return Err(Error::Config("fov must be in (0, 180) degrees".into()));
        }
        Ok(())
    }
}

const ROOM_MIN: [f64; 3] = [-5.0, 0.0, -5.0];
const ROOM_MAX: [f64; 3] = [5.0, 5.0, 2.5];
const LOOK_AT: [f64; 3] = [0.0, 1.0, 0.8];

/// Builds a deterministic scene from `cfg`.
pub fn generate(cfg: &SceneConfig) -> Result<SceneDescription> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [x0, y0, z0] = ROOM_MIN;
    let [x1, y1, z1] = ROOM_MAX;
    let wall = |a: [f64; 3], b: [f64; 3]| Texture::Waves { a, b, k: [0.0, 0.0, 0.0] };
    let mut statics = vec![
        StaticObject {
            shape: Shape::Quad { origin: [x0, y0, z0], u: [x1 - x0, 0.0, 0.0], v: [0.0, 0.0, z1 - z0] },
            position: [0.0; 3],
            texture: Texture::Checker { a: [0.75, 0.72, 0.65], b: [0.35, 0.33, 0.3], cell: 0.75 },
        },
        StaticObject {
            shape: Shape::Quad { origin: [x0, y0, z1], u: [x1 - x0, 0.0, 0.0], v: [0.0, y1 - y0, 0.0] },
            position: [0.0; 3],
            texture: Texture::Waves { a: [0.25, 0.4, 0.6], b: [0.6, 0.75, 0.85], k: [2.2, 1.7, 0.0] },
        },
        StaticObject {
            shape: Shape::Quad { origin: [x0, y0, z0], u: [0.0, 0.0, z1 - z0], v: [0.0, y1 - y0, 0.0] },
            position: [0.0; 3],
            texture: Texture::Waves { a: [0.6, 0.35, 0.3], b: [0.85, 0.6, 0.5], k: [0.0, 1.9, 1.5] },
        },
        StaticObject {
            shape: Shape::Quad { origin: [x1, y0, z0], u: [0.0, 0.0, z1 - z0], v: [0.0, y1 - y0, 0.0] },
            position: [0.0; 3],
            texture: wall([0.45, 0.6, 0.35], [0.45, 0.6, 0.35]),
        },
        StaticObject {
            shape: Shape::Quad { origin: [x0, y1, z0], u: [x1 - x0, 0.0, 0.0], v: [0.0, 0.0, z1 - z0] },
            position: [0.0; 3],
            texture: wall([0.85, 0.85, 0.8], [0.85, 0.85, 0.8]),
        },
        StaticObject {
            shape: Shape::Quad { origin: [x0, y0, z0], u: [x1 - x0, 0.0, 0.0], v: [0.0, y1 - y0, 0.0] },
            position: [0.0; 3],
            texture: wall([0.3, 0.3, 0.35], [0.3, 0.3, 0.35]),
        },
        StaticObject {
            shape: Shape::Cuboid { half_extents: [0.35, 0.35, 0.35] },
            position: [-1.3, 0.35, 1.4],
            texture: Texture::Checker { a: [0.9, 0.8, 0.2], b: [0.6, 0.3, 0.1], cell: 0.25 },
        },
        StaticObject {
            shape: Shape::Sphere { radius: 0.4 },
            position: [1.4, 0.4, 1.5],
            texture: Texture::Waves { a: [0.2, 0.55, 0.45], b: [0.7, 0.9, 0.8], k: [6.0, 4.0, 0.0] },
        },
    ];
    statics.shrink_to_fit();

    let half = cfg.actor_travel / 2.0;
    let actors = if cfg.static_only {
        Vec::new()
    } else {
        (0..cfg.actors)
            .map(|a| {
                let lane_z = 0.3 + 0.9 * a as f64 / cfg.actors.max(1) as f64;
                let y = 0.9 + rng.gen_range(-0.15..0.15);
                let dir = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                let phase = rng.gen_range(-0.3..0.3);
                let knots = (0..cfg.actor_waypoints)
                    .map(|k| {
                        let u = k as f64 / (cfg.actor_waypoints - 1) as f64;
                        let x = dir * (-half + cfg.actor_travel * u) + phase;
                        let wobble = if k % 2 == 1 { rng.gen_range(0.15..0.35) } else { 0.0 };
                        (u, [x, y + wobble, lane_z + rng.gen_range(-0.1..0.1)])
                    })
                    .collect();
                let palette = [[0.85, 0.2, 0.15], [0.15, 0.3, 0.85], [0.9, 0.55, 0.1], [0.6, 0.15, 0.7]];
                let base = palette[a % palette.len()];
                Actor {
                    shape: if a % 2 == 0 {
                        Shape::Sphere { radius: cfg.actor_radius }
                    } else {
                        Shape::Cuboid { half_extents: [cfg.actor_radius * 0.8; 3] }
                    },
                    texture: Texture::Checker { a: base, b: base.map(|c| c * 0.45 + 0.05), cell: cfg.actor_radius * 0.7 },
                    trajectory: Trajectory::PiecewiseLinear { knots },
                }
            })
            .collect()
    };

    let focal = 0.5 * cfg.width as f64 / (0.5 * cfg.fov_degrees.to_radians()).tan();
    let matrix_noise = Normal::new(0.0, cfg.color_matrix_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let bias_noise = Normal::new(0.0, cfg.color_bias_sigma.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;
    let target = DVec3::from_array(LOOK_AT);
    let cameras = (0..cfg.cameras)
        .map(|k| {
            let u = if cfg.cameras == 1 { 0.5 } else { k as f64 / (cfg.cameras - 1) as f64 };
            let angle = (u - 0.5) * cfg.arc_degrees.to_radians();
            let eye = target + DVec3::new(angle.sin(), 0.0, -angle.cos()) * cfg.camera_distance + DVec3::new(0.0, 0.4, 0.0);
            let mut m = [[0.0; 3]; 3];
            for (r, row) in m.iter_mut().enumerate() {
                for (c, v) in row.iter_mut().enumerate() {
                    *v = if r == c { 1.0 } else { 0.0 } + matrix_noise.sample(&mut rng);
                }
            }
            CameraSpec {
                eye: eye.to_array(),
                target: LOOK_AT,
                fx: focal,
                fy: focal,
                gt_color_matrix: m,
                gt_color_bias: std::array::from_fn(|_| bias_noise.sample(&mut rng)),
            }
        })
        .collect();

    Ok(SceneDescription {
        seed: cfg.seed,
        frames: cfg.frames,
        width: cfg.width,
        height: cfg.height,
        supersample: cfg.supersample,
        bbox_min: ROOM_MIN,
        bbox_max: ROOM_MAX,
        cameras,
        statics,
        actors,
    })
}

/// What a ray hit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Object {
    Static(usize),
    Actor(usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub distance: f64,
    pub point: DVec3,
    pub color: [f64; 3],
    pub object: Object,
}

/// Point samples of visible surfaces at one time.
#[derive(Debug, Clone, PartialEq)]
pub struct KeyframeCloud {
    pub t: f64,
    pub points: Vec<DVec3>,
    pub colors: Vec<[f64; 3]>,
    /// Ground-truth velocity of each sample (zero on static surfaces).
    pub gt_velocity: Vec<DVec3>,
    pub on_actor: Vec<bool>,
}

impl KeyframeCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn intersect_shape(shape: &Shape, center: DVec3, o: DVec3, d: DVec3) -> Option<(f64, DVec3)> {
    const EPS: f64 = 1e-9;
    match shape {
        Shape::Quad { origin, u, v } => {
            let (origin, u, v) = (DVec3::from_array(*origin), DVec3::from_array(*u), DVec3::from_array(*v));
            let n = u.cross(v);
            let denom = n.dot(d);
            if denom.abs() < EPS {
                return None;
            }
            let s = n.dot(origin - o) / denom;
            if s <= EPS {
                return None;
            }
            let p = o + d * s - origin;
            let a = p.dot(u) / u.length_squared();
            let b = p.dot(v) / v.length_squared();
            ((0.0..=1.0).contains(&a) && (0.0..=1.0).contains(&b)).then_some((s, n.normalize()))
        }
        Shape::Sphere { radius } => {
            let oc = o - center;
            let b = oc.dot(d);
            let c = oc.length_squared() - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let sq = disc.sqrt();
            let s = if -b - sq > EPS { -b - sq } else { -b + sq };
            (s > EPS).then(|| (s, (o + d * s - center) / *radius))
        }
        Shape::Cuboid { half_extents } => {
            let h = DVec3::from_array(*half_extents);
            let lo = center - h;
            let hi = center + h;
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut axis = 0;
            for k in 0..3 {
                if d[k].abs() < EPS {
                    if o[k] < lo[k] || o[k] > hi[k] {
                        return None;
                    }
                    continue;
                }
                let (mut a, mut b) = ((lo[k] - o[k]) / d[k], (hi[k] - o[k]) / d[k]);
                if a > b {
                    std::mem::swap(&mut a, &mut b);
                }
                if a > t_near {
                    t_near = a;
                    axis = k;
                }
                t_far = t_far.min(b);
            }
            if t_near > t_far || t_near <= EPS {
                return None;
            }
            let mut n = DVec3::ZERO;
            n[axis] = -d[axis].signum();
            Some((t_near, n))
        }
    }
}

fn shade(texture: &Texture, local: DVec3, normal: DVec3) -> [f64; 3] {
    let lambert = 0.7 + 0.3 * normal.dot(LIGHT.normalize()).abs();
    texture.sample(local).map(|c| (c * lambert).clamp(0.0, 1.0))
}

/// A loaded scene with materialized cameras.
#[derive(Debug, Clone)]
pub struct Scene {
    pub desc: SceneDescription,
    cameras: Vec<Camera>,
    gt_color: Vec<ColorCorrection>,
}

impl Scene {
    pub fn new(desc: SceneDescription) -> Result<Self> {
        if desc.frames < 2 || desc.width == 0 || desc.height == 0 || desc.supersample == 0 {
            return Err(Error::Config("scene needs ≥2 frames and a non-empty image".into()));
        }
        if desc.cameras.is_empty() {
            return Err(Error::Config("scene has no cameras".into()));
        }
        for a in &desc.actors {
            a.trajectory.validate()?;
        }
        let mut cameras = Vec::new();
        let mut gt_color = Vec::new();
        for spec in &desc.cameras {
            cameras.push(Camera::look_at(
                DVec3::from_array(spec.eye),
                DVec3::from_array(spec.target),
                DVec3::Y,
                spec.fx,
                spec.fy,
                desc.width,
                desc.height,
            )?);
            let m = spec.gt_color_matrix;
            gt_color.push(ColorCorrection {
                matrix: DMat3::from_cols_array_2d(&m).transpose(),
                bias: DVec3::from_array(spec.gt_color_bias),
            });
        }
        Ok(Self { desc, cameras, gt_color })
    }

    pub fn generate(cfg: &SceneConfig) -> Result<Self> {
        Self::new(generate(cfg)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::new(toml::from_str(&text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, toml::to_string_pretty(&self.desc)?)?;
        Ok(())
    }

    /// The same scene with every actor removed.
    pub fn background(&self) -> Scene {
        Scene {
            desc: SceneDescription {
                actors: Vec::new(),
                ..self.desc.clone()
            },
            cameras: self.cameras.clone(),
            gt_color: self.gt_color.clone(),
        }
    }

    /// Cameras with identity colour correction.
    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    /// Colour transform baked into camera `k`'s ground truth.
    pub fn gt_color(&self, k: usize) -> &ColorCorrection {
        &self.gt_color[k]
    }

    pub fn frame_count(&self) -> usize {
        self.desc.frames
    }

    pub fn time_of(&self, frame: usize) -> f64 {
        frame as f64 / (self.desc.frames - 1) as f64
    }

    /// Time between consecutive frames.
    pub fn frame_dt(&self) -> f64 {
        1.0 / (self.desc.frames - 1) as f64
    }

    pub fn bbox(&self) -> (DVec3, DVec3) {
        (DVec3::from_array(self.desc.bbox_min), DVec3::from_array(self.desc.bbox_max))
    }

    pub fn bbox_diagonal(&self) -> f64 {
        let (a, b) = self.bbox();
        (b - a).length()
    }

    pub fn actor_position(&self, actor: usize, t: f64) -> DVec3 {
        self.desc.actors[actor].trajectory.position(t)
    }

    pub fn actor_velocity(&self, actor: usize, t: f64) -> DVec3 {
        self.desc.actors[actor].trajectory.velocity(t)
    }

    /// Largest actor speed over the frame times (world units per unit time).
    pub fn max_actor_speed(&self) -> f64 {
        let mut best = 0.0f64;
        for a in 0..self.desc.actors.len() {
            for f in 0..self.desc.frames {
                best = best.max(self.actor_velocity(a, self.time_of(f)).length());
            }
        }
        best
    }

    /// Nearest surface along the ray `o + s·d` (`d` unit length) at time `t`.
    pub fn trace(&self, o: DVec3, d: DVec3, t: f64) -> Option<Hit> {
        let mut best: Option<(f64, DVec3, Object)> = None;
        let mut consider = |hit: Option<(f64, DVec3)>, obj| {
            if let Some((s, n)) = hit {
                if best.map_or(true, |b| s < b.0) {
                    best = Some((s, n, obj));
                }
            }
        };
        for (i, s) in self.desc.statics.iter().enumerate() {
            consider(intersect_shape(&s.shape, DVec3::from_array(s.position), o, d), Object::Static(i));
        }
        for (j, a) in self.desc.actors.iter().enumerate() {
            consider(intersect_shape(&a.shape, a.trajectory.position(t), o, d), Object::Actor(j));
        }
        let (s, n, object) = best?;
        let point = o + d * s;
        let color = match object {
            Object::Static(i) => shade(&self.desc.statics[i].texture, point, n),
            Object::Actor(j) => {
                let a = &self.desc.actors[j];
                shade(&a.texture, point - a.trajectory.position(t), n)
            }
        };
        Some(Hit { distance: s, point, color, object })
    }

    fn cast(&self, cam: usize, px: [f64; 2], t: f64) -> Option<Hit> {
        let c = &self.cameras[cam];
        self.trace(c.center(), c.ray_direction(px), t)
    }

    /// Supersampled image without the per-camera colour perturbation.
    pub fn render_clean(&self, cam: usize, t: f64) -> Image {
        let (w, h, ss) = (self.desc.width, self.desc.height, self.desc.supersample);
        let mut img = Image::zeros(w, h, 3);
        let inv = 1.0 / (ss * ss) as f64;
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0; 3];
                for sy in 0..ss {
                    for sx in 0..ss {
                        let px = [x as f64 + (sx as f64 + 0.5) / ss as f64, y as f64 + (sy as f64 + 0.5) / ss as f64];
                        if let Some(hit) = self.cast(cam, px, t) {
                            for ch in 0..3 {
                                acc[ch] += hit.color[ch];
                            }
                        }
                    }
                }
                img.pixel_mut(x, y).copy_from_slice(&acc.map(|v| v * inv));
            }
        }
        img
    }

    /// Observed ground-truth image of camera `cam` at time `t`.
    pub fn render(&self, cam: usize, t: f64) -> Image {
        let mut img = self.render_clean(cam, t);
        let cc = &self.gt_color[cam];
        if !cc.is_identity() {
            for px in img.data.chunks_exact_mut(3) {
                let c = cc.apply([px[0], px[1], px[2]]);
                for ch in 0..3 {
                    px[ch] = c[ch].clamp(0.0, 1.0);
                }
            }
        }
        img
    }

    /// Camera-space depth at pixel centres (infinite where nothing is hit).
    pub fn depth(&self, cam: usize, t: f64) -> Image {
        let c = &self.cameras[cam];
        let mut img = Image::zeros(self.desc.width, self.desc.height, 1);
        for y in 0..self.desc.height {
            for x in 0..self.desc.width {
                let z = self
                    .cast(cam, [x as f64 + 0.5, y as f64 + 0.5], t)
                    .map_or(f64::INFINITY, |h| c.world_to_camera(h.point).z);
                img.pixel_mut(x, y)[0] = z;
            }
        }
        img
    }

    /// Whether each pixel centre sees an actor.
    pub fn actor_mask(&self, cam: usize, t: f64) -> Vec<bool> {
        let mut out = Vec::with_capacity(self.desc.width * self.desc.height);
        for y in 0..self.desc.height {
            for x in 0..self.desc.width {
                let hit = self.cast(cam, [x as f64 + 0.5, y as f64 + 0.5], t);
                out.push(matches!(hit, Some(Hit { object: Object::Actor(_), .. })));
            }
        }
        out
    }

    /// Exact forward flow in pixels of the surface seen at each pixel centre
    /// from `t0` to `t1`. Two channels; zero where nothing is hit.
    pub fn flow(&self, cam: usize, t0: f64, t1: f64) -> Image {
        let c = &self.cameras[cam];
        let mut img = Image::zeros(self.desc.width, self.desc.height, 2);
        for y in 0..self.desc.height {
            for x in 0..self.desc.width {
                let px = [x as f64 + 0.5, y as f64 + 0.5];
                let Some(hit) = self.cast(cam, px, t0) else { continue };
                if let Object::Actor(j) = hit.object {
                    let moved = hit.point + self.actor_position(j, t1) - self.actor_position(j, t0);
                    if let Some((p, _)) = c.project(moved) {
                        img.pixel_mut(x, y).copy_from_slice(&[p[0] - px[0], p[1] - px[1]]);
                    }
                }
            }
        }
        img
    }

    /// Ground-truth velocity of a surface hit at time `t`.
    pub fn hit_velocity(&self, hit: &Hit, t: f64) -> DVec3 {
        match hit.object {
            Object::Static(_) => DVec3::ZERO,
            Object::Actor(j) => self.actor_velocity(j, t),
        }
    }

    /// Samples visible surface points from every camera at uniformly random
    /// sub-pixel positions; colours are as observed by the sampling camera.
    pub fn sample_cloud(&self, t: f64, per_camera: usize, rng: &mut impl Rng) -> KeyframeCloud {
        let mut cloud = KeyframeCloud {
            t,
            points: Vec::new(),
            colors: Vec::new(),
            gt_velocity: Vec::new(),
            on_actor: Vec::new(),
        };
        for cam in 0..self.cameras.len() {
            for _ in 0..per_camera {
                let px = [
                    rng.gen_range(0.0..self.desc.width as f64),
                    rng.gen_range(0.0..self.desc.height as f64),
                ];
                let Some(hit) = self.cast(cam, px, t) else { continue };
                let c = self.gt_color[cam].apply(hit.color).map(|v| v.clamp(0.0, 1.0));
                cloud.points.push(hit.point);
                cloud.colors.push(c);
                cloud.gt_velocity.push(self.hit_velocity(&hit, t));
                cloud.on_actor.push(matches!(hit.object, Object::Actor(_)));
            }
        }
        cloud
    }
}
