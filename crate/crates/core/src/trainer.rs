//! Optimization loop: Adam over the reparameterized primitive parameters,
//! optional velocity field and per-camera colour correction, periodic
//! relocation and warm-start distillation.

use std::path::Path;

use glam::{DMat3, DVec3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::camera::{cc_loss, Camera, ColorCorrectionGrad};
use crate::checkpoint::Checkpoint;
use crate::cloud::GaussianCloud;
use crate::density::{find_dead, relocate, DensityConfig};
use crate::diagnostics::{duration_histogram, DurationHistogram};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::init::{init_cloud, InitConfig, InitReport};
use crate::losses::{gate_loss, l1_loss, reg_loss, ssim_with_grad, LossBreakdown, LossWeights};
use crate::metrics::{dssim, epe, psnr};
use crate::motion::{distill_loss, distill_weight, Anchor, FieldConfig, VelocityField};
use crate::optim::{Adam, ExpDecay};
use crate::primitive::{layout, OpacityMode, SpacetimeGaussian, DEFAULT_GAMMA};
use crate::raster::attribute::induced_flow;
use crate::raster::{render_backward, render_with, RenderOptions};
use crate::scene::Scene;

const P: usize = layout::NUM_PARAMS;
/// Anchors used to track distillation quality during the warm start.
const PROBE_ANCHORS: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    /// Multiplied by the scene extent (half the bounding-box diagonal).
    pub position: f64,
    /// Final/initial ratio of the exponential decay applied to positions
    /// and the velocity field.
    pub decay: f64,
    /// Apply the decay to every group instead.
    pub decay_all: bool,
    pub t_center: f64,
    pub opacity: f64,
    pub scale: f64,
    pub duration: f64,
    pub rotation: f64,
    pub velocity: f64,
    pub gate: f64,
    /// Base colour coefficients; the view-dependent ones use `sh * sh_rest`.
    pub sh: f64,
    pub sh_rest: f64,
    pub field: f64,
    pub cc: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self {
            position: 1.6e-4,
            decay: 0.01,
            decay_all: false,
            t_center: 1e-3,
            opacity: 0.05,
            scale: 5e-3,
            duration: 5e-3,
            rotation: 1e-3,
            velocity: 1e-3,
            gate: 5e-3,
            sh: 2.5e-3,
            sh_rest: 0.05,
            field: 1e-2,
            cc: 1e-3,
        }
    }
}

impl LearningRates {
    fn validate(&self) -> Result<()> {
        let all = [
            self.position,
            self.t_center,
            self.opacity,
            self.scale,
            self.duration,
            self.rotation,
            self.velocity,
            self.gate,
            self.sh,
            self.sh_rest,
            self.field,
            self.cc,
        ];
        if all.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Config("learning rates must be finite and non-negative".into()));
        }
        if !(self.decay > 0.0 && self.decay.is_finite()) {
            return Err(Error::Config("learning-rate decay must be positive".into()));
        }
        Ok(())
    }

    /// Multiplies every rate by `k`.
    pub fn scaled(mut self, k: f64) -> Self {
        for v in [
            &mut self.position,
            &mut self.t_center,
            &mut self.opacity,
            &mut self.scale,
            &mut self.duration,
            &mut self.rotation,
            &mut self.velocity,
            &mut self.gate,
            &mut self.sh,
            &mut self.field,
            &mut self.cc,
        ] {
            *v *= k;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Views (camera, frame) per step; their gradients are averaged.
    pub batch: usize,
    pub seed: u64,
    pub budget: usize,
    /// Gated marginalization instead of the plain temporal opacity.
    pub gated: bool,
    /// Velocities come from the neural field instead of per-primitive values.
    pub nvf: bool,
    /// Learn a per-camera colour correction.
    pub cc: bool,
    pub gamma: f64,
    pub lr: LearningRates,
    pub weights: LossWeights,
    pub density: DensityConfig,
    pub init: InitConfig,
    pub field: FieldConfig,
    /// Anchors drawn per step for distillation.
    pub distill_batch: usize,
    pub background: [f64; 3],
    /// Iterations between duration-histogram snapshots (0 = final only).
    pub histogram_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch: 1,
            seed: 0,
            budget: 10_000,
            gated: false,
            nvf: false,
            cc: false,
            gamma: DEFAULT_GAMMA,
            lr: LearningRates::default(),
            weights: LossWeights::default(),
            density: DensityConfig::default(),
            init: InitConfig::default(),
            field: FieldConfig::default(),
            distill_batch: 1024,
            background: [0.0; 3],
            histogram_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be positive".into()));
        }
        if self.batch == 0 {
            return Err(Error::Config("batch must be positive".into()));
        }
        if self.budget == 0 {
            return Err(Error::Config("budget must be positive".into()));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Config("gamma must be positive".into()));
        }
        if self.nvf && self.distill_batch == 0 {
            return Err(Error::Config("distill_batch must be positive with the velocity field".into()));
        }
        self.lr.validate()?;
        self.weights.validate()?;
        self.density.validate()?;
        self.init.validate()?;
        self.field.validate()
    }

    pub fn opacity_mode(&self) -> OpacityMode {
        if self.gated {
            OpacityMode::Gated
        } else {
            OpacityMode::Legacy
        }
    }

    pub fn render_options(&self) -> RenderOptions {
        RenderOptions {
            opacity_mode: self.opacity_mode(),
            gamma: self.gamma,
            apply_cc: self.cc,
            background: self.background,
            ..RenderOptions::default()
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub camera: usize,
    pub frame: usize,
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub reg: f64,
    pub gate: f64,
    pub cc: f64,
    pub distill: f64,
    pub distill_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RelocationRecord {
    pub iteration: usize,
    pub dead_count: usize,
    pub dead_ratio: f64,
    pub max_multiplicity: usize,
}

/// Field-vs-anchor error on a fixed probe set during the warm start.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WarmStartRecord {
    pub iteration: usize,
    pub weight: f64,
    pub mse: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub losses: Vec<LossRecord>,
    pub relocations: Vec<RelocationRecord>,
    pub histograms: Vec<(usize, DurationHistogram)>,
    pub warm_start: Vec<WarmStartRecord>,
    /// Dead ratio of the final cloud.
    pub final_dead_ratio: f64,
}

impl TrainLog {
    /// Writes `losses.csv`, `relocations.csv`, `durations.csv` and, with a
    /// velocity field, `warm_start.csv` into `dir`.
    pub fn write_csv(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let mut w = csv::Writer::from_path(dir.join("losses.csv"))?;
        for r in &self.losses {
            w.serialize(r)?;
        }
        w.flush()?;

        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(dir.join("relocations.csv"))?;
        w.write_record(["iteration", "dead_count", "dead_ratio", "max_multiplicity"])?;
        for r in &self.relocations {
            w.serialize(r)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("durations.csv"))?;
        w.write_record(["iteration", "bin_lo", "bin_hi", "count", "mass", "persistent_fraction"])?;
        for (it, h) in &self.histograms {
            for (k, c) in h.counts.iter().enumerate() {
                w.write_record([
                    it.to_string(),
                    h.edges[k].to_string(),
                    h.edges[k + 1].to_string(),
                    c.to_string(),
                    h.mass[k].to_string(),
                    h.persistent_fraction.to_string(),
                ])?;
            }
        }
        w.flush()?;

        if !self.warm_start.is_empty() {
            let mut w = csv::Writer::from_path(dir.join("warm_start.csv"))?;
            for r in &self.warm_start {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Ok(())
    }

    /// Reads back the loss, relocation and warm-start tables written by
    /// [`write_csv`](Self::write_csv). Histogram snapshots are not restored.
    pub fn read_csv(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        fn rows<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
            if !path.exists() {
                return Ok(Vec::new());
            }
            let mut r = csv::Reader::from_path(path)?;
            Ok(r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?)
        }
        Ok(Self {
            losses: rows(&dir.join("losses.csv"))?,
            relocations: rows(&dir.join("relocations.csv"))?,
            warm_start: rows(&dir.join("warm_start.csv"))?,
            ..Default::default()
        })
    }

    /// Loss totals, for bitwise comparisons between runs.
    pub fn loss_trace(&self) -> Vec<f64> {
        self.losses.iter().map(|r| r.total).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutput {
    pub checkpoint: Checkpoint,
    pub log: TrainLog,
    pub init: InitReport,
}

/// Velocities from the field for every primitive that survives opacity
/// culling at `t`; culled primitives get zero, which cannot affect the image.
pub fn field_velocities(cloud: &GaussianCloud, field: &VelocityField, t: f64, opts: &RenderOptions) -> Vec<DVec3> {
    let live: Vec<usize> = cloud
        .primitives()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.final_opacity(t, opts.opacity_mode, opts.gamma) >= opts.alpha_min)
        .map(|(i, _)| i)
        .collect();
    let xs: Vec<DVec3> = live.iter().map(|&i| cloud.primitives()[i].mean).collect();
    let vs = field.query_batch(&xs, t);
    let mut out = vec![DVec3::ZERO; cloud.len()];
    for (i, v) in live.into_iter().zip(vs) {
        out[i] = v;
    }
    out
}

fn cc_to_flat(cam: &Camera) -> [f64; 12] {
    let mut out = [0.0; 12];
    out[..9].copy_from_slice(&cam.cc.matrix.to_cols_array());
    out[9..].copy_from_slice(&cam.cc.bias.to_array());
    out
}

fn cc_grad_to_flat(g: &ColorCorrectionGrad) -> [f64; 12] {
    let mut out = [0.0; 12];
    out[..9].copy_from_slice(&g.matrix.to_cols_array());
    out[9..].copy_from_slice(&g.bias.to_array());
    out
}

fn cc_from_flat(cam: &mut Camera, p: &[f64]) {
    cam.cc.matrix = DMat3::from_cols_array(p[..9].try_into().expect("9 matrix entries"));
    cam.cc.bias = DVec3::new(p[9], p[10], p[11]);
}

pub struct Trainer<'a> {
    scene: &'a Scene,
    cfg: TrainConfig,
    opts: RenderOptions,
    cloud: GaussianCloud,
    field: Option<VelocityField>,
    cameras: Vec<Camera>,
    anchors: Vec<Anchor>,
    probe: Vec<Anchor>,
    adam: Adam,
    field_adam: Option<Adam>,
    cc_adam: Adam,
    rng: ChaCha8Rng,
    schedule: Vec<(usize, usize)>,
    cursor: usize,
    iteration: usize,
    extent: f64,
    log: TrainLog,
}

impl<'a> Trainer<'a> {
    /// Initializes the cloud from the scene and builds all optimizer state.
    pub fn new(scene: &'a Scene, cfg: TrainConfig) -> Result<(Self, InitReport)> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let (cloud, report) = init_cloud(scene, &cfg.init, cfg.budget, &mut rng)?;
        let trainer = Self::with_cloud_rng(scene, cfg, cloud, rng)?;
        Ok((trainer, report))
    }

    /// Starts from a given cloud instead of running initialization.
    pub fn with_cloud(scene: &'a Scene, cfg: TrainConfig, cloud: GaussianCloud) -> Result<Self> {
        cfg.validate()?;
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Self::with_cloud_rng(scene, cfg, cloud, rng)
    }

    fn with_cloud_rng(scene: &'a Scene, cfg: TrainConfig, cloud: GaussianCloud, mut rng: ChaCha8Rng) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::InvalidInput("training needs at least one primitive".into()));
        }
        let anchors: Vec<Anchor> = cloud
            .primitives()
            .iter()
            .map(|g| Anchor {
                x: g.mean,
                t: g.t_center,
                v: g.velocity,
            })
            .collect();
        let (field, field_adam, probe) = if cfg.nvf {
            let (lo, hi) = scene.bbox();
            let field = VelocityField::new(cfg.field, lo, hi, &mut rng)?;
            let adam = Adam::new(field.param_count());
            let probe = if anchors.len() <= PROBE_ANCHORS {
                anchors.clone()
            } else {
                rand::seq::index::sample(&mut rng, anchors.len(), PROBE_ANCHORS)
                    .into_iter()
                    .map(|i| anchors[i])
                    .collect()
            };
            (Some(field), Some(adam), probe)
        } else {
            (None, None, Vec::new())
        };
        let cameras = scene.cameras().to_vec();
        Ok(Self {
            scene,
            opts: cfg.render_options(),
            adam: Adam::new(cloud.len() * P),
            cc_adam: Adam::new(cameras.len() * 12),
            cloud,
            field,
            field_adam,
            cameras,
            anchors,
            probe,
            rng,
            schedule: Vec::new(),
            cursor: 0,
            iteration: 0,
            extent: 0.5 * scene.bbox_diagonal(),
            log: TrainLog::default(),
            cfg,
        })
    }

    pub fn cloud(&self) -> &GaussianCloud {
        &self.cloud
    }

    pub fn cloud_mut(&mut self) -> &mut GaussianCloud {
        &mut self.cloud
    }

    pub fn field(&self) -> Option<&VelocityField> {
        self.field.as_ref()
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn render_options(&self) -> &RenderOptions {
        &self.opts
    }

    /// Next view from a shuffled pass over every (camera, frame) pair, so
    /// each epoch covers all times.
    fn next_view(&mut self) -> (usize, usize) {
        if self.cursor == self.schedule.len() {
            self.schedule = (0..self.cameras.len())
                .flat_map(|c| (0..self.scene.frame_count()).map(move |f| (c, f)))
                .collect();
            self.schedule.shuffle(&mut self.rng);
            self.cursor = 0;
        }
        self.cursor += 1;
        self.schedule[self.cursor - 1]
    }

    fn decay_factor(&self) -> f64 {
        ExpDecay {
            initial: 1.0,
            final_ratio: self.cfg.lr.decay,
        }
        .at(self.iteration, self.cfg.iterations)
    }

    fn lr_of(&self, j: usize) -> f64 {
        let lr = &self.cfg.lr;
        let decay = self.decay_factor();
        let k = j % P;
        use layout::*;
        let base = match k {
            _ if k < MEAN + 3 => return lr.position * self.extent * decay,
            T_CENTER => lr.t_center,
            LOG_DURATION => lr.duration,
            _ if (VELOCITY..VELOCITY + 3).contains(&k) => {
                if self.cfg.nvf {
                    0.0
                } else {
                    lr.velocity
                }
            }
            _ if (LOG_SCALE..LOG_SCALE + 3).contains(&k) => lr.scale,
            _ if (ROTATION..ROTATION + 4).contains(&k) => lr.rotation,
            OPACITY => lr.opacity,
            _ if (SH..SH + 3).contains(&k) => lr.sh,
            _ if (SH + 3..GATE).contains(&k) => lr.sh * lr.sh_rest,
            GATE => {
                if self.cfg.gated {
                    lr.gate
                } else {
                    0.0
                }
            }
            _ => unreachable!("parameter slot {k}"),
        };
        if lr.decay_all {
            base * decay
        } else {
            base
        }
    }

    /// One optimization step on the next `batch` views of the schedule.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let views: Vec<(usize, usize)> = (0..self.cfg.batch).map(|_| self.next_view()).collect();
        let targets: Vec<Image> = views.iter().map(|&(c, f)| self.scene.render(c, self.scene.time_of(f))).collect();
        self.step_on(&views, &targets)
    }

    /// One optimization step against explicit targets, one per view.
    pub fn step_on(&mut self, views: &[(usize, usize)], targets: &[Image]) -> Result<LossBreakdown> {
        assert_eq!(views.len(), targets.len());
        let n = self.cloud.len();
        let w = self.cfg.weights;
        let inv_b = 1.0 / views.len() as f64;
        let mode = self.opts.opacity_mode;
        let gamma = self.opts.gamma;

        let mut grads = vec![0.0; n * P];
        let mut field_grad = self.field.as_ref().map(|f| vec![0.0; f.param_count()]);
        let mut cc_grads = vec![0.0; self.cameras.len() * 12];
        let mut losses = LossBreakdown::default();

        for (&(c, f), gt) in views.iter().zip(targets) {
            let t = self.scene.time_of(f);
            let cam = &self.cameras[c];
            let velocities = self.field.as_ref().map(|field| field_velocities(&self.cloud, field, t, &self.opts));
            let out = render_with(&self.cloud, cam, t, &self.opts, velocities.as_deref());
            let (l1, g_l1) = l1_loss(&out.image, gt)?;
            losses.l1 += l1 * inv_b;
            let mut g_img = g_l1.map(|g| w.l1 * g * inv_b);
            if w.ssim > 0.0 {
                let (ssim, g_ssim) = ssim_with_grad(&out.image, gt)?;
                losses.dssim += (1.0 - ssim) * inv_b;
                for (a, b) in g_img.data.iter_mut().zip(&g_ssim.data) {
                    *a -= w.ssim * b * inv_b;
                }
            }
            let rg = render_backward(&self.cloud, cam, t, &self.opts, velocities.as_deref(), &g_img);
            self.cloud.accumulate_grad_stats(&rg.mean2d_norm, &rg.visible);

            let mut grad_v = Vec::new();
            if self.field.is_some() {
                grad_v = rg.params.iter().map(|p| DVec3::from_slice(&p[layout::VELOCITY..layout::VELOCITY + 3])).collect();
            }
            for (dst, src) in grads.chunks_exact_mut(P).zip(&rg.params) {
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            if let (Some(field), Some(fg)) = (&self.field, field_grad.as_mut()) {
                let xs: Vec<DVec3> = self.cloud.primitives().iter().map(|g| g.mean).collect();
                let ts = vec![t; n];
                for (d, s) in fg.iter_mut().zip(field.backward(&xs, &ts, &grad_v)) {
                    *d += s;
                }
            }
            if self.cfg.cc {
                for (d, s) in cc_grads[c * 12..c * 12 + 12].iter_mut().zip(cc_grad_to_flat(&rg.cc)) {
                    *d += s;
                }
            }

            let (reg, g_reg) = reg_loss(&self.cloud, t, mode, gamma);
            losses.reg += reg * inv_b;
            for (i, g) in g_reg.into_iter().enumerate() {
                grads[i * P + layout::OPACITY] += w.reg * inv_b * g;
            }
        }

        if self.cfg.gated {
            let (gl, g_gate) = gate_loss(&self.cloud, gamma);
            losses.gate = gl;
            for (i, g) in g_gate.into_iter().enumerate() {
                grads[i * P + layout::GATE] += w.gate * g;
            }
        }
        if self.cfg.cc {
            let (cl, g_cc) = cc_loss(&self.cameras);
            losses.cc = cl;
            for (k, g) in g_cc.iter().enumerate() {
                for (d, s) in cc_grads[k * 12..k * 12 + 12].iter_mut().zip(cc_grad_to_flat(g)) {
                    *d += w.cc * s;
                }
            }
        }
        if let (Some(field), Some(fg)) = (&self.field, field_grad.as_mut()) {
            let weight = distill_weight(self.iteration, self.cfg.iterations, w.distill);
            losses.distill_weight = weight;
            if weight > 0.0 {
                let batch: Vec<Anchor> = (0..self.cfg.distill_batch)
                    .map(|_| self.anchors[self.rng.gen_range(0..self.anchors.len())])
                    .collect();
                let (dl, g) = distill_loss(field, &batch)?;
                losses.distill = dl;
                for (d, s) in fg.iter_mut().zip(g) {
                    *d += weight * s;
                }
            }
            let warm = self.log.warm_start.last().map_or(true, |r| r.weight > 0.0);
            if warm {
                let (mse, _) = probe_mse(field, &self.probe);
                self.log.warm_start.push(WarmStartRecord {
                    iteration: self.iteration,
                    weight,
                    mse,
                });
            }
        }

        let total = losses.total(&w);
        let bad_grad: Vec<usize> = grads
            .chunks_exact(P)
            .enumerate()
            .filter(|(_, g)| g.iter().any(|v| !v.is_finite()))
            .map(|(i, _)| i)
            .collect();
        let field_bad = field_grad.as_ref().is_some_and(|g| g.iter().any(|v| !v.is_finite()));
        if !total.is_finite() || !bad_grad.is_empty() || field_bad || cc_grads.iter().any(|v| !v.is_finite()) {
            let mut indices = self.cloud.non_finite_indices();
            indices.extend(bad_grad);
            indices.sort_unstable();
            indices.dedup();
            log::error!("non-finite loss or gradient at step {}: primitives {:?}", self.iteration, indices);
            return Err(Error::NonFinite {
                step: self.iteration,
                indices,
            });
        }

        let mut params: Vec<f64> = self.cloud.primitives().iter().flat_map(|g| g.params()).collect();
        let rates: Vec<f64> = (0..P).map(|k| self.lr_of(k)).collect();
        let decay = self.decay_factor();
        self.adam.step(&mut params, &grads, |j| rates[j % P]);
        for (g, p) in self.cloud.primitives_mut().iter_mut().zip(params.chunks_exact(P)) {
            *g = SpacetimeGaussian::from_params(p.try_into().expect("parameter width"));
            let q = g.rotation;
            let norm = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                g.rotation = q.map(|v| v / norm);
            }
        }
        if let (Some(field), Some(adam), Some(fg)) = (self.field.as_mut(), self.field_adam.as_mut(), field_grad) {
            let lr = self.cfg.lr.field * decay;
            adam.step(field.params_mut(), &fg, |_| lr);
        }
        if self.cfg.cc {
            let mut flat: Vec<f64> = self.cameras.iter().flat_map(cc_to_flat).collect();
            let lr = if self.cfg.lr.decay_all { self.cfg.lr.cc * decay } else { self.cfg.lr.cc };
            self.cc_adam.step(&mut flat, &cc_grads, |_| lr);
            for (cam, p) in self.cameras.iter_mut().zip(flat.chunks_exact(12)) {
                cc_from_flat(cam, p);
            }
        }
        let bad = self.cloud.non_finite_indices();
        if !bad.is_empty() {
            log::error!("non-finite parameters after step {}: primitives {:?}", self.iteration, bad);
            return Err(Error::NonFinite {
                step: self.iteration,
                indices: bad,
            });
        }

        let (c, f) = views[0];
        self.log.losses.push(LossRecord {
            iteration: self.iteration,
            camera: c,
            frame: f,
            total,
            l1: losses.l1,
            dssim: losses.dssim,
            reg: losses.reg,
            gate: losses.gate,
            cc: losses.cc,
            distill: losses.distill,
            distill_weight: losses.distill_weight,
        });
        self.iteration += 1;
        self.after_step()?;
        Ok(losses)
    }

    fn after_step(&mut self) -> Result<()> {
        let it = self.iteration;
        let period = self.cfg.density.period;
        if period > 0 && it % period == 0 && it < self.cfg.iterations {
            let report = relocate(&mut self.cloud, &self.cfg.density, it, &mut self.rng)?;
            for &i in &report.touched {
                self.adam.reset(i * P..(i + 1) * P);
            }
            self.log.relocations.push(RelocationRecord {
                iteration: it,
                dead_count: report.dead_count,
                dead_ratio: report.dead_ratio,
                max_multiplicity: report.max_multiplicity(),
            });
        }
        let every = self.cfg.histogram_every;
        if every > 0 && it % every == 0 && it < self.cfg.iterations {
            self.log.histograms.push((it, duration_histogram(&self.cloud, self.cfg.gated.then_some(self.cfg.gamma))?));
        }
        Ok(())
    }

    /// Runs the remaining iterations and packages the result.
    pub fn run(mut self) -> Result<(Checkpoint, TrainLog)> {
        while self.iteration < self.cfg.iterations {
            let loss = self.step()?;
            if self.iteration % 500 == 0 {
                log::info!("iteration {} loss {:.5}", self.iteration, loss.total(&self.cfg.weights));
            }
        }
        self.finish()
    }

    pub fn finish(mut self) -> Result<(Checkpoint, TrainLog)> {
        self.log
            .histograms
            .push((self.iteration, duration_histogram(&self.cloud, self.cfg.gated.then_some(self.cfg.gamma))?));
        self.log.final_dead_ratio = find_dead(&self.cloud, self.cfg.density.tau_opacity).len() as f64 / self.cloud.len() as f64;
        let checkpoint = Checkpoint {
            cloud: self.cloud,
            render: self.opts,
            field: self.field,
            color: self.cfg.cc.then(|| self.cameras.iter().map(|c| c.cc).collect()),
        };
        Ok((checkpoint, self.log))
    }
}

fn probe_mse(field: &VelocityField, probe: &[Anchor]) -> (f64, usize) {
    if probe.is_empty() {
        return (0.0, 0);
    }
    let err: Vec<f64> = probe
        .par_iter()
        .map(|a| (field.query(a.x, a.t) - a.v).length_squared())
        .collect();
    (err.iter().sum::<f64>() / probe.len() as f64, probe.len())
}

/// Initialization followed by the full optimization loop.
pub fn train(scene: &Scene, cfg: &TrainConfig) -> Result<TrainOutput> {
    let (trainer, init) = Trainer::new(scene, *cfg)?;
    let (checkpoint, log) = trainer.run()?;
    Ok(TrainOutput { checkpoint, log, init })
}

/// Cameras of `scene` carrying the checkpoint's colour correction, if any.
pub fn cameras_for(checkpoint: &Checkpoint, scene: &Scene) -> Result<Vec<Camera>> {
    let mut cams = scene.cameras().to_vec();
    if let Some(cc) = &checkpoint.color {
        if cc.len() != cams.len() {
            return Err(Error::InvalidInput(format!(
                "checkpoint has colour correction for {} cameras, scene has {}",
                cc.len(),
                cams.len()
            )));
        }
        for (cam, c) in cams.iter_mut().zip(cc) {
            cam.cc = *c;
        }
    }
    Ok(cams)
}

/// Renders the checkpoint with field velocities when it carries a field.
pub fn render_checkpoint(checkpoint: &Checkpoint, cam: &Camera, t: f64) -> crate::raster::RenderOutput {
    let vel = checkpoint
        .field
        .as_ref()
        .map(|f| field_velocities(&checkpoint.cloud, f, t, &checkpoint.render));
    render_with(&checkpoint.cloud, cam, t, &checkpoint.render, vel.as_deref())
}

/// Per-primitive velocities used for rendering at `t`.
pub fn checkpoint_velocities(checkpoint: &Checkpoint, t: f64) -> Option<Vec<DVec3>> {
    checkpoint
        .field
        .as_ref()
        .map(|f| field_velocities(&checkpoint.cloud, f, t, &checkpoint.render))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub views: usize,
    pub psnr: f64,
    pub dssim: f64,
    /// Endpoint error of the induced flow over actor pixels, in pixels per
    /// frame; NaN when no actor pixel was evaluated.
    pub epe: f64,
}

/// Mean PSNR, DSSIM and actor-region flow error over every camera at every
/// `frame_step`-th frame. Renders are clamped to [0, 1] before comparison.
pub fn evaluate(checkpoint: &Checkpoint, scene: &Scene, frame_step: usize) -> Result<EvalReport> {
    if frame_step == 0 {
        return Err(Error::InvalidInput("frame step must be positive".into()));
    }
    let cams = cameras_for(checkpoint, scene)?;
    let dt = scene.frame_dt();
    let last = scene.frame_count() - 1;
    let mut views = Vec::new();
    for c in 0..cams.len() {
        for f in (0..scene.frame_count()).step_by(frame_step) {
            views.push((c, f));
        }
    }
    let mut report = EvalReport {
        views: views.len(),
        ..Default::default()
    };
    let mut epe_sum = 0.0;
    let mut epe_pixels = 0usize;
    for &(c, f) in &views {
        let t = scene.time_of(f);
        let vel = checkpoint_velocities(checkpoint, t);
        let out = render_with(&checkpoint.cloud, &cams[c], t, &checkpoint.render, vel.as_deref());
        let pred = out.image.clamped();
        let gt = scene.render(c, t);
        report.psnr += psnr(&pred, &gt)?;
        report.dssim += dssim(&pred, &gt, 1)?;
        if f < last {
            let mask = scene.actor_mask(c, t);
            let count = mask.iter().filter(|m| **m).count();
            if count > 0 {
                let pred_flow = induced_flow(&checkpoint.cloud, &cams[c], t, dt, &checkpoint.render, vel.as_deref());
                let gt_flow = scene.flow(c, t, t + dt);
                epe_sum += epe(&pred_flow, &gt_flow, Some(&mask))? * count as f64;
                epe_pixels += count;
            }
        }
    }
    let n = views.len() as f64;
    report.psnr /= n;
    report.dssim /= n;
    report.epe = if epe_pixels > 0 { epe_sum / epe_pixels as f64 } else { f64::NAN };
    Ok(report)
}
