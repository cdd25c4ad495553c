//! Analyses of a trained model: duration stratification, persistent versus
//! transient partition renders, background motion leakage, space-time
//! slices and run-to-run variance.

use std::fmt::Write as _;
use std::path::Path;

use glam::DVec3;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::checkpoint::Checkpoint;
use crate::cloud::GaussianCloud;
use crate::density::find_dead;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::psnr;
use crate::primitive::OpacityMode;
use crate::raster::attribute::{induced_flow, render_attribute, Attribute};
use crate::raster::{render_with, RenderOptions, RenderOutput};
use crate::scene::Scene;
use crate::trainer::{cameras_for, checkpoint_velocities, evaluate, train, EvalReport, TrainConfig, TrainLog};

/// Default duration cutoff (relative to the unit sequence span) separating
/// transient from persistent primitives; also the gate cutoff in gated mode.
pub const PARTITION_CUTOFF: f64 = 0.5;
/// Gate value above which a primitive counts as persistent.
pub const PERSISTENT_GATE: f64 = 0.9;
/// Bin width of the duration histogram below the final `[1, ∞)` bin.
const BIN_WIDTH: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DurationHistogram {
    /// `counts.len() + 1` edges; the last is infinite.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    /// Summed base opacity per bin.
    pub mass: Vec<f64>,
    /// Share of opacity mass in the final bin, or on primitives with gate
    /// above [`PERSISTENT_GATE`] in gated mode.
    pub persistent_fraction: f64,
    /// The same share counted in primitives.
    pub persistent_count_fraction: f64,
}

impl DurationHistogram {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    fn below(&self, cutoff: f64) -> impl Iterator<Item = usize> + '_ {
        self.edges
            .windows(2)
            .enumerate()
            .filter(move |(_, e)| e[1] <= cutoff + 1e-12)
            .map(|(k, _)| k)
    }

    /// Share of opacity mass on primitives with duration below `cutoff` (a
    /// bin edge).
    pub fn fraction_below(&self, cutoff: f64) -> f64 {
        let total: f64 = self.mass.iter().sum();
        self.below(cutoff).map(|k| self.mass[k]).sum::<f64>() / total
    }

    /// Share of primitives with duration below `cutoff` (a bin edge).
    pub fn count_fraction_below(&self, cutoff: f64) -> f64 {
        self.below(cutoff).map(|k| self.counts[k]).sum::<usize>() as f64 / self.total() as f64
    }
}

/// Histogram of temporal durations relative to the unit span, ten bins of
/// width 0.1 plus a final `[1, ∞)` bin. `gate_gamma` switches the persistent
/// fraction to the gate criterion.
pub fn duration_histogram(cloud: &GaussianCloud, gate_gamma: Option<f64>) -> Result<DurationHistogram> {
    if cloud.is_empty() {
        return Err(Error::InvalidInput("duration histogram of an empty cloud".into()));
    }
    let bins = (1.0 / BIN_WIDTH).round() as usize;
    let mut edges: Vec<f64> = (0..=bins).map(|k| k as f64 * BIN_WIDTH).collect();
    edges.push(f64::INFINITY);
    let mut counts = vec![0usize; bins + 1];
    let mut mass = vec![0.0; bins + 1];
    let mut persistent = (0usize, 0.0);
    for g in cloud.primitives() {
        let k = ((g.duration() / BIN_WIDTH).floor() as usize).min(bins);
        counts[k] += 1;
        mass[k] += g.opacity();
        let is_persistent = match gate_gamma {
            Some(gamma) => g.gate(gamma) > PERSISTENT_GATE,
            None => k == bins,
        };
        if is_persistent {
            persistent.0 += 1;
            persistent.1 += g.opacity();
        }
    }
    let total_mass: f64 = mass.iter().sum();
    Ok(DurationHistogram {
        edges,
        counts,
        mass,
        persistent_fraction: persistent.1 / total_mass,
        persistent_count_fraction: persistent.0 as f64 / cloud.len() as f64,
    })
}

/// Whether a primitive belongs to the persistent subset.
pub fn is_persistent(g: &crate::SpacetimeGaussian, opts: &RenderOptions, cutoff: f64) -> bool {
    match opts.opacity_mode {
        OpacityMode::Legacy => g.duration() >= cutoff,
        OpacityMode::Gated => g.gate(opts.gamma) >= cutoff,
    }
}

/// Renders the transient and persistent subsets separately:
/// `(short, long)`. The split uses duration in legacy mode and the gate in
/// gated mode.
pub fn partition_render(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
    cutoff: f64,
) -> (RenderOutput, RenderOutput) {
    let keep: Vec<bool> = cloud.primitives().iter().map(|g| is_persistent(g, opts, cutoff)).collect();
    let subset = |persistent: bool| {
        let sub = cloud.filtered(|i, _| keep[i] == persistent);
        let vel: Option<Vec<DVec3>> =
            velocities.map(|v| v.iter().zip(&keep).filter(|(_, k)| **k == persistent).map(|(v, _)| *v).collect());
        render_with(&sub, cam, t, opts, vel.as_deref())
    };
    (subset(false), subset(true))
}

/// Mean magnitude of the induced optical flow, in pixels per frame, over the
/// pixels that show static geometry in the ground truth.
pub fn motion_leakage(
    cloud: &GaussianCloud,
    scene: &Scene,
    cam_index: usize,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
) -> f64 {
    let flow = induced_flow(cloud, cam, t, scene.frame_dt(), opts, velocities);
    let mask = scene.actor_mask(cam_index, t);
    let mut sum = 0.0;
    let mut count = 0usize;
    for (i, f) in flow.data.chunks_exact(2).enumerate() {
        if !mask[i] {
            sum += f[0].hypot(f[1]);
            count += 1;
        }
    }
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// [`motion_leakage`] of a checkpoint averaged over the scene cameras.
pub fn checkpoint_leakage(checkpoint: &Checkpoint, scene: &Scene, t: f64) -> Result<f64> {
    let cams = cameras_for(checkpoint, scene)?;
    let vel = checkpoint_velocities(checkpoint, t);
    let total: f64 = cams
        .iter()
        .enumerate()
        .map(|(k, cam)| motion_leakage(&checkpoint.cloud, scene, k, cam, t, &checkpoint.render, vel.as_deref()))
        .sum();
    Ok(total / cams.len() as f64)
}

/// Image-space speed (pixels per unit time) of the fastest actor seen from
/// camera `cam` at its look-at distance; full saturation in velocity maps.
pub fn velocity_reference(scene: &Scene, cam: usize) -> f64 {
    let c = &scene.cameras()[cam];
    let dist = (c.center() - DVec3::from_array(scene.desc.cameras[cam].target)).length();
    (scene.max_actor_speed() * c.fx / dist).max(1e-6)
}

/// One image row per frame, stacked top to bottom in frame order.
#[derive(Debug, Clone, PartialEq)]
pub struct XtSlice {
    pub image: Image,
}

impl XtSlice {
    pub fn frames(&self) -> usize {
        self.image.height
    }

    /// Mean absolute difference to another slice of the same shape.
    pub fn l1(&self, other: &XtSlice) -> Result<f64> {
        if !self.image.same_shape(&other.image) {
            return Err(Error::InvalidInput("slices differ in shape".into()));
        }
        let n = self.image.data.len() as f64;
        Ok(self.image.data.iter().zip(&other.image.data).map(|(a, b)| (a - b).abs()).sum::<f64>() / n)
    }
}

/// Stacks row `row` of `render(f)` for every frame `f < frames`.
pub fn xt_slice(frames: usize, row: usize, mut render: impl FnMut(usize) -> Result<Image>) -> Result<XtSlice> {
    if frames == 0 {
        return Err(Error::InvalidInput("slice needs at least one frame".into()));
    }
    let mut out: Option<Image> = None;
    for f in 0..frames {
        let img = render(f)?;
        if row >= img.height {
            return Err(Error::InvalidInput(format!("row {row} outside image of height {}", img.height)));
        }
        let dst = out.get_or_insert_with(|| Image::zeros(img.width, frames, img.channels));
        if dst.width != img.width || dst.channels != img.channels {
            return Err(Error::InvalidInput("frames differ in shape".into()));
        }
        let w = img.width * img.channels;
        dst.data[f * w..(f + 1) * w].copy_from_slice(img.row(row));
    }
    Ok(XtSlice {
        image: out.expect("at least one frame"),
    })
}

/// Ground-truth slice of camera `cam`.
pub fn xt_slice_gt(scene: &Scene, cam: usize, row: usize) -> Result<XtSlice> {
    xt_slice(scene.frame_count(), row, |f| Ok(scene.render(cam, scene.time_of(f))))
}

/// Slice of a trained model, clamped to [0, 1] like the ground truth.
pub fn xt_slice_checkpoint(checkpoint: &Checkpoint, scene: &Scene, cam: usize, row: usize) -> Result<XtSlice> {
    let cams = cameras_for(checkpoint, scene)?;
    xt_slice(scene.frame_count(), row, |f| {
        let t = scene.time_of(f);
        let vel = checkpoint_velocities(checkpoint, t);
        Ok(render_with(&checkpoint.cloud, &cams[cam], t, &checkpoint.render, vel.as_deref()).image.clamped())
    })
}

pub use crate::math::mean_std;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceRow {
    pub name: String,
    pub runs: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub dssim_mean: f64,
    pub dssim_std: f64,
    pub epe_mean: f64,
    pub epe_std: f64,
}

/// Aggregates per-seed evaluations of one configuration.
pub fn summarize(name: &str, reports: &[EvalReport]) -> VarianceRow {
    let col = |f: fn(&EvalReport) -> f64| mean_std(&reports.iter().map(f).collect::<Vec<_>>());
    let (psnr_mean, psnr_std) = col(|r| r.psnr);
    let (dssim_mean, dssim_std) = col(|r| r.dssim);
    let (epe_mean, epe_std) = col(|r| r.epe);
    VarianceRow {
        name: name.to_string(),
        runs: reports.len(),
        psnr_mean,
        psnr_std,
        dssim_mean,
        dssim_std,
        epe_mean,
        epe_std,
    }
}

/// Trains every configuration once per seed and tabulates mean ± std of the
/// evaluation metrics. Evaluation uses every `eval_step`-th frame.
pub fn variance_report(
    scene: &Scene,
    configs: &[(String, TrainConfig)],
    seeds: &[u64],
    eval_step: usize,
) -> Result<Vec<VarianceRow>> {
    if seeds.len() < 3 {
        return Err(Error::InvalidInput("variance report needs at least three seeds".into()));
    }
    configs
        .iter()
        .map(|(name, cfg)| {
            let reports = seeds
                .iter()
                .map(|&seed| {
                    let out = train(scene, &TrainConfig { seed, ..*cfg })?;
                    evaluate(&out.checkpoint, scene, eval_step)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(summarize(name, &reports))
        })
        .collect()
}

/// Markdown table of variance rows.
pub fn variance_table(rows: &[VarianceRow]) -> String {
    let mut s = String::from("| config | runs | PSNR | DSSIM | EPE |\n|---|---|---|---|---|\n");
    for r in rows {
        let _ = writeln!(
            s,
            "| {} | {} | {:.3} ± {:.3} | {:.4} ± {:.4} | {:.3} ± {:.3} |",
            r.name, r.runs, r.psnr_mean, r.psnr_std, r.dssim_mean, r.dssim_std, r.epe_mean, r.epe_std
        );
    }
    s
}

/// Everything the report shows for one trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub histogram: DurationHistogram,
    /// Share of opacity mass with duration below 0.3.
    pub transient_fraction: f64,
    /// Mean PSNR of the persistent and transient partition renders against
    /// the actor-free ground truth.
    pub long_background_psnr: f64,
    pub short_background_psnr: f64,
    /// Mean induced flow over static pixels, pixels per frame.
    pub motion_leakage: f64,
    /// L1 between the trained and ground-truth space-time slices of camera 0
    /// through the middle row.
    pub xt_l1: f64,
    pub dead_ratio: f64,
    pub eval: EvalReport,
}

/// Runs every analysis on `checkpoint`. With `out_dir`, also writes the
/// partition renders, velocity map and space-time slices as PNGs.
pub fn diagnose(checkpoint: &Checkpoint, scene: &Scene, tau_opacity: f64, out_dir: Option<&Path>) -> Result<Diagnosis> {
    let opts = &checkpoint.render;
    let gated = matches!(opts.opacity_mode, OpacityMode::Gated);
    let histogram = duration_histogram(&checkpoint.cloud, gated.then_some(opts.gamma))?;
    let cams = cameras_for(checkpoint, scene)?;
    let background = scene.background();
    let t_mid = scene.time_of(scene.frame_count() / 2);
    let vel = checkpoint_velocities(checkpoint, t_mid);

    let mut long_psnr = 0.0;
    let mut short_psnr = 0.0;
    for (k, cam) in cams.iter().enumerate() {
        let (short, long) = partition_render(&checkpoint.cloud, cam, t_mid, opts, vel.as_deref(), PARTITION_CUTOFF);
        let bg = background.render(k, t_mid);
        long_psnr += psnr(&long.image.clamped(), &bg)?;
        short_psnr += psnr(&short.image.clamped(), &bg)?;
        if k == 0 {
            if let Some(dir) = out_dir {
                short.image.clamped().save_png(dir.join("partition_short.png"))?;
                long.image.clamped().save_png(dir.join("partition_long.png"))?;
                let v_ref = velocity_reference(scene, k);
                let velocity = render_attribute(&checkpoint.cloud, cam, t_mid, opts, vel.as_deref(), Attribute::Velocity { v_ref });
                velocity.image.save_png(dir.join("velocity.png"))?;
            }
        }
    }
    let n = cams.len() as f64;
    let row = scene.desc.height / 2;
    let trained = xt_slice_checkpoint(checkpoint, scene, 0, row)?;
    let gt = xt_slice_gt(scene, 0, row)?;
    if let Some(dir) = out_dir {
        trained.image.save_png(dir.join("xt_slice.png"))?;
        gt.image.save_png(dir.join("xt_slice_gt.png"))?;
    }
    Ok(Diagnosis {
        transient_fraction: histogram.fraction_below(0.3),
        histogram,
        long_background_psnr: long_psnr / n,
        short_background_psnr: short_psnr / n,
        motion_leakage: checkpoint_leakage(checkpoint, scene, t_mid)?,
        xt_l1: trained.l1(&gt)?,
        dead_ratio: find_dead(&checkpoint.cloud, tau_opacity).len() as f64 / checkpoint.cloud.len() as f64,
        eval: evaluate(checkpoint, scene, 1)?,
    })
}

impl Diagnosis {
    /// Markdown report; the training log adds relocation and warm-start
    /// summaries when given.
    pub fn to_markdown(&self, log: Option<&TrainLog>, variance: Option<&[VarianceRow]>) -> String {
        let mut s = String::from("# Diagnostics report\n\n");
        let e = &self.eval;
        let _ = writeln!(
            s,
            "Evaluation over {} views: PSNR {:.3} dB, DSSIM {:.4}, actor EPE {:.3} px/frame.\n",
            e.views, e.psnr, e.dssim, e.epe
        );

        s.push_str("## Duration stratification\n\n| duration | count | opacity mass |\n|---|---|---|\n");
        let h = &self.histogram;
        for (k, c) in h.counts.iter().enumerate() {
            let hi = if h.edges[k + 1].is_finite() { format!("{:.1}", h.edges[k + 1]) } else { "∞".into() };
            let _ = writeln!(s, "| [{:.1}, {hi}) | {c} | {:.2} |", h.edges[k], h.mass[k]);
        }
        let _ = writeln!(
            s,
            "\nPersistent share {:.3} of opacity mass ({:.3} of primitives); transient share (duration < 0.3) {:.3} of opacity mass.\n",
            h.persistent_fraction, h.persistent_count_fraction, self.transient_fraction
        );

        s.push_str("## Partition renders\n\n");
        let _ = writeln!(
            s,
            "PSNR against the actor-free background: persistent subset {:.2} dB, transient subset {:.2} dB \
             (`partition_long.png`, `partition_short.png`).\n",
            self.long_background_psnr, self.short_background_psnr
        );

        s.push_str("## Motion leakage\n\n");
        let _ = writeln!(
            s,
            "Mean induced flow over static pixels: {:.4} px/frame (`velocity.png`).\n",
            self.motion_leakage
        );

        s.push_str("## Relocation\n\n");
        let _ = writeln!(
            s,
            "Space-time slice L1 to ground truth: {:.4} (`xt_slice.png` vs `xt_slice_gt.png`). Final dead ratio {:.4}.",
            self.xt_l1, self.dead_ratio
        );
        if let Some(log) = log {
            if let Some(last) = log.relocations.last() {
                let _ = writeln!(
                    s,
                    "{} relocation events; the last, at iteration {}, moved {} primitives.",
                    log.relocations.len(),
                    last.iteration,
                    last.dead_count
                );
            }
            if let Some(min) = log.warm_start.iter().map(|r| r.mse).reduce(f64::min) {
                let end = log.warm_start.last().map_or(f64::NAN, |r| r.mse);
                let _ = writeln!(s, "\nWarm start: field-vs-anchor MSE minimum {min:.3e}, at hand-over {end:.3e}.");
            }
        }
        s.push('\n');

        s.push_str("## Run-to-run variance\n\n");
        match variance {
            Some(rows) => s.push_str(&variance_table(rows)),
            None => s.push_str("Not computed for a single run; see the `ablate` command.\n"),
        }
        s
    }
}
