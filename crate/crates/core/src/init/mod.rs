//! Spatiotemporal initialization: keyframe point clouds, per-point velocity
//! estimates (k-NN between adjacent keyframes, multi-view flow
//! back-projection, and their masked fusion) and the initial cloud.

pub mod ply;

use glam::DVec3;
use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;
use rstar::primitives::GeomWithData;
use rstar::RTree;
use serde::{Deserialize, Serialize};

use crate::camera::Camera;
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::logit;
use crate::primitive::{rgb_to_sh_dc, SpacetimeGaussian, SH_COEFFS};
use crate::scene::{KeyframeCloud, Scene};

/// How initial velocities are estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VelocitySource {
    /// All velocities start at zero.
    Zero,
    Knn,
    /// Flow back-projection where multi-view consistent, k-NN elsewhere.
    #[default]
    Flow,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Frames between keyframes.
    pub stride: usize,
    /// Surface samples drawn per camera per keyframe.
    pub points_per_camera: usize,
    pub knn_k: usize,
    pub velocity: VelocitySource,
    pub initial_opacity: f64,
    /// Flow samples below this confidence are ignored.
    pub min_confidence: f64,
    /// Multi-view agreement radius as a fraction of the bounding-box diagonal.
    pub consistency: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            stride: 10,
            points_per_camera: 1500,
            knn_k: 3,
            velocity: VelocitySource::Flow,
            initial_opacity: 0.1,
            min_confidence: 0.5,
            consistency: 0.01,
        }
    }
}

impl InitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0 {
            return Err(Error::Config("keyframe stride must be ≥ 1".into()));
        }
        if self.knn_k == 0 {
            return Err(Error::Config("knn_k must be ≥ 1".into()));
        }
        if !(self.initial_opacity > 0.0 && self.initial_opacity < 1.0) {
            return Err(Error::Config("initial opacity must be in (0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.min_confidence) || self.consistency <= 0.0 {
            return Err(Error::Config("invalid flow confidence or consistency threshold".into()));
        }
        Ok(())
    }
}

/// Keyframe frame indices `0, stride, 2·stride, …` plus the final frame.
pub fn keyframe_indices(stride: usize, frame_count: usize) -> Result<Vec<usize>> {
    if stride == 0 || frame_count == 0 {
        return Err(Error::InvalidInput("stride and frame count must be positive".into()));
    }
    let mut out: Vec<usize> = (0..frame_count).step_by(stride).collect();
    if *out.last().unwrap() != frame_count - 1 {
        out.push(frame_count - 1);
    }
    Ok(out)
}

/// Point clouds of the visible surfaces at every keyframe.
pub fn sample_keyframes(
    scene: &Scene,
    stride: usize,
    points_per_camera: usize,
    rng: &mut impl Rng,
) -> Result<Vec<KeyframeCloud>> {
    Ok(keyframe_indices(stride, scene.frame_count())?
        .into_iter()
        .map(|f| scene.sample_cloud(scene.time_of(f), points_per_camera, rng))
        .collect())
}

type Indexed = GeomWithData<[f64; 3], usize>;

fn build_tree(points: &[DVec3]) -> RTree<Indexed> {
    RTree::bulk_load(points.iter().enumerate().map(|(i, p)| Indexed::new(p.to_array(), i)).collect())
}

/// Indices of the `k` nearest tree points to `q`, nearest first.
fn nearest(tree: &RTree<Indexed>, q: DVec3, k: usize) -> Vec<usize> {
    tree.nearest_neighbor_iter(&q.to_array()).take(k).map(|n| n.data).collect()
}

/// For each point of `from`: `(mean of its k nearest points in to − point) / (to.t − from.t)`.
/// `k` is clamped to the size of `to`.
pub fn knn_velocity(from: &KeyframeCloud, to: &KeyframeCloud, k: usize) -> Result<Vec<DVec3>> {
    if from.is_empty() || to.is_empty() || k == 0 {
        return Err(Error::InvalidInput("knn_velocity needs non-empty clouds and k ≥ 1".into()));
    }
    let dt = to.t - from.t;
    if dt == 0.0 {
        return Err(Error::InvalidInput("knn_velocity needs distinct keyframe times".into()));
    }
    let k = k.min(to.len());
    let tree = build_tree(&to.points);
    Ok(from
        .points
        .par_iter()
        .map(|p| {
            let ids = nearest(&tree, *p, k);
            let mean = ids.iter().map(|&i| to.points[i]).sum::<DVec3>() / k as f64;
            (mean - *p) / dt
        })
        .collect())
}

/// Masked selection `m·v_flow + (1 − m)·v_knn`.
pub fn fuse_velocity(v_knn: DVec3, v_flow: DVec3, mask: bool) -> DVec3 {
    if mask {
        v_flow
    } else {
        v_knn
    }
}

/// Dense optical flow with per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    /// Two channels, pixels.
    pub flow: Image,
    /// One channel in [0, 1].
    pub confidence: Image,
}

/// Source of optical flow and depth for the cameras of a scene.
pub trait FlowProvider: Sync {
    fn flow(&self, cam: usize, t_a: f64, t_b: f64) -> FlowField;
    /// Camera-space depth, infinite where unknown.
    fn depth(&self, cam: usize, t: f64) -> Image;
}

/// Exact flow and depth from a synthetic scene: confidence 1 wherever a
/// surface is hit (so on every actor pixel), 0 elsewhere.
pub struct SyntheticFlow<'a> {
    pub scene: &'a Scene,
}

impl FlowProvider for SyntheticFlow<'_> {
    fn flow(&self, cam: usize, t_a: f64, t_b: f64) -> FlowField {
        let depth = self.scene.depth(cam, t_a);
        FlowField {
            flow: self.scene.flow(cam, t_a, t_b),
            confidence: depth.map(|z| if z.is_finite() { 1.0 } else { 0.0 }),
        }
    }

    fn depth(&self, cam: usize, t: f64) -> Image {
        self.scene.depth(cam, t)
    }
}

/// Bilinear lookup with pixel centres at `+0.5`; `None` outside the image or
/// when any tap is non-finite.
fn bilinear(img: &Image, x: f64, y: f64) -> Option<Vec<f64>> {
    let (fx, fy) = (x - 0.5, y - 0.5);
    if fx < 0.0 || fy < 0.0 || fx > (img.width - 1) as f64 || fy > (img.height - 1) as f64 {
        return None;
    }
    let (x0, y0) = (fx.floor() as usize, fy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(img.width - 1), (y0 + 1).min(img.height - 1));
    let (ux, uy) = (fx - x0 as f64, fy - y0 as f64);
    let mut out = vec![0.0; img.channels];
    for (px, py, w) in [
        (x0, y0, (1.0 - ux) * (1.0 - uy)),
        (x1, y0, ux * (1.0 - uy)),
        (x0, y1, (1.0 - ux) * uy),
        (x1, y1, ux * uy),
    ] {
        for (o, v) in out.iter_mut().zip(img.pixel(px, py)) {
            if !v.is_finite() {
                return None;
            }
            *o += w * v;
        }
    }
    Some(out)
}

/// Per-camera inputs to [`flow_velocity`].
pub struct FlowView<'a> {
    pub camera: &'a Camera,
    pub flow: &'a FlowField,
    pub depth_a: &'a Image,
    pub depth_b: &'a Image,
}

/// Velocity of each point from multi-view flow between `t_a` and `t_b`.
///
/// Each point is projected into every view where it is visible at `t_a`
/// (depth test within `eps`), displaced by the sampled flow and lifted back to
/// 3D with the depth at `t_b`, giving one displacement per view. Views with
/// confidence below `min_confidence` are dropped. The mask is set iff at least
/// two displacements agree within `eps`; the velocity is then their mean over
/// the time step, and zero otherwise.
pub fn flow_velocity(
    points: &[DVec3],
    views: &[FlowView],
    t_a: f64,
    t_b: f64,
    min_confidence: f64,
    eps: f64,
) -> Result<Vec<(DVec3, bool)>> {
    if views.len() < 2 {
        return Err(Error::InvalidInput("flow_velocity needs at least two views".into()));
    }
    let dt = t_b - t_a;
    if dt == 0.0 {
        return Err(Error::InvalidInput("flow_velocity needs distinct times".into()));
    }
    Ok(points
        .par_iter()
        .map(|p| {
            // per-view displacement, lifting both ends with the same sampled
            // depths so that sampling error cancels for static surfaces
            let mut moves = Vec::with_capacity(views.len());
            for v in views {
                let Some((px, z)) = v.camera.project(*p) else { continue };
                let Some(za) = bilinear(v.depth_a, px[0], px[1]) else { continue };
                if (za[0] - z).abs() > eps {
                    continue;
                }
                let Some(conf) = bilinear(&v.flow.confidence, px[0], px[1]) else { continue };
                if conf[0] < min_confidence {
                    continue;
                }
                let Some(f) = bilinear(&v.flow.flow, px[0], px[1]) else { continue };
                let q = [px[0] + f[0], px[1] + f[1]];
                let Some(zb) = bilinear(v.depth_b, q[0], q[1]) else { continue };
                moves.push(v.camera.unproject(q, zb[0]) - v.camera.unproject(px, za[0]));
            }
            let support = |i: usize| moves.iter().filter(|e| (**e - moves[i]).length() <= eps).count();
            let Some(best) = (0..moves.len()).max_by(|&a, &b| support(a).cmp(&support(b)).then(b.cmp(&a))) else {
                return (DVec3::ZERO, false);
            };
            let agreeing: Vec<DVec3> = moves.iter().copied().filter(|e| (*e - moves[best]).length() <= eps).collect();
            if agreeing.len() < 2 {
                return (DVec3::ZERO, false);
            }
            let shift = agreeing.iter().sum::<DVec3>() / agreeing.len() as f64;
            (shift / dt, true)
        })
        .collect())
}

/// Initial velocities of every keyframe's points. Each keyframe looks at the
/// next one (forward difference); the last looks back at its predecessor.
/// Returns per keyframe the velocities and the flow mask.
pub fn keyframe_velocities(
    keyframes: &[KeyframeCloud],
    source: VelocitySource,
    cfg: &InitConfig,
    provider: Option<(&dyn FlowProvider, &[Camera], f64)>,
) -> Result<Vec<(Vec<DVec3>, Vec<bool>)>> {
    let mut out = Vec::with_capacity(keyframes.len());
    for (i, kf) in keyframes.iter().enumerate() {
        let zero = (vec![DVec3::ZERO; kf.len()], vec![false; kf.len()]);
        if source == VelocitySource::Zero || keyframes.len() < 2 || kf.is_empty() {
            out.push(zero);
            continue;
        }
        let other = if i + 1 < keyframes.len() { &keyframes[i + 1] } else { &keyframes[i - 1] };
        if other.is_empty() {
            out.push(zero);
            continue;
        }
        let knn = knn_velocity(kf, other, cfg.knn_k)?;
        if source == VelocitySource::Knn {
            out.push((knn, vec![false; kf.len()]));
            continue;
        }
        let (provider, cameras, diagonal) =
            provider.ok_or_else(|| Error::InvalidInput("flow initialization needs a flow provider".into()))?;
        let flows: Vec<FlowField> = (0..cameras.len()).map(|c| provider.flow(c, kf.t, other.t)).collect();
        let depth_a: Vec<Image> = (0..cameras.len()).map(|c| provider.depth(c, kf.t)).collect();
        let depth_b: Vec<Image> = (0..cameras.len()).map(|c| provider.depth(c, other.t)).collect();
        let views: Vec<FlowView> = (0..cameras.len())
            .map(|c| FlowView {
                camera: &cameras[c],
                flow: &flows[c],
                depth_a: &depth_a[c],
                depth_b: &depth_b[c],
            })
            .collect();
        let flow = flow_velocity(&kf.points, &views, kf.t, other.t, cfg.min_confidence, cfg.consistency * diagonal)?;
        let fused = knn.iter().zip(&flow).map(|(k, (f, m))| fuse_velocity(*k, *f, *m)).collect();
        out.push((fused, flow.iter().map(|(_, m)| *m).collect()));
    }
    Ok(out)
}

/// Splits `total` across groups proportionally to `sizes` (largest remainder,
/// ties to the earlier group), never exceeding a group's size.
fn stratified_quota(sizes: &[usize], total: usize) -> Vec<usize> {
    let sum: usize = sizes.iter().sum();
    if sum <= total {
        return sizes.to_vec();
    }
    let mut quota: Vec<usize> = sizes.iter().map(|s| s * total / sum).collect();
    let mut rest: Vec<(usize, usize)> = sizes.iter().enumerate().map(|(i, s)| (s * total % sum, i)).collect();
    rest.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut left = total - quota.iter().sum::<usize>();
    for (_, i) in rest {
        if left == 0 {
            break;
        }
        if quota[i] < sizes[i] {
            quota[i] += 1;
            left -= 1;
        }
    }
    quota
}

/// Builds the initial cloud from keyframes and their velocities, subsampled
/// to `budget` uniformly at random within each keyframe.
pub fn build_cloud(
    keyframes: &[KeyframeCloud],
    velocities: &[Vec<DVec3>],
    duration: f64,
    initial_opacity: f64,
    budget: usize,
    rng: &mut impl Rng,
) -> Result<GaussianCloud> {
    if budget < keyframes.len() {
        return Err(Error::InvalidInput(format!(
            "budget {budget} cannot cover {} keyframes",
            keyframes.len()
        )));
    }
    if !(duration > 0.0) {
        return Err(Error::InvalidInput("initial duration must be positive".into()));
    }
    let sizes: Vec<usize> = keyframes.iter().map(|k| k.len()).collect();
    let quota = stratified_quota(&sizes, budget);
    let mut prims = Vec::with_capacity(quota.iter().sum());
    for ((kf, vel), q) in keyframes.iter().zip(velocities).zip(quota) {
        let mut chosen = index::sample(rng, kf.len(), q).into_vec();
        chosen.sort_unstable();
        let pts: Vec<DVec3> = chosen.iter().map(|&i| kf.points[i]).collect();
        let tree = build_tree(&pts);
        for (j, &i) in chosen.iter().enumerate() {
            // nearest() returns the point itself first
            let near = nearest(&tree, pts[j], 4);
            let spread = if near.len() > 1 {
                let d2 = near[1..].iter().map(|&n| (pts[n] - pts[j]).length_squared()).sum::<f64>();
                (d2 / (near.len() - 1) as f64).sqrt()
            } else {
                0.01
            };
            let mut sh = [[0.0; 3]; SH_COEFFS];
            sh[0] = rgb_to_sh_dc(kf.colors[i]);
            prims.push(SpacetimeGaussian {
                mean: kf.points[i],
                t_center: kf.t,
                log_duration: duration.ln(),
                velocity: vel[i],
                log_scale: DVec3::splat(spread.max(1e-4).ln()),
                rotation: [1.0, 0.0, 0.0, 0.0],
                opacity_logit: logit(initial_opacity),
                sh,
                gate_logit: 0.0,
            });
        }
    }
    GaussianCloud::from_primitives(prims, budget)
}

/// Diagnostics of one initialization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InitReport {
    pub keyframes: usize,
    pub points: usize,
    /// Fraction of points whose velocity came from flow.
    pub flow_fraction: f64,
    /// Mean ‖v − v_gt‖ over actor points (NaN if none).
    pub actor_velocity_error: f64,
}

/// Full initialization against a synthetic scene.
pub fn init_cloud(scene: &Scene, cfg: &InitConfig, budget: usize, rng: &mut impl Rng) -> Result<(GaussianCloud, InitReport)> {
    cfg.validate()?;
    let keyframes = sample_keyframes(scene, cfg.stride, cfg.points_per_camera, rng)?;
    let provider = SyntheticFlow { scene };
    let vel = keyframe_velocities(
        &keyframes,
        cfg.velocity,
        cfg,
        Some((&provider, scene.cameras(), scene.bbox_diagonal())),
    )?;
    let report = velocity_report(&keyframes, &vel);
    let velocities: Vec<Vec<DVec3>> = vel.into_iter().map(|(v, _)| v).collect();
    let duration = cfg.stride as f64 * scene.frame_dt();
    let cloud = build_cloud(&keyframes, &velocities, duration, cfg.initial_opacity, budget, rng)?;
    Ok((cloud, report))
}

/// Compares estimated keyframe velocities with the ground truth.
pub fn velocity_report(keyframes: &[KeyframeCloud], vel: &[(Vec<DVec3>, Vec<bool>)]) -> InitReport {
    let mut err = 0.0;
    let mut actor = 0usize;
    let mut flow = 0usize;
    let mut points = 0usize;
    for (kf, (v, m)) in keyframes.iter().zip(vel) {
        points += kf.len();
        flow += m.iter().filter(|b| **b).count();
        for i in 0..kf.len() {
            if kf.on_actor[i] {
                err += (v[i] - kf.gt_velocity[i]).length();
                actor += 1;
            }
        }
    }
    InitReport {
        keyframes: keyframes.len(),
        points,
        flow_fraction: if points == 0 { 0.0 } else { flow as f64 / points as f64 },
        actor_velocity_error: if actor == 0 { f64::NAN } else { err / actor as f64 },
    }
}

/// Wraps an external point cloud as a single keyframe at time `t`.
pub fn keyframe_from_points(points: Vec<DVec3>, colors: Vec<[f64; 3]>, t: f64) -> Result<KeyframeCloud> {
    if points.len() != colors.len() {
        return Err(Error::InvalidInput("point and colour counts differ".into()));
    }
    let n = points.len();
    Ok(KeyframeCloud {
        t,
        points,
        colors,
        gt_velocity: vec![DVec3::ZERO; n],
        on_actor: vec![false; n],
    })
}

#[cfg(test)]
mod tests;
