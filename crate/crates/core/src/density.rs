//! Relocation-based density control under a fixed primitive budget.
//!
//! Primitives whose base opacity has fallen to `tau_opacity` or below are
//! dead. Each relocation event moves every dead primitive onto a target drawn
//! from the live population with probability proportional to
//! `opacity · (1 + grad / max_grad)`, then fills in its parameters according to
//! the inheritance policy.

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::math::logit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RelocationPolicy {
    /// Copy everything except opacity and scale, which the dead primitive keeps.
    PartialCopy,
    /// Copy every parameter.
    ExactCopy,
    /// Copy every parameter, then split the target's opacity across the
    /// target and its clones so that their stacked opacity is unchanged.
    #[default]
    Mcmc,
}

impl RelocationPolicy {
    pub fn name(self) -> &'static str {
        match self {
            RelocationPolicy::PartialCopy => "partial_copy",
            RelocationPolicy::ExactCopy => "exact_copy",
            RelocationPolicy::Mcmc => "mcmc",
        }
    }
}

impl std::str::FromStr for RelocationPolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "partial_copy" => Ok(RelocationPolicy::PartialCopy),
            "exact_copy" => Ok(RelocationPolicy::ExactCopy),
            "mcmc" => Ok(RelocationPolicy::Mcmc),
            other => Err(Error::Config(format!("unknown relocation policy {other}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DensityConfig {
    pub policy: RelocationPolicy,
    pub tau_opacity: f64,
    /// Iterations between relocation events.
    pub period: usize,
    /// Std-dev of positional noise added to relocated primitives, in units of
    /// their mean scale. Zero disables it.
    pub noise: f64,
}

impl Default for DensityConfig {
    fn default() -> Self {
        Self {
            policy: RelocationPolicy::Mcmc,
            tau_opacity: 0.005,
            period: 100,
            noise: 0.0,
        }
    }
}

impl DensityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau_opacity > 0.0 && self.tau_opacity < 1.0) {
            return Err(Error::Config("tau_opacity must be in (0, 1)".into()));
        }
        if self.period == 0 {
            return Err(Error::Config("relocation period must be positive".into()));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config("relocation noise must be ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RelocationReport {
    pub iteration: usize,
    pub dead_count: usize,
    pub dead_ratio: f64,
    /// `(target, clones)` for every chosen target, by target index.
    pub clone_counts: Vec<(usize, usize)>,
    /// Primitives whose parameters changed (dead ones and MCMC targets).
    pub touched: Vec<usize>,
}

impl RelocationReport {
    pub fn max_multiplicity(&self) -> usize {
        self.clone_counts.iter().map(|c| c.1).max().unwrap_or(0)
    }
}

/// Indices with base opacity `≤ tau`.
pub fn find_dead(cloud: &GaussianCloud, tau: f64) -> Vec<usize> {
    cloud
        .primitives()
        .iter()
        .enumerate()
        .filter(|(_, g)| g.opacity() <= tau)
        .map(|(i, _)| i)
        .collect()
}

/// Sampling weight of every primitive (zero for dead ones).
pub fn target_weights(cloud: &GaussianCloud, dead: &[usize]) -> Vec<f64> {
    let grads: Vec<f64> = cloud.grad_stats().iter().map(|s| s.mean()).collect();
    let max = grads.iter().copied().fold(0.0f64, f64::max);
    let mut w: Vec<f64> = cloud
        .primitives()
        .iter()
        .zip(&grads)
        .map(|(g, gr)| g.opacity() * (1.0 + if max > 0.0 { gr / max } else { 0.0 }))
        .collect();
    for &d in dead {
        w[d] = 0.0;
    }
    w
}

/// One target per dead primitive.
pub fn sample_targets(cloud: &GaussianCloud, dead: &[usize], rng: &mut impl Rng) -> Result<Vec<usize>> {
    if dead.is_empty() {
        return Ok(Vec::new());
    }
    let w = target_weights(cloud, dead);
    let dist = WeightedIndex::new(&w)
        .map_err(|_| Error::InvalidInput("no live primitive to relocate onto".into()))?;
    Ok(dead.iter().map(|_| dist.sample(rng)).collect())
}

/// Opacity shared by a target and its `clones` copies so that stacking all
/// of them reproduces the target's opacity.
pub fn split_opacity(opacity: f64, clones: usize) -> f64 {
    1.0 - (1.0 - opacity).powf(1.0 / (clones as f64 + 1.0))
}

/// Runs one relocation event and resets the gradient statistics.
pub fn relocate(cloud: &mut GaussianCloud, cfg: &DensityConfig, iteration: usize, rng: &mut impl Rng) -> Result<RelocationReport> {
    let dead = find_dead(cloud, cfg.tau_opacity);
    let n = cloud.len();
    let mut report = RelocationReport {
        iteration,
        dead_count: dead.len(),
        dead_ratio: if n == 0 { 0.0 } else { dead.len() as f64 / n as f64 },
        ..Default::default()
    };
    if dead.is_empty() {
        cloud.reset_grad_stats();
        return Ok(report);
    }
    let targets = sample_targets(cloud, &dead, rng)?;
    let mut counts = std::collections::BTreeMap::<usize, usize>::new();
    for &t in &targets {
        *counts.entry(t).or_default() += 1;
    }
    let prims = cloud.primitives_mut();
    let originals: Vec<_> = counts.keys().map(|&t| (t, prims[t].clone())).collect();
    let source = |t: usize| &originals[originals.binary_search_by_key(&t, |o| o.0).unwrap()].1;
    for (&d, &t) in dead.iter().zip(&targets) {
        let src = source(t);
        let dst = &mut prims[d];
        match cfg.policy {
            RelocationPolicy::PartialCopy => {
                let (opacity, scale) = (dst.opacity_logit, dst.log_scale);
                *dst = src.clone();
                dst.opacity_logit = opacity;
                dst.log_scale = scale;
            }
            RelocationPolicy::ExactCopy => *dst = src.clone(),
            RelocationPolicy::Mcmc => {
                *dst = src.clone();
                dst.opacity_logit = logit(split_opacity(src.opacity(), counts[&t]));
            }
        }
    }
    if cfg.policy == RelocationPolicy::Mcmc {
        for (&t, &c) in &counts {
            prims[t].opacity_logit = logit(split_opacity(prims[t].opacity(), c));
        }
    }
    if cfg.noise > 0.0 {
        let normal = Normal::new(0.0, 1.0).unwrap();
        for &d in &dead {
            let s = prims[d].scale();
            let sigma = cfg.noise * (s.x + s.y + s.z) / 3.0;
            for k in 0..3 {
                prims[d].mean[k] += sigma * normal.sample(rng);
            }
        }
    }
    report.touched = dead.clone();
    if cfg.policy == RelocationPolicy::Mcmc {
        report.touched.extend(counts.keys());
        report.touched.sort_unstable();
    }
    report.clone_counts = counts.into_iter().collect();
    cloud.reset_grad_stats();
    Ok(report)
}
