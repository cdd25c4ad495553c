//! Neural velocity field `v(x, t) = f(hashgrid(x), sinusoids(t))` and the
//! warm-start distillation that teaches it the initial per-primitive
//! velocities.

pub mod hashgrid;
pub mod mlp;

use glam::DVec3;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use hashgrid::HashGridConfig;
use mlp::{MlpCache, MlpShape};

/// Queries per parallel work item in the backward pass. Fixed so that the
/// reduction order, and hence the result, never depends on thread count.
const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FieldConfig {
    pub grid: HashGridConfig,
    pub hidden: usize,
    /// Sine/cosine pairs at 2⁰ … 2^(n-1) cycles over the unit time span.
    pub frequencies: usize,
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            grid: HashGridConfig::default(),
            hidden: 64,
            frequencies: 4,
        }
    }
}

impl FieldConfig {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.hidden == 0 {
            return Err(Error::Config("field hidden width must be positive".into()));
        }
        Ok(())
    }

    fn shape(&self) -> MlpShape {
        MlpShape {
            input: self.grid.output_dim() + 2 * self.frequencies,
            hidden: self.hidden,
            output: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VelocityField {
    cfg: FieldConfig,
    bbox_min: DVec3,
    bbox_max: DVec3,
    /// Grid tables followed by MLP weights.
    params: Vec<f64>,
}

impl VelocityField {
    /// Fresh field over the box `[bbox_min, bbox_max]`; the output layer starts
    /// at zero so every query initially returns zero velocity.
    pub fn new(cfg: FieldConfig, bbox_min: DVec3, bbox_max: DVec3, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut params = hashgrid::init_params(&cfg.grid, rng);
        params.extend(cfg.shape().init(rng));
        Self::from_parts(cfg, bbox_min, bbox_max, params)
    }

    pub fn from_parts(cfg: FieldConfig, bbox_min: DVec3, bbox_max: DVec3, params: Vec<f64>) -> Result<Self> {
        cfg.validate()?;
        if !(bbox_max.cmpgt(bbox_min).all()) {
            return Err(Error::InvalidInput("field bounding box is empty".into()));
        }
        let expect = cfg.grid.param_count() + cfg.shape().param_count();
        if params.len() != expect {
            return Err(Error::Format(format!("field expects {expect} parameters, got {}", params.len())));
        }
        Ok(Self {
            cfg,
            bbox_min,
            bbox_max,
            params,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.cfg
    }

    pub fn bbox(&self) -> (DVec3, DVec3) {
        (self.bbox_min, self.bbox_max)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Index range of the hash-grid tables inside [`params`](Self::params).
    pub fn grid_range(&self) -> std::ops::Range<usize> {
        0..self.cfg.grid.param_count()
    }

    /// Box-normalized coordinates, clamped to the unit cube.
    pub fn normalize(&self, x: DVec3) -> [f64; 3] {
        let u = (x - self.bbox_min) / (self.bbox_max - self.bbox_min);
        u.clamp(DVec3::ZERO, DVec3::ONE).to_array()
    }

    fn temporal_encoding(&self, t: f64, out: &mut [f64]) {
        for k in 0..self.cfg.frequencies {
            let w = 2.0 * std::f64::consts::PI * (1u64 << k) as f64 * t;
            out[2 * k] = w.sin();
            out[2 * k + 1] = w.cos();
        }
    }

    fn eval(&self, x: DVec3, t: f64, cache: &mut MlpCache) -> (DVec3, hashgrid::Footprint) {
        let grid_dim = self.cfg.grid.output_dim();
        let shape = self.cfg.shape();
        let fp = hashgrid::footprint(&self.cfg.grid, self.normalize(x));
        let mut input = vec![0.0; shape.input];
        let grid = self.grid_range();
        hashgrid::encode(&self.cfg.grid, &self.params[grid.clone()], &fp, &mut input[..grid_dim]);
        self.temporal_encoding(t, &mut input[grid_dim..]);
        let mut out = [0.0; 3];
        mlp::forward(&shape, &self.params[grid.end..], &input, cache, &mut out);
        (DVec3::from_array(out), fp)
    }

    pub fn query(&self, x: DVec3, t: f64) -> DVec3 {
        self.eval(x, t, &mut MlpCache::default()).0
    }

    /// Velocities at every point for a shared time.
    pub fn query_batch(&self, xs: &[DVec3], t: f64) -> Vec<DVec3> {
        xs.par_iter()
            .map_init(MlpCache::default, |cache, x| self.eval(*x, t, cache).0)
            .collect()
    }

    /// Gradient of `Σᵢ grad_v[i]·v(xs[i], ts[i])` w.r.t. all field parameters.
    /// Hash-table entries not touched by any query get exactly zero.
    pub fn backward(&self, xs: &[DVec3], ts: &[f64], grad_v: &[DVec3]) -> Vec<f64> {
        assert!(xs.len() == ts.len() && xs.len() == grad_v.len());
        let grid = self.grid_range();
        let shape = self.cfg.shape();
        let grid_dim = self.cfg.grid.output_dim();
        let mlp_params = &self.params[grid.end..];

        let partial: Vec<(Vec<(usize, f64)>, Vec<f64>)> = xs
            .par_chunks(CHUNK)
            .zip(ts.par_chunks(CHUNK))
            .zip(grad_v.par_chunks(CHUNK))
            .map(|((xc, tc), gc)| {
                let mut sparse = Vec::new();
                let mut dense = vec![0.0; shape.param_count()];
                let mut cache = MlpCache::default();
                let mut g_in = vec![0.0; shape.input];
                for ((x, t), g) in xc.iter().zip(tc).zip(gc) {
                    if *g == DVec3::ZERO {
                        continue;
                    }
                    let (_, fp) = self.eval(*x, *t, &mut cache);
                    mlp::backward(&shape, mlp_params, &cache, &g.to_array(), &mut dense, &mut g_in);
                    hashgrid::encode_backward(&self.cfg.grid, &fp, &g_in[..grid_dim], &mut sparse);
                }
                (sparse, dense)
            })
            .collect();

        let mut grad = vec![0.0; self.params.len()];
        for (sparse, dense) in partial {
            for (i, g) in sparse {
                grad[i] += g;
            }
            for (dst, g) in grad[grid.end..].iter_mut().zip(dense) {
                *dst += g;
            }
        }
        grad
    }
}

/// Distillation target: the field should output `v` at `(x, t)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub x: DVec3,
    pub t: f64,
    pub v: DVec3,
}

/// `Σ‖v(xᵢ, tᵢ) − vᵢ‖² / N` and its gradient w.r.t. the field parameters.
pub fn distill_loss(field: &VelocityField, anchors: &[Anchor]) -> Result<(f64, Vec<f64>)> {
    if anchors.is_empty() {
        return Err(Error::InvalidInput("distillation needs at least one anchor".into()));
    }
    let n = anchors.len() as f64;
    let residuals: Vec<DVec3> = anchors
        .par_iter()
        .map_init(MlpCache::default, |cache, a| field.eval(a.x, a.t, cache).0 - a.v)
        .collect();
    let loss = residuals.iter().map(|r| r.length_squared()).sum::<f64>() / n;
    let xs: Vec<DVec3> = anchors.iter().map(|a| a.x).collect();
    let ts: Vec<f64> = anchors.iter().map(|a| a.t).collect();
    let gv: Vec<DVec3> = residuals.iter().map(|r| *r * (2.0 / n)).collect();
    Ok((loss, field.backward(&xs, &ts, &gv)))
}

/// Distillation weight at `iter` of `total`: `peak` for the first 15 % of the
/// run, then a linear ramp to zero over the next 10 %.
pub fn distill_weight(iter: usize, total: usize, peak: f64) -> f64 {
    if total == 0 {
        return 0.0;
    }
    let u = iter as f64 / total as f64;
    if u < 0.15 {
        peak
    } else if u < 0.25 {
        peak * (0.25 - u) / 0.10
    } else {
        0.0
    }
}
