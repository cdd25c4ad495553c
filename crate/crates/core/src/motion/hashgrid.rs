//! Multi-resolution hash-grid encoding of points in the unit cube.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const PRIMES: [u64; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth: f64,
    pub features: usize,
    pub table_size: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            growth: 1.5,
            features: 2,
            table_size: 1 << 14,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.base_resolution == 0 || self.features == 0 || self.table_size == 0 {
            return Err(Error::Config("hash grid sizes must be positive".into()));
        }
        if !(self.growth >= 1.0) {
            return Err(Error::Config("hash grid growth must be >= 1".into()));
        }
        Ok(())
    }

    /// Cells per axis at `level`.
    pub fn resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth.powi(level as i32)).round() as usize
    }

    pub fn output_dim(&self) -> usize {
        self.levels * self.features
    }

    pub fn param_count(&self) -> usize {
        self.levels * self.table_size * self.features
    }
}

/// Table slot and trilinear weight of one cell corner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Corner {
    /// Offset of the entry's first feature in the flat parameter buffer.
    pub offset: usize,
    pub weight: f64,
}

/// The eight corners touched at each level by one query.
pub type Footprint = Vec<[Corner; 8]>;

/// Table index of a grid vertex at one level.
fn vertex_index(cfg: &HashGridConfig, res: usize, v: [usize; 3]) -> usize {
    let n = res + 1;
    if n * n * n <= cfg.table_size {
        v[0] + n * (v[1] + n * v[2])
    } else {
        let h = (v[0] as u64).wrapping_mul(PRIMES[0])
            ^ (v[1] as u64).wrapping_mul(PRIMES[1])
            ^ (v[2] as u64).wrapping_mul(PRIMES[2]);
        (h % cfg.table_size as u64) as usize
    }
}

/// Corners and weights of `u` (coordinates in [0, 1], clamped) at every level.
pub fn footprint(cfg: &HashGridConfig, u: [f64; 3]) -> Footprint {
    let u = u.map(|c| c.clamp(0.0, 1.0));
    (0..cfg.levels)
        .map(|level| {
            let res = cfg.resolution(level);
            let mut cell = [0usize; 3];
            let mut frac = [0.0; 3];
            for k in 0..3 {
                let p = u[k] * res as f64;
                let c = (p.floor() as usize).min(res - 1);
                cell[k] = c;
                frac[k] = p - c as f64;
            }
            let level_base = level * cfg.table_size * cfg.features;
            std::array::from_fn(|corner| {
                let bits = [corner & 1, (corner >> 1) & 1, (corner >> 2) & 1];
                let mut weight = 1.0;
                for k in 0..3 {
                    weight *= if bits[k] == 1 { frac[k] } else { 1.0 - frac[k] };
                }
                let v = [cell[0] + bits[0], cell[1] + bits[1], cell[2] + bits[2]];
                Corner {
                    offset: level_base + vertex_index(cfg, res, v) * cfg.features,
                    weight,
                }
            })
        })
        .collect()
}

/// Interpolated features for a footprint, level-major.
pub fn encode(cfg: &HashGridConfig, params: &[f64], fp: &Footprint, out: &mut [f64]) {
    let f = cfg.features;
    for (level, corners) in fp.iter().enumerate() {
        let dst = &mut out[level * f..(level + 1) * f];
        dst.fill(0.0);
        for c in corners {
            for j in 0..f {
                dst[j] += c.weight * params[c.offset + j];
            }
        }
    }
}

/// Appends `(parameter offset, gradient)` pairs for a feature gradient.
pub fn encode_backward(cfg: &HashGridConfig, fp: &Footprint, grad_features: &[f64], out: &mut Vec<(usize, f64)>) {
    let f = cfg.features;
    for (level, corners) in fp.iter().enumerate() {
        for c in corners {
            for j in 0..f {
                let g = c.weight * grad_features[level * f + j];
                if g != 0.0 {
                    out.push((c.offset + j, g));
                }
            }
        }
    }
}

pub fn init_params(cfg: &HashGridConfig, rng: &mut impl Rng) -> Vec<f64> {
    (0..cfg.param_count()).map(|_| rng.gen_range(-1e-4..1e-4)).collect()
}
