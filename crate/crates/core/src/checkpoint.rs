//! Binary checkpoint container.
//!
//! Little-endian throughout:
//!
//! ```text
//! magic      "FTGS"
//! version    u32 (= 1)
//! count      u64   primitives
//! budget     u64
//! flags      u32   bit 0 gated, bit 1 velocity field, bit 2 colour correction
//! fields     f32 arrays, count × width each, in this order:
//!            mean 3, t_center 1, log_duration 1, velocity 3, log_scale 3,
//!            rotation 4 (w x y z), opacity_logit 1, sh 12 (coefficient-major,
//!            RGB inner), gate_logit 1
//! sections   repeated until end of file:
//!            tag [u8; 4], length u64, payload
//!   "ROPT"   render options as UTF-8 JSON
//!   "CCOR"   u64 camera count, then per camera 12 f32: matrix row-major, bias
//!   "NVF0"   u64 JSON length, field config as UTF-8 JSON, 6 f32 bounding box
//!            (min xyz, max xyz), u64 parameter count, f32 parameters
//! ```
//!
//! Unknown section tags are skipped.

use std::path::Path;

use glam::{DMat3, DVec3};

use crate::camera::ColorCorrection;
use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::motion::{FieldConfig, VelocityField};
use crate::primitive::{layout, OpacityMode, SpacetimeGaussian, SH_COEFFS};
use crate::raster::RenderOptions;

pub const MAGIC: &[u8; 4] = b"FTGS";
pub const VERSION: u32 = 1;

const FLAG_GATED: u32 = 1;
const FLAG_FIELD: u32 = 2;
const FLAG_CC: u32 = 4;

/// Everything needed to render a trained model.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub cloud: GaussianCloud,
    pub render: RenderOptions,
    pub field: Option<VelocityField>,
    /// Per-camera colour correction, in camera order.
    pub color: Option<Vec<ColorCorrection>>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: u32) {
        self.0.extend(v.to_le_bytes());
    }
    fn u64(&mut self, v: usize) {
        self.0.extend((v as u64).to_le_bytes());
    }
    fn f32(&mut self, v: f64) {
        self.0.extend((v as f32).to_le_bytes());
    }
    fn section(&mut self, tag: &[u8; 4], payload: Writer) {
        self.0.extend(tag);
        self.u64(payload.0.len());
        self.0.extend(payload.0);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.buf.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<usize> {
        usize::try_from(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
            .map_err(|_| Error::Format("length overflows usize".into()))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(4).ok_or_else(|| Error::Format("array too large".into()))?)?;
        Ok(bytes.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect())
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

type Field = (usize, fn(&SpacetimeGaussian, &mut Vec<f64>), fn(&mut SpacetimeGaussian, &[f64]));

fn fields() -> [Field; 9] {
    [
        (3, |g, o| o.extend(g.mean.to_array()), |g, v| g.mean = DVec3::from_slice(v)),
        (1, |g, o| o.push(g.t_center), |g, v| g.t_center = v[0]),
        (1, |g, o| o.push(g.log_duration), |g, v| g.log_duration = v[0]),
        (3, |g, o| o.extend(g.velocity.to_array()), |g, v| g.velocity = DVec3::from_slice(v)),
        (3, |g, o| o.extend(g.log_scale.to_array()), |g, v| g.log_scale = DVec3::from_slice(v)),
        (4, |g, o| o.extend(g.rotation), |g, v| g.rotation.copy_from_slice(v)),
        (1, |g, o| o.push(g.opacity_logit), |g, v| g.opacity_logit = v[0]),
        (
            3 * SH_COEFFS,
            |g, o| o.extend(g.sh.iter().flatten()),
            |g, v| {
                for (k, c) in g.sh.iter_mut().enumerate() {
                    c.copy_from_slice(&v[3 * k..3 * k + 3]);
                }
            },
        ),
        (1, |g, o| o.push(g.gate_logit), |g, v| g.gate_logit = v[0]),
    ]
}

fn zero_primitive() -> SpacetimeGaussian {
    SpacetimeGaussian {
        mean: DVec3::ZERO,
        t_center: 0.0,
        log_duration: 0.0,
        velocity: DVec3::ZERO,
        log_scale: DVec3::ZERO,
        rotation: [1.0, 0.0, 0.0, 0.0],
        opacity_logit: 0.0,
        sh: [[0.0; 3]; SH_COEFFS],
        gate_logit: 0.0,
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut w = Writer(Vec::new());
        w.0.extend(MAGIC);
        w.u32(VERSION);
        w.u64(self.cloud.len());
        w.u64(self.cloud.budget());
        let mut flags = 0;
        if self.render.opacity_mode == OpacityMode::Gated {
            flags |= FLAG_GATED;
        }
        if self.field.is_some() {
            flags |= FLAG_FIELD;
        }
        if self.color.is_some() {
            flags |= FLAG_CC;
        }
        w.u32(flags);
        let mut tmp = Vec::new();
        for (_, get, _) in fields() {
            for g in self.cloud.primitives() {
                tmp.clear();
                get(g, &mut tmp);
                for v in &tmp {
                    w.f32(*v);
                }
            }
        }

        let mut opts = Writer(Vec::new());
        opts.0.extend(serde_json::to_vec(&self.render)?);
        w.section(b"ROPT", opts);

        if let Some(cc) = &self.color {
            let mut s = Writer(Vec::new());
            s.u64(cc.len());
            for c in cc {
                for v in c.matrix.transpose().to_cols_array() {
                    s.f32(v);
                }
                for v in c.bias.to_array() {
                    s.f32(v);
                }
            }
            w.section(b"CCOR", s);
        }
        if let Some(f) = &self.field {
            let mut s = Writer(Vec::new());
            let cfg = serde_json::to_vec(f.config())?;
            s.u64(cfg.len());
            s.0.extend(cfg);
            let (lo, hi) = f.bbox();
            for v in lo.to_array().into_iter().chain(hi.to_array()) {
                s.f32(v);
            }
            s.u64(f.param_count());
            for v in f.params() {
                s.f32(*v);
            }
            w.section(b"NVF0", s);
        }
        Ok(w.0)
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let count = r.u64()?;
        let budget = r.u64()?;
        let flags = r.u32()?;
        if count > budget {
            return Err(Error::Format("primitive count exceeds budget".into()));
        }
        if count.saturating_mul(layout::NUM_PARAMS * 4) > buf.len() {
            return Err(Error::Format("checkpoint truncated".into()));
        }
        let mut prims = vec![zero_primitive(); count];
        for (width, _, set) in fields() {
            let data = r.f32s(count * width)?;
            for (g, chunk) in prims.iter_mut().zip(data.chunks_exact(width)) {
                set(g, chunk);
            }
        }
        let mut render = RenderOptions::default();
        let mut field = None;
        let mut color = None;
        while !r.done() {
            let tag: [u8; 4] = r.take(4)?.try_into().unwrap();
            let len = r.u64()?;
            let mut s = Reader { buf: r.take(len)?, pos: 0 };
            match &tag {
                b"ROPT" => render = serde_json::from_slice(s.buf)?,
                b"CCOR" => {
                    let n = s.u64()?;
                    let mut cc = Vec::with_capacity(n.min(1 << 16));
                    for _ in 0..n {
                        let v = s.f32s(12)?;
                        cc.push(ColorCorrection {
                            matrix: DMat3::from_cols_slice(&v[..9]).transpose(),
                            bias: DVec3::from_slice(&v[9..]),
                        });
                    }
                    color = Some(cc);
                }
                b"NVF0" => {
                    let n = s.u64()?;
                    let cfg: FieldConfig = serde_json::from_slice(s.take(n)?)?;
                    let b = s.f32s(6)?;
                    let p = s.u64()?;
                    let params = s.f32s(p)?;
                    field = Some(VelocityField::from_parts(cfg, DVec3::from_slice(&b[..3]), DVec3::from_slice(&b[3..]), params)?);
                }
                _ => {}
            }
        }
        if (flags & FLAG_FIELD != 0) != field.is_some() || (flags & FLAG_CC != 0) != color.is_some() {
            return Err(Error::Format("checkpoint flags disagree with its sections".into()));
        }
        if (flags & FLAG_GATED != 0) != (render.opacity_mode == OpacityMode::Gated) {
            return Err(Error::Format("checkpoint gated flag disagrees with render options".into()));
        }
        Ok(Self {
            cloud: GaussianCloud::from_primitives(prims, budget)?,
            render,
            field,
            color,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// The same checkpoint with every stored value rounded to `f32`, i.e.
    /// what [`from_bytes`](Self::from_bytes) returns after a save.
    pub fn quantized(&self) -> Result<Self> {
        Self::from_bytes(&self.to_bytes()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::logit;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_checkpoint(seed: u64, with_extras: bool) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = || rng.gen_range(-2.0f64..2.0);
        let prims = (0..17)
            .map(|_| SpacetimeGaussian {
                mean: DVec3::new(v(), v(), v()),
                t_center: v(),
                log_duration: v(),
                velocity: DVec3::new(v(), v(), v()),
                log_scale: DVec3::new(v(), v(), v()),
                rotation: [v(), v(), v(), v()],
                opacity_logit: logit(0.3),
                sh: [[v(), v(), v()], [v(), v(), v()], [v(), v(), v()], [v(), v(), v()]],
                gate_logit: v(),
            })
            .collect();
        let cloud = GaussianCloud::from_primitives(prims, 20).unwrap();
        let render = RenderOptions {
            opacity_mode: if with_extras { OpacityMode::Gated } else { OpacityMode::Legacy },
            ..Default::default()
        };
        let (field, color) = if with_extras {
            let cfg = FieldConfig { hidden: 8, ..Default::default() };
            let f = VelocityField::new(cfg, DVec3::splat(-1.0), DVec3::ONE, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let cc = vec![
                ColorCorrection::default(),
                ColorCorrection {
                    matrix: DMat3::from_cols_array(&[1.0, 0.1, 0.0, -0.2, 0.9, 0.0, 0.0, 0.3, 1.1]),
                    bias: DVec3::new(0.01, -0.02, 0.5),
                },
            ];
            (Some(f), Some(cc))
        } else {
            (None, None)
        };
        Checkpoint { cloud, render, field, color }
    }

    #[test]
    fn roundtrip_is_a_fixed_point_after_quantization() {
        for extras in [false, true] {
            let ck = random_checkpoint(1, extras);
            let q = ck.quantized().unwrap();
            assert_eq!(q.to_bytes().unwrap(), ck.to_bytes().unwrap());
            assert_eq!(q.quantized().unwrap(), q);
            assert_eq!(q.field.is_some(), extras);
            for (a, b) in q.cloud.primitives().iter().zip(ck.cloud.primitives()) {
                assert!((a.mean - b.mean).length() < 1e-6);
                assert_eq!(a.sh[2][1] as f32, b.sh[2][1] as f32);
            }
            assert_eq!(q.cloud.budget(), 20);
        }
    }

    #[test]
    fn header_layout() {
        let ck = random_checkpoint(2, true);
        let b = ck.to_bytes().unwrap();
        assert_eq!(&b[..4], b"FTGS");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u64::from_le_bytes(b[8..16].try_into().unwrap()), 17);
        assert_eq!(u64::from_le_bytes(b[16..24].try_into().unwrap()), 20);
        assert_eq!(u32::from_le_bytes(b[24..28].try_into().unwrap()), 7);
        let first = f32::from_le_bytes(b[28..32].try_into().unwrap());
        assert_eq!(first, ck.cloud.primitives()[0].mean.x as f32);
        // 29 values per primitive
        assert_eq!(&b[28 + 17 * 29 * 4..28 + 17 * 29 * 4 + 4], b"ROPT");
    }

    #[test]
    fn rejects_corruption() {
        let b = random_checkpoint(3, true).to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&b[..b.len() - 1]).is_err());
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(Checkpoint::from_bytes(&bad).is_err());
        let mut future = b.clone();
        future[4] = 9;
        assert!(Checkpoint::from_bytes(&future).is_err());
        let mut flags = b.clone();
        flags[24] = 0;
        assert!(Checkpoint::from_bytes(&flags).is_err());
    }

    #[test]
    fn unknown_sections_are_skipped() {
        let ck = random_checkpoint(4, false);
        let mut b = ck.to_bytes().unwrap();
        b.extend(b"ZZZZ");
        b.extend(3u64.to_le_bytes());
        b.extend([1, 2, 3]);
        assert_eq!(Checkpoint::from_bytes(&b).unwrap(), ck.quantized().unwrap());
    }
}
