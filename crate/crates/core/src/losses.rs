//! Training objective terms and their gradients.
//!
//! The photometric part is `λ1·L1 + λs·(1 − SSIM)`; regularizers act on the
//! cloud (opacity-weighted temporal regularizer, gate binarization), the
//! cameras (colour-correction deviation) and the velocity field (warm-start
//! distillation).

use serde::{Deserialize, Serialize};

use crate::cloud::GaussianCloud;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::sigmoid;
use crate::primitive::OpacityMode;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub l1: f64,
    pub ssim: f64,
    /// Perceptual term; kept for completeness, nothing evaluates it.
    pub lpips: f64,
    pub reg: f64,
    pub gate: f64,
    pub cc: f64,
    /// Peak weight of the distillation term; the trainer scales it by the
    /// warm-start schedule.
    pub distill: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 0.8,
            ssim: 0.2,
            lpips: 0.0,
            reg: 0.01,
            gate: 0.01,
            cc: 0.001,
            distill: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.l1, self.ssim, self.lpips, self.reg, self.gate, self.cc, self.distill];
        if all.iter().any(|w| !(*w >= 0.0) || !w.is_finite()) {
            return Err(Error::Config("loss weights must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Individual loss values of one step. `distill_weight` is the scheduled
/// weight actually applied.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l1: f64,
    pub dssim: f64,
    pub reg: f64,
    pub gate: f64,
    pub cc: f64,
    pub distill: f64,
    pub distill_weight: f64,
}

impl LossBreakdown {
    /// Weighted sum of all terms; the SSIM term enters as `1 − SSIM`.
    pub fn total(&self, w: &LossWeights) -> f64 {
        w.l1 * self.l1
            + w.ssim * self.dssim
            + w.reg * self.reg
            + w.gate * self.gate
            + w.cc * self.cc
            + self.distill_weight * self.distill
    }
}

fn check_shape(pred: &Image, gt: &Image) -> Result<()> {
    if !pred.same_shape(gt) {
        return Err(Error::InvalidInput(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            pred.width, pred.height, pred.channels, gt.width, gt.height, gt.channels
        )));
    }
    Ok(())
}

/// Mean absolute difference and its gradient w.r.t. `pred`.
pub fn l1_loss(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    check_shape(pred, gt)?;
    let n = pred.data.len() as f64;
    let mut grad = Image::zeros(pred.width, pred.height, pred.channels);
    let mut sum = 0.0;
    for ((g, a), b) in grad.data.iter_mut().zip(&pred.data).zip(&gt.data) {
        let d = a - b;
        sum += d.abs();
        *g = if d > 0.0 {
            1.0 / n
        } else if d < 0.0 {
            -1.0 / n
        } else {
            0.0
        };
    }
    Ok((sum / n, grad))
}

/// Normalized 1D Gaussian window.
pub fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let x = i as f64 - c;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.map(|v| v / s)
}

/// Separable valid-region filtering of a `w×h` plane.
fn filter_valid(plane: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..ow {
            tmp[y * ow + x] = k.iter().zip(&row[x..x + SSIM_WINDOW]).map(|(a, b)| a * b).sum();
        }
    }
    let mut out = vec![0.0; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: spreads a valid-size plane back onto `w×h`.
fn filter_valid_adjoint(small: &[f64], w: usize, h: usize, k: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ow, oh) = (w - SSIM_WINDOW + 1, h - SSIM_WINDOW + 1);
    let mut tmp = vec![0.0; ow * h];
    for y in 0..oh {
        for x in 0..ow {
            let v = small[y * ow + x];
            for i in 0..SSIM_WINDOW {
                tmp[(y + i) * ow + x] += k[i] * v;
            }
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..ow {
            let v = tmp[y * ow + x];
            for i in 0..SSIM_WINDOW {
                out[y * w + x + i] += k[i] * v;
            }
        }
    }
    out
}

fn plane(img: &Image, c: usize) -> Vec<f64> {
    img.data.chunks_exact(img.channels).map(|p| p[c]).collect()
}

fn ssim_impl(pred: &Image, gt: &Image, want_grad: bool) -> Result<(f64, Option<Image>)> {
    check_shape(pred, gt)?;
    let (w, h) = (pred.width, pred.height);
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(Error::InvalidInput(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let k = gaussian_window();
    let n_out = ((w - SSIM_WINDOW + 1) * (h - SSIM_WINDOW + 1)) as f64;
    let norm = 1.0 / (n_out * pred.channels as f64);
    let mut total = 0.0;
    let mut grad = want_grad.then(|| Image::zeros(w, h, pred.channels));
    for c in 0..pred.channels {
        let x = plane(pred, c);
        let y = plane(gt, c);
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let mu1 = filter_valid(&x, w, h, &k);
        let mu2 = filter_valid(&y, w, h, &k);
        let e11 = filter_valid(&xx, w, h, &k);
        let e22 = filter_valid(&yy, w, h, &k);
        let e12 = filter_valid(&xy, w, h, &k);
        let len = mu1.len();
        let mut g_mu = vec![0.0; len];
        let mut g_e11 = vec![0.0; len];
        let mut g_e12 = vec![0.0; len];
        for i in 0..len {
            let (m1, m2) = (mu1[i], mu2[i]);
            let a1 = 2.0 * m1 * m2 + SSIM_C1;
            let a2 = 2.0 * (e12[i] - m1 * m2) + SSIM_C2;
            let b1 = m1 * m1 + m2 * m2 + SSIM_C1;
            let b2 = (e11[i] - m1 * m1) + (e22[i] - m2 * m2) + SSIM_C2;
            let d = b1 * b2;
            let s = a1 * a2 / d;
            total += s;
            if want_grad {
                g_mu[i] = norm * 2.0 * (m2 * (a2 - a1) - s * m1 * (b2 - b1)) / d;
                g_e11[i] = -norm * s * b1 / d;
                g_e12[i] = norm * 2.0 * a1 / d;
            }
        }
        if let Some(grad) = grad.as_mut() {
            let gm = filter_valid_adjoint(&g_mu, w, h, &k);
            let g11 = filter_valid_adjoint(&g_e11, w, h, &k);
            let g12 = filter_valid_adjoint(&g_e12, w, h, &k);
            for (q, px) in grad.data.chunks_exact_mut(pred.channels).enumerate() {
                px[c] = gm[q] + 2.0 * x[q] * g11[q] + y[q] * g12[q];
            }
        }
    }
    Ok((total * norm, grad))
}

/// Mean SSIM over valid windows and channels.
pub fn ssim(pred: &Image, gt: &Image) -> Result<f64> {
    Ok(ssim_impl(pred, gt, false)?.0)
}

/// SSIM and its gradient w.r.t. `pred`.
pub fn ssim_with_grad(pred: &Image, gt: &Image) -> Result<(f64, Image)> {
    let (v, g) = ssim_impl(pred, gt, true)?;
    Ok((v, g.expect("gradient requested")))
}

/// `(1/N) Σ σ(oᵢ)·sg[temporal factor]` with the temporal factor of the active
/// opacity mode held constant. Returns the value and the gradient w.r.t. each
/// opacity logit; no other parameter receives gradient.
pub fn reg_loss(cloud: &GaussianCloud, t: f64, mode: OpacityMode, gamma: f64) -> (f64, Vec<f64>) {
    let n = cloud.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let grad = cloud
        .primitives()
        .iter()
        .map(|g| {
            let sigma = g.opacity();
            let factor = g.temporal_factor(t, mode, gamma);
            value += sigma * factor;
            inv * factor * sigma * (1.0 - sigma)
        })
        .collect();
    (value * inv, grad)
}

/// Mean of `g(1 − g)` over gates, with the gradient w.r.t. each gate logit.
pub fn gate_loss(cloud: &GaussianCloud, gamma: f64) -> (f64, Vec<f64>) {
    let n = cloud.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let inv = 1.0 / n as f64;
    let mut value = 0.0;
    let grad = cloud
        .primitives()
        .iter()
        .map(|p| {
            let g = sigmoid(gamma * p.gate_logit);
            value += g * (1.0 - g);
            inv * (1.0 - 2.0 * g) * gamma * g * (1.0 - g)
        })
        .collect();
    (value * inv, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::SpacetimeGaussian;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut impl Rng, w: usize, h: usize) -> Image {
        let mut img = Image::zeros(w, h, 3);
        for v in &mut img.data {
            *v = rng.gen_range(0.0..1.0);
        }
        img
    }

    /// Direct 2D window loop, no separability.
    fn ssim_oracle(a: &Image, b: &Image) -> f64 {
        let k1 = gaussian_window();
        let (w, h) = (a.width, a.height);
        let mut total = 0.0;
        let mut count = 0.0;
        for c in 0..3 {
            for y in 0..=h - 11 {
                for x in 0..=w - 11 {
                    let (mut m1, mut m2, mut s11, mut s22, mut s12) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for j in 0..11 {
                        for i in 0..11 {
                            let wt = k1[i] * k1[j];
                            let p = a.pixel(x + i, y + j)[c];
                            let q = b.pixel(x + i, y + j)[c];
                            m1 += wt * p;
                            m2 += wt * q;
                            s11 += wt * p * p;
                            s22 += wt * q * q;
                            s12 += wt * p * q;
                        }
                    }
                    let (v1, v2, cv) = (s11 - m1 * m1, s22 - m2 * m2, s12 - m1 * m2);
                    total += ((2.0 * m1 * m2 + SSIM_C1) * (2.0 * cv + SSIM_C2))
                        / ((m1 * m1 + m2 * m2 + SSIM_C1) * (v1 + v2 + SSIM_C2));
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_image(&mut rng, 7, 5);
        assert_eq!(l1_loss(&a, &a).unwrap().0, 0.0);
        let b = a.map(|v| v + 0.1);
        assert!((l1_loss(&b, &a).unwrap().0 - 0.1).abs() < 1e-12);
        let c = random_image(&mut rng, 7, 5);
        let brute: f64 = a.data.iter().zip(&c.data).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.data.len() as f64;
        assert!((l1_loss(&a, &c).unwrap().0 - brute).abs() < 1e-14);
        assert!(l1_loss(&a, &Image::zeros(5, 7, 3)).is_err());
    }

    #[test]
    fn ssim_matches_direct_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_image(&mut rng, 19, 14);
        let b = random_image(&mut rng, 19, 14);
        assert!((ssim(&a, &b).unwrap() - ssim_oracle(&a, &b)).abs() < 1e-12);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        // inverted binary pattern drives SSIM towards -1
        let mut bin = Image::zeros(16, 16, 3);
        for (i, v) in bin.data.iter_mut().enumerate() {
            *v = ((i / 3 + i / 48) % 2) as f64;
        }
        let inv = bin.map(|v| 1.0 - v);
        let s = ssim(&bin, &inv).unwrap();
        assert!((s - ssim_oracle(&bin, &inv)).abs() < 1e-12);
        assert!(s < -0.9, "{s}");
    }

    #[test]
    fn ssim_constant_images_closed_form() {
        let (c1, c2) = (0.3, 0.7);
        let a = Image::filled(12, 12, &[c1; 3]);
        let b = Image::filled(12, 12, &[c2; 3]);
        let expect = (2.0 * c1 * c2 + SSIM_C1) * SSIM_C2 / ((c1 * c1 + c2 * c2 + SSIM_C1) * SSIM_C2);
        assert!((ssim(&a, &b).unwrap() - expect).abs() < 1e-10);
        assert!(ssim(&Image::zeros(10, 20, 3), &Image::zeros(10, 20, 3)).is_err());
    }

    #[test]
    fn ssim_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 14, 13);
        let b = random_image(&mut rng, 14, 13);
        let (_, g) = ssim_with_grad(&a, &b).unwrap();
        let h = 1e-6;
        for idx in (0..a.data.len()).step_by(7) {
            let mut p = a.clone();
            p.data[idx] += h;
            let mut m = a.clone();
            m.data[idx] -= h;
            let fd = (ssim(&p, &b).unwrap() - ssim(&m, &b).unwrap()) / (2.0 * h);
            let an = g.data[idx];
            let scale = fd.abs().max(an.abs());
            assert!(
                if scale < 1e-3 { (fd - an).abs() < 1e-7 } else { (fd - an).abs() / scale < 1e-4 },
                "{idx}: {an} vs {fd}"
            );
        }
    }

    fn cloud_with(f: impl Fn(usize, &mut SpacetimeGaussian), n: usize) -> GaussianCloud {
        let prims = (0..n)
            .map(|i| {
                let mut g = SpacetimeGaussian::default();
                f(i, &mut g);
                g
            })
            .collect();
        GaussianCloud::from_primitives(prims, n).unwrap()
    }

    #[test]
    fn reg_loss_examples_and_stop_gradient() {
        let c = cloud_with(|_, g| g.opacity_logit = -800.0, 3);
        assert_eq!(reg_loss(&c, 0.5, OpacityMode::Legacy, 20.0).0, 0.0);
        let c = cloud_with(|_, g| g.t_center = 0.3, 1);
        assert_eq!(reg_loss(&c, 0.3, OpacityMode::Legacy, 20.0).0, 0.5);

        // the loss does move with log_s, yet no gradient is returned for it
        let c = cloud_with(|_, g| { g.t_center = 0.2; g.log_duration = -1.0 }, 1);
        let eval = |ls: f64| {
            let mut c = c.clone();
            c.primitives_mut()[0].log_duration = ls;
            reg_loss(&c, 0.6, OpacityMode::Legacy, 20.0).0
        };
        let fd = (eval(-1.0 + 1e-6) - eval(-1.0 - 1e-6)) / 2e-6;
        assert!(fd.abs() > 1e-3);
        let (_, grad) = reg_loss(&c, 0.6, OpacityMode::Legacy, 20.0);
        // only an opacity gradient exists; check it against FD
        let eval_o = |o: f64| {
            let mut c = c.clone();
            c.primitives_mut()[0].opacity_logit = o;
            reg_loss(&c, 0.6, OpacityMode::Legacy, 20.0).0
        };
        let fd_o = (eval_o(1e-6) - eval_o(-1e-6)) / 2e-6;
        assert!((fd_o - grad[0]).abs() < 1e-9);
    }

    #[test]
    fn gate_loss_examples_and_gradient() {
        let c = cloud_with(|i, g| g.gate_logit = if i % 2 == 0 { 1e6 } else { -1e6 }, 4);
        assert_eq!(gate_loss(&c, 20.0).0, 0.0);
        let c = cloud_with(|_, g| g.gate_logit = 0.0, 4);
        assert_eq!(gate_loss(&c, 20.0).0, 0.25);
        let c = cloud_with(|i, g| g.gate_logit = 0.03 * i as f64 - 0.05, 5);
        let (v, grad) = gate_loss(&c, 20.0);
        let oracle: f64 = c.primitives().iter().map(|p| { let g = p.gate(20.0); g * (1.0 - g) }).sum::<f64>() / 5.0;
        assert!((v - oracle).abs() < 1e-15);
        for i in 0..5 {
            let eval = |d: f64| {
                let mut c = c.clone();
                c.primitives_mut()[i].gate_logit += d;
                gate_loss(&c, 20.0).0
            };
            let fd = (eval(1e-7) - eval(-1e-7)) / 2e-7;
            assert!((fd - grad[i]).abs() < 1e-7, "{fd} {}", grad[i]);
        }
    }

    #[test]
    fn total_is_weighted_sum() {
        let b = LossBreakdown { l1: 0.1, dssim: 0.3, reg: 0.2, gate: 0.1, cc: 0.5, distill: 2.0, distill_weight: 0.5 };
        let w = LossWeights::default();
        let expect = 0.8 * 0.1 + 0.2 * 0.3 + 0.01 * 0.2 + 0.01 * 0.1 + 0.001 * 0.5 + 0.5 * 2.0;
        assert!((b.total(&w) - expect).abs() < 1e-12);
    }
}
