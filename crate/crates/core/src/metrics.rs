//! Evaluation metrics.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::losses;

/// Value reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// `10·log10(1/MSE)` for images in [0, 1], capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    if !pred.same_shape(gt) {
        return Err(Error::InvalidInput("psnr: image shapes differ".into()));
    }
    let mse = pred.data.iter().zip(&gt.data).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / pred.data.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

/// SSIM at `scale` 1 (native) or 2 (after 2×2 average pooling).
pub fn ssim_at(pred: &Image, gt: &Image, scale: u32) -> Result<f64> {
    match scale {
        1 => losses::ssim(pred, gt),
        2 => losses::ssim(&pred.downsample2(), &gt.downsample2()),
        s => Err(Error::InvalidInput(format!("unsupported SSIM scale {s}"))),
    }
}

/// `(1 − SSIM) / 2` at the given scale.
pub fn dssim(pred: &Image, gt: &Image, scale: u32) -> Result<f64> {
    Ok((1.0 - ssim_at(pred, gt, scale)?) / 2.0)
}

/// Mean endpoint error between two-channel flow fields over pixels where
/// `mask` is set (all pixels when `None`).
pub fn epe(pred: &Image, gt: &Image, mask: Option<&[bool]>) -> Result<f64> {
    if !pred.same_shape(gt) || pred.channels != 2 {
        return Err(Error::InvalidInput("epe: expects two equally sized 2-channel flows".into()));
    }
    let n = pred.width * pred.height;
    if let Some(m) = mask {
        if m.len() != n {
            return Err(Error::InvalidInput("epe: mask size mismatch".into()));
        }
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in 0..n {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let dx = pred.data[2 * i] - gt.data[2 * i];
        let dy = pred.data[2 * i + 1] - gt.data[2 * i + 1];
        sum += dx.hypot(dy);
        count += 1;
    }
    if count == 0 {
        return Err(Error::InvalidInput("epe: empty mask".into()));
    }
    Ok(sum / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, &[0.5; 3]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut c = a.clone();
        for v in &mut c.data {
            *v = rng.gen();
        }
        let mut mse = 0.0;
        for i in 0..a.data.len() {
            mse += (a.data[i] - c.data[i]) * (a.data[i] - c.data[i]);
        }
        mse /= a.data.len() as f64;
        assert!((psnr(&a, &c).unwrap() + 10.0 * mse.log10()).abs() < 1e-12);
    }

    #[test]
    fn epe_examples() {
        let z = Image::zeros(5, 4, 2);
        assert_eq!(epe(&z, &z, None).unwrap(), 0.0);
        let off = Image::filled(5, 4, &[3.0, 4.0]);
        assert_eq!(epe(&off, &z, None).unwrap(), 5.0);
        assert!(epe(&off, &z, Some(&[false; 20])).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut a = Image::zeros(6, 3, 2);
        let mut b = Image::zeros(6, 3, 2);
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v = rng.gen_range(-2.0..2.0);
        }
        let mask: Vec<bool> = (0..18).map(|i| i % 3 != 0).collect();
        let mut s = 0.0;
        let mut n = 0.0;
        for y in 0..3 {
            for x in 0..6 {
                if mask[y * 6 + x] {
                    let (p, q) = (a.pixel(x, y), b.pixel(x, y));
                    s += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                    n += 1.0;
                }
            }
        }
        assert!((epe(&a, &b, Some(&mask)).unwrap() - s / n).abs() < 1e-14);
    }

    #[test]
    fn dssim_bounds_and_scale_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut a = Image::zeros(24, 24, 3);
        let mut b = Image::zeros(24, 24, 3);
        for v in a.data.iter_mut().chain(b.data.iter_mut()) {
            *v = rng.gen();
        }
        for s in [1, 2] {
            let d = dssim(&a, &b, s).unwrap();
            assert!((0.0..=1.0).contains(&d));
            assert_eq!(dssim(&a, &a, s).unwrap(), 0.0);
        }
        assert_eq!(ssim_at(&a, &b, 2).unwrap(), losses::ssim(&a.downsample2(), &b.downsample2()).unwrap());
        assert!(ssim_at(&a, &b, 3).is_err());
    }
}
