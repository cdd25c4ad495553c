//! Dense float images and their on-disk formats.
//!
//! * PNG: 8-bit RGB, values clamped to [0, 1].
//! * PFM: `PF\n<width> <height>\n-1.0\n` followed by little-endian f32 RGB
//!   triples, rows stored bottom-to-top as the format prescribes. Single
//!   channel images use the `Pf` variant.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    /// Row-major, channel-interleaved.
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn filled(width: usize, height: usize, value: &[f64]) -> Self {
        let mut img = Self::zeros(width, height, value.len());
        for px in img.data.chunks_exact_mut(value.len()) {
            px.copy_from_slice(value);
        }
        img
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> &[f64] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            data: self.data.iter().map(|v| f(*v)).collect(),
            ..*self
        }
    }

    pub fn clamped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    /// Single channel `c` as its own image.
    pub fn channel(&self, c: usize) -> Image {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.data.chunks_exact(self.channels).map(|p| p[c]).collect(),
        }
    }

    /// One pixel row.
    pub fn row(&self, y: usize) -> &[f64] {
        let w = self.width * self.channels;
        &self.data[y * w..(y + 1) * w]
    }

    /// 2×2 average pooling (odd trailing row/column dropped).
    pub fn downsample2(&self) -> Image {
        let (w, h) = (self.width / 2, self.height / 2);
        let mut out = Image::zeros(w, h, self.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..self.channels {
                    let s = self.pixel(2 * x, 2 * y)[c]
                        + self.pixel(2 * x + 1, 2 * y)[c]
                        + self.pixel(2 * x, 2 * y + 1)[c]
                        + self.pixel(2 * x + 1, 2 * y + 1)[c];
                    out.pixel_mut(x, y)[c] = 0.25 * s;
                }
            }
        }
        out
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut buf = Vec::with_capacity(self.width * self.height * 3);
        for px in self.data.chunks_exact(self.channels) {
            for c in 0..3 {
                let v = px[c.min(self.channels - 1)];
                buf.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
        let img = image::RgbImage::from_raw(self.width as u32, self.height as u32, buf)
            .ok_or_else(|| Error::Format("png buffer size mismatch".into()))?;
        img.save(path)?;
        Ok(())
    }

    pub fn load_png(path: impl AsRef<Path>) -> Result<Image> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = img.dimensions();
        Ok(Image {
            width: w as usize,
            height: h as usize,
            channels: 3,
            data: img.into_raw().into_iter().map(|v| v as f64 / 255.0).collect(),
        })
    }

    pub fn save_pfm(&self, path: impl AsRef<Path>) -> Result<()> {
        let (tag, ch) = match self.channels {
            1 => ("Pf", 1),
            3 => ("PF", 3),
            n => return Err(Error::InvalidInput(format!("pfm supports 1 or 3 channels, got {n}"))),
        };
        let mut w = BufWriter::new(File::create(path)?);
        write!(w, "{tag}\n{} {}\n-1.0\n", self.width, self.height)?;
        for y in (0..self.height).rev() {
            for x in 0..self.width {
                for c in 0..ch {
                    w.write_all(&(self.pixel(x, y)[c] as f32).to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load_pfm(path: impl AsRef<Path>) -> Result<Image> {
        let mut r = BufReader::new(File::open(path)?);
        let mut line = String::new();
        r.read_line(&mut line)?;
        let channels = match line.trim() {
            "PF" => 3,
            "Pf" => 1,
            other => return Err(Error::Format(format!("bad pfm tag {other:?}"))),
        };
        line.clear();
        r.read_line(&mut line)?;
        let dims: Vec<usize> = line
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| Error::Format("bad pfm size".into())))
            .collect::<Result<_>>()?;
        if dims.len() != 2 {
            return Err(Error::Format("bad pfm size line".into()));
        }
        line.clear();
        r.read_line(&mut line)?;
        let scale: f64 = line.trim().parse().map_err(|_| Error::Format("bad pfm scale".into()))?;
        if scale >= 0.0 {
            return Err(Error::Format("big-endian pfm not supported".into()));
        }
        let (width, height) = (dims[0], dims[1]);
        let mut img = Image::zeros(width, height, channels);
        let mut bytes = [0u8; 4];
        for y in (0..height).rev() {
            for x in 0..width {
                for c in 0..channels {
                    r.read_exact(&mut bytes)?;
                    img.pixel_mut(x, y)[c] = f32::from_le_bytes(bytes) as f64;
                }
            }
        }
        Ok(img)
    }
}

/// HSV (all components in [0, 1]) to RGB.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Cool-to-warm ramp for a value in [0, 1].
pub fn cool_warm(x: f64) -> [f64; 3] {
    let x = x.clamp(0.0, 1.0);
    let cool = [0.23, 0.30, 0.75];
    let mid = [0.87, 0.87, 0.87];
    let warm = [0.71, 0.02, 0.15];
    let lerp = |a: [f64; 3], b: [f64; 3], u: f64| {
        [a[0] + (b[0] - a[0]) * u, a[1] + (b[1] - a[1]) * u, a[2] + (b[2] - a[2]) * u]
    };
    if x < 0.5 {
        lerp(cool, mid, 2.0 * x)
    } else {
        lerp(mid, warm, 2.0 * x - 1.0)
    }
}
