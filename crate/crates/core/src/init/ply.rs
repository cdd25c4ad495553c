//! Minimal PLY point-cloud reader (ASCII and binary little-endian) and ASCII
//! writer. Only the `vertex` element's `x y z` and optional
//! `red green blue` properties are used; other properties are skipped.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use glam::DVec3;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
enum Scalar {
    I8,
    U8,
    I16,
    U16,
    I32,
    U32,
    F32,
    F64,
}

impl Scalar {
    fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "char" | "int8" => Scalar::I8,
            "uchar" | "uint8" => Scalar::U8,
            "short" | "int16" => Scalar::I16,
            "ushort" | "uint16" => Scalar::U16,
            "int" | "int32" => Scalar::I32,
            "uint" | "uint32" => Scalar::U32,
            "float" | "float32" => Scalar::F32,
            "double" | "float64" => Scalar::F64,
            other => return Err(Error::Format(format!("unsupported PLY type {other}"))),
        })
    }

    fn size(self) -> usize {
        match self {
            Scalar::I8 | Scalar::U8 => 1,
            Scalar::I16 | Scalar::U16 => 2,
            Scalar::I32 | Scalar::U32 | Scalar::F32 => 4,
            Scalar::F64 => 8,
        }
    }

    fn read_le(self, b: &[u8]) -> f64 {
        match self {
            Scalar::I8 => b[0] as i8 as f64,
            Scalar::U8 => b[0] as f64,
            Scalar::I16 => i16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::U16 => u16::from_le_bytes([b[0], b[1]]) as f64,
            Scalar::I32 => i32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::U32 => u32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F32 => f32::from_le_bytes(b[..4].try_into().unwrap()) as f64,
            Scalar::F64 => f64::from_le_bytes(b[..8].try_into().unwrap()),
        }
    }

    /// Colour channels stored as integers are 8-bit.
    fn is_integer(self) -> bool {
        !matches!(self, Scalar::F32 | Scalar::F64)
    }
}

/// Points and colours in [0, 1] (mid-grey when the file has no colours).
pub fn read_ply(path: impl AsRef<Path>) -> Result<(Vec<DVec3>, Vec<[f64; 3]>)> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let mut next_line = |r: &mut BufReader<std::fs::File>| -> Result<String> {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(Error::Format("unexpected end of PLY header".into()));
        }
        Ok(line.trim().to_string())
    };
    if next_line(&mut reader)? != "ply" {
        return Err(Error::Format("missing PLY magic".into()));
    }
    let mut binary = false;
    let mut count = 0usize;
    let mut props: Vec<(String, Scalar)> = Vec::new();
    let mut in_vertex = false;
    let mut seen_vertex = false;
    loop {
        let l = next_line(&mut reader)?;
        let words: Vec<&str> = l.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["format", "ascii", _] => binary = false,
            ["format", "binary_little_endian", _] => binary = true,
            ["format", f, _] => return Err(Error::Format(format!("unsupported PLY format {f}"))),
            ["element", "vertex", n] => {
                if seen_vertex {
                    return Err(Error::Format("duplicate vertex element".into()));
                }
                count = n.parse().map_err(|_| Error::Format("bad vertex count".into()))?;
                in_vertex = true;
                seen_vertex = true;
            }
            ["element", ..] => {
                if !seen_vertex {
                    return Err(Error::Format("vertex must be the first PLY element".into()));
                }
                in_vertex = false;
            }
            ["property", "list", ..] if in_vertex => {
                return Err(Error::Format("list properties on vertices are not supported".into()))
            }
            ["property", ty, name] if in_vertex => props.push((name.to_string(), Scalar::parse(ty)?)),
            _ => {}
        }
    }
    let find = |n: &str| props.iter().position(|(p, _)| p == n);
    let (Some(ix), Some(iy), Some(iz)) = (find("x"), find("y"), find("z")) else {
        return Err(Error::Format("PLY vertices need x, y and z".into()));
    };
    let color = match (find("red"), find("green"), find("blue")) {
        (Some(r), Some(g), Some(b)) => Some([r, g, b]),
        _ => None,
    };

    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(count);
    if binary {
        let stride: usize = props.iter().map(|(_, s)| s.size()).sum();
        let mut buf = vec![0u8; stride];
        for _ in 0..count {
            reader.read_exact(&mut buf)?;
            let mut off = 0;
            let mut row = Vec::with_capacity(props.len());
            for (_, s) in &props {
                row.push(s.read_le(&buf[off..]));
                off += s.size();
            }
            rows.push(row);
        }
    } else {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        for _ in 0..count {
            let l = lines.next().ok_or_else(|| Error::Format("PLY ends before all vertices".into()))?;
            let row: std::result::Result<Vec<f64>, _> = l.split_whitespace().take(props.len()).map(str::parse).collect();
            let row = row.map_err(|_| Error::Format(format!("bad PLY vertex line: {l}")))?;
            if row.len() != props.len() {
                return Err(Error::Format(format!("short PLY vertex line: {l}")));
            }
            rows.push(row);
        }
    }

    let points = rows.iter().map(|r| DVec3::new(r[ix], r[iy], r[iz])).collect();
    let colors = rows
        .iter()
        .map(|r| match color {
            Some(c) => c.map(|i| if props[i].1.is_integer() { r[i] / 255.0 } else { r[i] }),
            None => [0.5; 3],
        })
        .collect();
    Ok((points, colors))
}

/// Writes an ASCII PLY with float positions and 8-bit colours.
pub fn write_ply(path: impl AsRef<Path>, points: &[DVec3], colors: &[[f64; 3]]) -> Result<()> {
    if points.len() != colors.len() {
        return Err(Error::InvalidInput("point and colour counts differ".into()));
    }
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "ply\nformat ascii 1.0\nelement vertex {}", points.len())?;
    writeln!(w, "property double x\nproperty double y\nproperty double z")?;
    writeln!(w, "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header")?;
    for (p, c) in points.iter().zip(colors) {
        let q = c.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8);
        writeln!(w, "{:e} {:e} {:e} {} {} {}", p.x, p.y, p.z, q[0], q[1], q[2])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ascii_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let pts = vec![DVec3::new(0.1, -2.0, 3.5), DVec3::new(1e-7, 0.0, -1.0)];
        let cols = vec![[1.0, 0.0, 0.2], [0.5, 0.5, 0.5]];
        write_ply(&path, &pts, &cols).unwrap();
        let (p, c) = read_ply(&path).unwrap();
        assert_eq!(p, pts);
        for (a, b) in c.iter().zip(&cols) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 0.5 / 255.0 + 1e-12);
            }
        }
    }

    #[test]
    fn binary_little_endian_with_extra_properties() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.ply");
        let mut bytes = b"ply\nformat binary_little_endian 1.0\ncomment test\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nproperty float nx\nproperty uchar red\nproperty uchar green\nproperty uchar blue\nelement face 0\nproperty list uchar int vertex_indices\nend_header\n".to_vec();
        for (p, c) in [([1.0f32, 2.0, 3.0], [255u8, 0, 51]), ([-1.0, 0.5, 0.25], [0, 255, 0])] {
            for v in p {
                bytes.extend(v.to_le_bytes());
            }
            bytes.extend(9.0f32.to_le_bytes());
            bytes.extend(c);
        }
        std::fs::write(&path, bytes).unwrap();
        let (p, c) = read_ply(&path).unwrap();
        assert_eq!(p, vec![DVec3::new(1.0, 2.0, 3.0), DVec3::new(-1.0, 0.5, 0.25)]);
        assert_eq!(c[0], [1.0, 0.0, 0.2]);
        assert_eq!(c[1], [0.0, 1.0, 0.0]);
    }

    #[test]
    fn rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ply");
        std::fs::write(&path, "not a ply\n").unwrap();
        assert!(read_ply(&path).is_err());
        std::fs::write(&path, "ply\nformat ascii 1.0\nelement vertex 1\nproperty float x\nend_header\n1\n").unwrap();
        assert!(read_ply(&path).is_err());
    }
}
