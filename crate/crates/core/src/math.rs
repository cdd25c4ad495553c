//! Small numeric helpers shared by the evaluation formulas and the rasterizer.

use glam::{DMat3, DVec3};

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Builds a matrix from row vectors (glam stores columns).
#[inline]
pub fn mat_from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> DMat3 {
    DMat3::from_cols(
        DVec3::new(r0[0], r1[0], r2[0]),
        DVec3::new(r0[1], r1[1], r2[1]),
        DVec3::new(r0[2], r1[2], r2[2]),
    )
}

#[inline]
pub fn at(m: &DMat3, row: usize, col: usize) -> f64 {
    m.col(col)[row]
}

/// Rotation matrix of a quaternion stored as `[w, x, y, z]`. The quaternion is
/// normalized first.
pub fn quat_to_mat(q: [f64; 4]) -> DMat3 {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    mat_from_rows(
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    )
}

/// Pulls a gradient w.r.t. the rotation matrix back onto the raw (unnormalized)
/// quaternion.
pub fn quat_to_mat_backward(q: [f64; 4], grad_r: &DMat3) -> [f64; 4] {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    let (w, x, y, z) = (q[0] / n, q[1] / n, q[2] / n, q[3] / n);
    let g = |r, c| at(grad_r, r, c);
    let dw = 2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0)
        + x * g(2, 1));
    let dx = 2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - w * g(1, 2) + z * g(2, 0)
        + w * g(2, 1))
        - 4.0 * x * (g(1, 1) + g(2, 2));
    let dy = 2.0 * (x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2) - w * g(2, 0)
        + z * g(2, 1))
        - 4.0 * y * (g(0, 0) + g(2, 2));
    let dz = 2.0 * (-w * g(0, 1) + x * g(0, 2) + w * g(1, 0) + y * g(1, 2) + x * g(2, 0)
        + y * g(2, 1))
        - 4.0 * z * (g(0, 0) + g(1, 1));
    // d(q/|q|)/dq = (I - q̂ q̂ᵀ) / |q|
    let gn = [dw, dx, dy, dz];
    let qh = [w, x, y, z];
    let proj: f64 = gn.iter().zip(qh.iter()).map(|(a, b)| a * b).sum();
    [
        (gn[0] - qh[0] * proj) / n,
        (gn[1] - qh[1] * proj) / n,
        (gn[2] - qh[2] * proj) / n,
        (gn[3] - qh[3] * proj) / n,
    ]
}

pub fn normalize_quat(q: &mut [f64; 4]) {
    let n = (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt();
    if n > 0.0 && n.is_finite() {
        for c in q.iter_mut() {
            *c /= n;
        }
    } else {
        *q = [1.0, 0.0, 0.0, 0.0];
    }
}

/// Unit quaternion for a rotation of `angle` radians about `axis`.
pub fn quat_from_axis_angle(axis: DVec3, angle: f64) -> [f64; 4] {
    let a = axis.normalize();
    let (s, c) = (0.5 * angle).sin_cos();
    [c, a.x * s, a.y * s, a.z * s]
}

/// Largest absolute entry.
pub fn max_abs(m: &DMat3) -> f64 {
    m.to_cols_array().iter().fold(0.0f64, |a, v| a.max(v.abs()))
}

/// Outer product `a bᵀ`.
#[inline]
pub fn outer(a: DVec3, b: DVec3) -> DMat3 {
    DMat3::from_cols(a * b.x, a * b.y, a * b.z)
}

pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Mean and sample standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}
