//! Per-primitive projection to a screen-space splat (EWA linearization) and
//! its adjoint.

use glam::{DMat3, DVec3};

use super::RenderOptions;
use crate::camera::Camera;
use crate::math::{outer, quat_to_mat, quat_to_mat_backward};
use crate::primitive::{layout, OpacityMode, ParamVec, SpacetimeGaussian, SH_C0, SH_C1};

/// Screen-space footprint of one primitive at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Splat2D {
    /// Index of the source primitive in the cloud.
    pub index: usize,
    pub mean2d: [f64; 2],
    /// `[a, b, c]` of the symmetric matrix `[[a, b], [b, c]]`, low-pass included.
    pub cov2d: [f64; 3],
    /// Inverse of `cov2d`, same packing.
    pub conic: [f64; 3],
    pub depth: f64,
    pub color: [f64; 3],
    pub alpha_base: f64,
    /// Pixel radius outside of which the splat's alpha drops below the cull
    /// threshold; infinite when no threshold is set.
    pub radius: f64,
    /// Gaussian exponents below this give alpha under the cull threshold
    /// (with a little slack); `-inf` when no threshold is set.
    pub power_cut: f64,
}

/// Gradient of a loss w.r.t. the fields of a [`Splat2D`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct SplatGrad {
    pub mean2d: [f64; 2],
    pub conic: [f64; 3],
    pub alpha_base: f64,
    pub color: [f64; 3],
}

impl SplatGrad {
    #[inline]
    pub fn add(&mut self, o: &SplatGrad) {
        self.mean2d[0] += o.mean2d[0];
        self.mean2d[1] += o.mean2d[1];
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.alpha_base += o.alpha_base;
    }
}

/// Forward intermediates shared by [`project`] and [`project_backward`].
struct Forward {
    pc: DVec3,
    rot: DMat3,
    scale: DVec3,
    m: DMat3,
    v_cam: DMat3,
    j0: DVec3,
    j1: DVec3,
    /// Whether the x / y image-plane slope used by the Jacobian was clamped.
    clamped: [bool; 2],
    slope: [f64; 2],
    conic: [f64; 3],
    cov: [f64; 3],
    mean2d: [f64; 2],
    view: DVec3,
    raw_color: [f64; 3],
    opacity: f64,
    temporal: f64,
    bump: f64,
    gate: f64,
}

/// Projection-Jacobian slope limit as a multiple of the half field of view.
const SLOPE_LIMIT: f64 = 1.3;

fn forward(g: &SpacetimeGaussian, velocity: DVec3, cam: &Camera, t: f64, opts: &RenderOptions) -> Option<Forward> {
    let p = g.position_with_velocity(t, velocity);
    let pc = cam.world_to_camera(p);
    if !(pc.z > opts.near) {
        return None;
    }

    let z_score = (t - g.t_center) / g.duration();
    let bump = (-0.5 * z_score * z_score).exp();
    let (temporal, gate) = match opts.opacity_mode {
        OpacityMode::Legacy => (bump, 0.0),
        OpacityMode::Gated => {
            let gate = g.gate(opts.gamma);
            (gate + (1.0 - gate) * bump, gate)
        }
    };
    let opacity = g.opacity();
    if opacity * temporal < opts.alpha_min {
        return None;
    }

    let rot = quat_to_mat(g.rotation);
    let scale = g.scale();
    let m = rot * DMat3::from_diagonal(scale);
    let sigma = m * m.transpose();
    let w = cam.rotation;
    let v_cam = w * sigma * w.transpose();

    let z = pc.z;
    let lim = [
        SLOPE_LIMIT * 0.5 * cam.width as f64 / cam.fx,
        SLOPE_LIMIT * 0.5 * cam.height as f64 / cam.fy,
    ];
    let raw_slope = [pc.x / z, pc.y / z];
    let clamped = [raw_slope[0].abs() > lim[0], raw_slope[1].abs() > lim[1]];
    let slope = [raw_slope[0].clamp(-lim[0], lim[0]), raw_slope[1].clamp(-lim[1], lim[1])];
    let j0 = DVec3::new(cam.fx / z, 0.0, -cam.fx * slope[0] / z);
    let j1 = DVec3::new(0.0, cam.fy / z, -cam.fy * slope[1] / z);

    let vj0 = v_cam * j0;
    let vj1 = v_cam * j1;
    let cov = [
        j0.dot(vj0) + opts.low_pass,
        j0.dot(vj1),
        j1.dot(vj1) + opts.low_pass,
    ];
    let det = cov[0] * cov[2] - cov[1] * cov[1];
    if !(det > 0.0) {
        return None;
    }
    let conic = [cov[2] / det, -cov[1] / det, cov[0] / det];

    let mean2d = cam.project_camera(pc);
    let view = p - cam.center();
    let dir = view.normalize();
    let mut raw_color = [0.0; 3];
    for (ch, out) in raw_color.iter_mut().enumerate() {
        *out = SH_C0 * g.sh[0][ch]
            + SH_C1 * (-dir.y * g.sh[1][ch] + dir.z * g.sh[2][ch] - dir.x * g.sh[3][ch])
            + 0.5;
    }

    Some(Forward {
        pc,
        rot,
        scale,
        m,
        v_cam,
        j0,
        j1,
        clamped,
        slope,
        conic,
        cov,
        mean2d,
        view,
        raw_color,
        opacity,
        temporal,
        bump,
        gate,
    })
}

/// Projects primitive `index` at time `t` using `velocity` for its motion.
/// Returns `None` when it is culled (behind the near plane or too transparent).
pub fn project(
    g: &SpacetimeGaussian,
    index: usize,
    velocity: DVec3,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
) -> Option<Splat2D> {
    let f = forward(g, velocity, cam, t, opts)?;
    let alpha_base = f.opacity * f.temporal;
    let radius = if opts.alpha_min > 0.0 {
        let [a, b, c] = f.cov;
        let mid = 0.5 * (a + c);
        let lambda_max = mid + (mid * mid - (a * c - b * b)).max(0.0).sqrt();
        let extent = 2.0 * (alpha_base / opts.alpha_min).ln();
        // small slack so tile coverage never misses a boundary pixel
        (lambda_max * extent.max(0.0)).sqrt() * (1.0 + 1e-9) + 1e-6
    } else {
        f64::INFINITY
    };
    Some(Splat2D {
        index,
        mean2d: f.mean2d,
        cov2d: f.cov,
        conic: f.conic,
        depth: f.pc.z,
        color: f.raw_color.map(|c| c.max(0.0)),
        alpha_base,
        radius,
        power_cut: if opts.alpha_min > 0.0 {
            (opts.alpha_min / alpha_base).ln() - 1e-9
        } else {
            f64::NEG_INFINITY
        },
    })
}

/// Pulls splat-space gradients back to the primitive's parameters. The
/// velocity gradient is written to the velocity slot whatever the source of
/// `velocity` was.
pub fn project_backward(
    g: &SpacetimeGaussian,
    velocity: DVec3,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    grad: &SplatGrad,
) -> ParamVec {
    let mut out = [0.0; layout::NUM_PARAMS];
    let Some(f) = forward(g, velocity, cam, t, opts) else {
        return out;
    };
    let mut g_p = DVec3::ZERO;

    // colour
    let dist = f.view.length();
    let dir = f.view / dist;
    let mut g_dir = DVec3::ZERO;
    for ch in 0..3 {
        if f.raw_color[ch] <= 0.0 {
            continue;
        }
        let gc = grad.color[ch];
        out[layout::SH + ch] = SH_C0 * gc;
        out[layout::SH + 3 + ch] = -SH_C1 * dir.y * gc;
        out[layout::SH + 6 + ch] = SH_C1 * dir.z * gc;
        out[layout::SH + 9 + ch] = -SH_C1 * dir.x * gc;
        g_dir.x -= SH_C1 * g.sh[3][ch] * gc;
        g_dir.y -= SH_C1 * g.sh[1][ch] * gc;
        g_dir.z += SH_C1 * g.sh[2][ch] * gc;
    }
    g_p += (g_dir - dir * dir.dot(g_dir)) / dist;

    // opacity and temporal factor
    let ga = grad.alpha_base;
    out[layout::OPACITY] = ga * f.temporal * f.opacity * (1.0 - f.opacity);
    let s = g.duration();
    let zs = (t - g.t_center) / s;
    let bump_weight = match opts.opacity_mode {
        OpacityMode::Legacy => 1.0,
        OpacityMode::Gated => {
            let dg = opts.gamma * f.gate * (1.0 - f.gate);
            out[layout::GATE] = ga * f.opacity * (1.0 - f.bump) * dg;
            1.0 - f.gate
        }
    };
    let g_bump = ga * f.opacity * bump_weight;
    out[layout::T_CENTER] += g_bump * f.bump * zs / s;
    out[layout::LOG_DURATION] = g_bump * f.bump * zs * zs;

    // conic -> 2D covariance: dQ = -Q dS Q
    let q = [[f.conic[0], f.conic[1]], [f.conic[1], f.conic[2]]];
    let gq = [
        [grad.conic[0], 0.5 * grad.conic[1]],
        [0.5 * grad.conic[1], grad.conic[2]],
    ];
    let mut gs = [[0.0; 2]; 2];
    for (r, row) in gs.iter_mut().enumerate() {
        for (c, v) in row.iter_mut().enumerate() {
            let mut acc = 0.0;
            for k in 0..2 {
                for l in 0..2 {
                    acc += q[r][k] * gq[k][l] * q[l][c];
                }
            }
            *v = -acc;
        }
    }

    // 2D covariance -> camera-space covariance and Jacobian
    let (j0, j1) = (f.j0, f.j1);
    let g_vcam = outer(j0, j0) * gs[0][0]
        + (outer(j0, j1) + outer(j1, j0)) * gs[0][1]
        + outer(j1, j1) * gs[1][1];
    let vj0 = f.v_cam * j0;
    let vj1 = f.v_cam * j1;
    let g_j0 = (vj0 * gs[0][0] + vj1 * gs[0][1]) * 2.0;
    let g_j1 = (vj0 * gs[0][1] + vj1 * gs[1][1]) * 2.0;

    let (fx, fy) = (cam.fx, cam.fy);
    let (x, y, z) = (f.pc.x, f.pc.y, f.pc.z);
    let mut g_pc = DVec3::ZERO;
    // mean2d
    g_pc.x += grad.mean2d[0] * fx / z;
    g_pc.y += grad.mean2d[1] * fy / z;
    g_pc.z -= (grad.mean2d[0] * fx * x + grad.mean2d[1] * fy * y) / (z * z);
    // J entries: j0 = (fx/z, 0, -fx u/z), j1 = (0, fy/z, -fy w/z)
    g_pc.z -= g_j0.x * fx / (z * z) + g_j1.y * fy / (z * z);
    for (axis, (gj, focal)) in [(g_j0.z, fx), (g_j1.z, fy)].into_iter().enumerate() {
        let u = f.slope[axis];
        // d(-focal u / z) = focal u / z² dz - focal / z du
        g_pc.z += gj * focal * u / (z * z);
        if !f.clamped[axis] {
            let g_u = -gj * focal / z;
            let coord = if axis == 0 { x } else { y };
            g_pc[axis] += g_u / z;
            g_pc.z -= g_u * coord / (z * z);
        }
    }
    let w = cam.rotation;
    g_p += w.transpose() * g_pc;

    // camera-space covariance -> world covariance -> rotation and scale
    let g_sigma = w.transpose() * g_vcam * w;
    let g_m = g_sigma * f.m * 2.0;
    let mut g_rot = DMat3::ZERO;
    for k in 0..3 {
        let col = g_m.col(k);
        *g_rot.col_mut(k) = col * f.scale[k];
        out[layout::LOG_SCALE + k] = f.rot.col(k).dot(col) * f.scale[k];
    }
    let gq = quat_to_mat_backward(g.rotation, &g_rot);
    out[layout::ROTATION..layout::ROTATION + 4].copy_from_slice(&gq);

    // position_at
    let dt = t - g.t_center;
    out[layout::MEAN..layout::MEAN + 3].copy_from_slice(&g_p.to_array());
    out[layout::VELOCITY..layout::VELOCITY + 3].copy_from_slice(&(g_p * dt).to_array());
    out[layout::T_CENTER] -= g_p.dot(velocity);
    out
}

/// Image-space velocity (pixels per unit time) of a primitive, from the
/// projection Jacobian at time `t`.
pub fn screen_velocity(g: &SpacetimeGaussian, velocity: DVec3, cam: &Camera, t: f64) -> Option<[f64; 2]> {
    let pc = cam.world_to_camera(g.position_with_velocity(t, velocity));
    if pc.z <= 0.0 {
        return None;
    }
    let vc = cam.rotation * velocity;
    let z = pc.z;
    Some([
        cam.fx * (vc.x / z - pc.x * vc.z / (z * z)),
        cam.fy * (vc.y / z - pc.y * vc.z / (z * z)),
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::quat_from_axis_angle;

    fn axis_camera() -> Camera {
        Camera::new(100.0, 100.0, 32.0, 32.0, 64, 64, DMat3::IDENTITY, DVec3::ZERO).unwrap()
    }

    #[test]
    fn on_axis_projects_to_principal_point() {
        let mut g = SpacetimeGaussian::default();
        g.mean = DVec3::new(0.0, 0.0, 1.0);
        let s = project(&g, 0, DVec3::ZERO, &axis_camera(), 0.5, &RenderOptions::default()).unwrap();
        assert_eq!(s.mean2d, [32.0, 32.0]);
        assert_eq!(s.depth, 1.0);
    }

    #[test]
    fn isotropic_covariance_matches_symbolic_jacobian() {
        let mut g = SpacetimeGaussian::default();
        let (sigma, z) = (0.02f64, 2.5);
        g.mean = DVec3::new(0.0, 0.0, z);
        g.log_scale = DVec3::splat(sigma.ln());
        g.rotation = quat_from_axis_angle(DVec3::new(0.3, 1.0, 0.2), 0.8);
        let opts = RenderOptions::default();
        let s = project(&g, 0, DVec3::ZERO, &axis_camera(), 0.5, &opts).unwrap();
        let expected = (100.0 * sigma / z).powi(2) + opts.low_pass;
        assert!((s.cov2d[0] - expected).abs() < 1e-12);
        assert!((s.cov2d[2] - expected).abs() < 1e-12);
        assert!(s.cov2d[1].abs() < 1e-12);
    }

    #[test]
    fn far_from_temporal_center_is_culled() {
        let mut g = SpacetimeGaussian::default();
        g.mean = DVec3::new(0.0, 0.0, 1.0);
        g.opacity_logit = 10.0;
        g.t_center = 0.2;
        g.log_duration = 0.05f64.ln();
        let opts = RenderOptions::default();
        // 4 std-devs out: exp(-8) < 1/255
        assert!(project(&g, 0, DVec3::ZERO, &axis_camera(), 0.4, &opts).is_none());
        assert!(project(&g, 0, DVec3::ZERO, &axis_camera(), 0.25, &opts).is_some());
    }

    #[test]
    fn behind_camera_is_culled() {
        let mut g = SpacetimeGaussian::default();
        g.mean = DVec3::new(0.0, 0.0, -1.0);
        assert!(project(&g, 0, DVec3::ZERO, &axis_camera(), 0.5, &RenderOptions::default()).is_none());
    }

    #[test]
    fn screen_velocity_matches_projected_displacement() {
        let cam = axis_camera();
        let mut g = SpacetimeGaussian::default();
        g.mean = DVec3::new(0.1, -0.2, 2.0);
        let v = DVec3::new(0.3, 0.1, -0.2);
        let sv = screen_velocity(&g, v, &cam, 0.5).unwrap();
        let h = 1e-6;
        let a = cam.project(g.position_with_velocity(0.5 - h, v)).unwrap().0;
        let b = cam.project(g.position_with_velocity(0.5 + h, v)).unwrap().0;
        for k in 0..2 {
            assert!(((b[k] - a[k]) / (2.0 * h) - sv[k]).abs() < 1e-5);
        }
    }
}
