//! Attribute maps composited with the same weights as colour rendering:
//! velocity visualizations, duration and gate maps, and induced optical flow.

use std::f64::consts::PI;

use glam::DVec3;

use super::{composite, project_cloud, screen_velocity, RenderOptions, RenderOutput, Splat2D};
use crate::camera::Camera;
use crate::cloud::GaussianCloud;
use crate::image::{cool_warm, hsv_to_rgb, Image};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Attribute {
    /// Image-space velocity; `v_ref` (pixels per unit time) maps to full saturation.
    Velocity { v_ref: f64 },
    /// Temporal duration relative to the unit sequence span.
    Duration,
    /// Persistence gate value.
    Gate,
    /// Camera-space depth.
    Depth,
}

/// Composites arbitrary per-splat triples in place of colours. Colour
/// correction and background are not applied.
pub fn composite_values(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
    value: impl Fn(&Splat2D) -> [f64; 3],
) -> RenderOutput {
    let mut splats = project_cloud(cloud, cam, t, opts, velocities);
    for s in &mut splats {
        s.color = value(s);
    }
    let plain = RenderOptions {
        apply_cc: false,
        background: [0.0; 3],
        ..*opts
    };
    composite(&splats, cam, &plain)
}

/// Velocity colour: hue from direction, saturation from magnitude, full
/// value, so zero motion renders white.
pub fn velocity_color(v: [f64; 2], v_ref: f64) -> [f64; 3] {
    let mag = v[0].hypot(v[1]);
    if mag == 0.0 {
        return [1.0; 3];
    }
    let hue = (v[1].atan2(v[0]) / (2.0 * PI)).rem_euclid(1.0);
    hsv_to_rgb(hue, (mag / v_ref).min(1.0), 1.0)
}

/// Renders `attr`. `image` holds the visualization and `aux` the raw
/// composited attribute (velocity: `[vx, vy, 0]` in pixels per unit time;
/// scalars: replicated in all three channels).
pub fn render_attribute(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
    attr: Attribute,
) -> RenderOutput {
    let vel = |i: usize| velocities.map_or(cloud.primitives()[i].velocity, |v| v[i]);
    let raw = composite_values(cloud, cam, t, opts, velocities, |s| {
        let g = &cloud.primitives()[s.index];
        match attr {
            Attribute::Velocity { .. } => {
                let sv = screen_velocity(g, vel(s.index), cam, t).unwrap_or([0.0; 2]);
                [sv[0], sv[1], 0.0]
            }
            Attribute::Duration => [g.duration(); 3],
            Attribute::Gate => [g.gate(opts.gamma); 3],
            Attribute::Depth => [s.depth; 3],
        }
    });
    let mut image = Image::zeros(cam.width, cam.height, 3);
    let max_depth = raw.image.data.iter().cloned().fold(0.0f64, f64::max);
    for y in 0..cam.height {
        for x in 0..cam.width {
            let v = raw.image.pixel(x, y);
            let a = raw.alpha.pixel(x, y)[0];
            let rgb = match attr {
                Attribute::Velocity { v_ref } => velocity_color([v[0], v[1]], v_ref),
                Attribute::Duration | Attribute::Gate => {
                    if a > 0.0 {
                        cool_warm(v[0] / a).map(|c| c * a)
                    } else {
                        [0.0; 3]
                    }
                }
                Attribute::Depth => {
                    let d = if max_depth > 0.0 { v[0] / max_depth } else { 0.0 };
                    [d; 3]
                }
            };
            image.pixel_mut(x, y).copy_from_slice(&rgb);
        }
    }
    RenderOutput {
        image,
        alpha: raw.alpha,
        aux: Some(raw.image),
    }
}

/// Optical flow induced by primitive motion between `t` and `t + dt`, in
/// pixels, composited with the render weights at `t`. Two channels.
pub fn induced_flow(
    cloud: &GaussianCloud,
    cam: &Camera,
    t: f64,
    dt: f64,
    opts: &RenderOptions,
    velocities: Option<&[DVec3]>,
) -> Image {
    assert!(dt > 0.0, "dt must be positive");
    let out = composite_values(cloud, cam, t, opts, velocities, |s| {
        let g = &cloud.primitives()[s.index];
        let v = velocities.map_or(g.velocity, |v| v[s.index]);
        let next = g.position_with_velocity(t, v) + v * dt;
        let pc = cam.world_to_camera(next);
        if pc.z <= 0.0 {
            return [0.0; 3];
        }
        let p = cam.project_camera(pc);
        [p[0] - s.mean2d[0], p[1] - s.mean2d[1], 0.0]
    });
    let mut flow = Image::zeros(cam.width, cam.height, 2);
    for (dst, src) in flow.data.chunks_exact_mut(2).zip(out.image.data.chunks_exact(3)) {
        dst.copy_from_slice(&src[..2]);
    }
    flow
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::primitive::SpacetimeGaussian;
    use glam::DMat3;

    fn cam() -> Camera {
        Camera::new(40.0, 40.0, 16.0, 16.0, 32, 32, DMat3::IDENTITY, DVec3::ZERO).unwrap()
    }

    fn splat(mean: DVec3, v: DVec3) -> SpacetimeGaussian {
        SpacetimeGaussian {
            mean,
            velocity: v,
            log_scale: DVec3::splat(0.1f64.ln()),
            opacity_logit: 3.0,
            log_duration: 10.0,
            ..Default::default()
        }
    }

    #[test]
    fn static_cloud_has_neutral_velocity_map_and_zero_flow() {
        let cloud = GaussianCloud::from_primitives(vec![splat(DVec3::new(0.0, 0.0, 2.0), DVec3::ZERO)], 1).unwrap();
        let opts = RenderOptions::default();
        let out = render_attribute(&cloud, &cam(), 0.5, &opts, None, Attribute::Velocity { v_ref: 10.0 });
        assert!(out.image.data.iter().all(|v| *v == 1.0));
        let flow = induced_flow(&cloud, &cam(), 0.5, 0.1, &opts, None);
        assert!(flow.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn hue_follows_image_space_direction() {
        // moving +x in camera space appears moving right in the image
        let cloud =
            GaussianCloud::from_primitives(vec![splat(DVec3::new(0.0, 0.0, 2.0), DVec3::new(1.0, 0.0, 0.0))], 1).unwrap();
        let out = render_attribute(&cloud, &cam(), 0.5, &RenderOptions::default(), None, Attribute::Velocity { v_ref: 1.0 });
        let c = out.image.pixel(16, 16);
        // hue 0 is red
        assert!(c[0] > 0.99 && c[1] < 0.05 && c[2] < 0.05, "{c:?}");
        let aux = out.aux.unwrap();
        assert!(aux.pixel(16, 16)[0] > 0.0 && aux.pixel(16, 16)[1].abs() < 1e-9);
    }

    #[test]
    fn single_splat_flow_equals_projected_displacement_times_weight() {
        let g = splat(DVec3::new(0.1, 0.0, 2.0), DVec3::new(0.5, -0.2, 0.0));
        let c = cam();
        let opts = RenderOptions::default();
        let dt = 0.05;
        let p0 = c.project(g.position_at(0.5)).unwrap().0;
        let p1 = c.project(g.position_at(0.5 + dt)).unwrap().0;
        let cloud = GaussianCloud::from_primitives(vec![g], 1).unwrap();
        let flow = induced_flow(&cloud, &c, 0.5, dt, &opts, None);
        let alpha = super::super::render(&cloud, &c, 0.5, &opts).alpha;
        for (x, y) in [(18, 16), (15, 17)] {
            let a = alpha.pixel(x, y)[0];
            let f = flow.pixel(x, y);
            assert!((f[0] - a * (p1[0] - p0[0])).abs() < 1e-12);
            assert!((f[1] - a * (p1[1] - p0[1])).abs() < 1e-12);
        }
    }
}
