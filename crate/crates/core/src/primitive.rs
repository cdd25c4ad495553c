//! The spacetime Gaussian primitive and its closed-form per-primitive formulas.
//!
//! Every primitive carries a spatial mean at its reference time, a temporal
//! center and duration, a linear velocity, an anisotropic spatial covariance,
//! a base opacity logit, degree-1 spherical harmonics and a persistence gate
//! logit. Durations and scales live in log space and opacities/gates in logit
//! space so that any unconstrained parameter vector is valid.
//!
//! A single duration `s` is stored. The gated temporal weight uses a window
//! `d = 6 s`, so its transient bump has standard deviation `s` and coincides
//! with the legacy temporal opacity when the gate is closed.

use glam::{DMat3, DVec3};
use serde::{Deserialize, Serialize};

use crate::math::{quat_to_mat, sigmoid};

pub const SH_C0: f64 = 0.282_094_791_773_878_14;
pub const SH_C1: f64 = 0.488_602_511_902_919_9;
/// Degree-1 spherical harmonics: one DC and three linear coefficients.
pub const SH_COEFFS: usize = 4;

/// Offsets of each field inside the flat parameter vector used by the optimizer
/// and by gradient buffers.
pub mod layout {
    pub const MEAN: usize = 0;
    pub const T_CENTER: usize = 3;
    pub const LOG_DURATION: usize = 4;
    pub const VELOCITY: usize = 5;
    pub const LOG_SCALE: usize = 8;
    pub const ROTATION: usize = 11;
    pub const OPACITY: usize = 15;
    pub const SH: usize = 16;
    pub const GATE: usize = 28;
    pub const NUM_PARAMS: usize = 29;
}

pub type ParamVec = [f64; layout::NUM_PARAMS];

/// Default persistence-gate sharpness.
pub const DEFAULT_GAMMA: f64 = 20.0;

/// How the temporal factor of a primitive's opacity is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OpacityMode {
    /// Base opacity times a Gaussian bump in time.
    #[default]
    Legacy,
    /// Base opacity times a gate-blended mix of "always on" and the bump.
    Gated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpacetimeGaussian {
    pub mean: DVec3,
    pub t_center: f64,
    pub log_duration: f64,
    pub velocity: DVec3,
    pub log_scale: DVec3,
    /// `[w, x, y, z]`, unit norm after every optimizer step.
    pub rotation: [f64; 4],
    pub opacity_logit: f64,
    /// `sh[k]` is the RGB triple of coefficient `k`.
    pub sh: [[f64; 3]; SH_COEFFS],
    pub gate_logit: f64,
}

impl Default for SpacetimeGaussian {
    fn default() -> Self {
        Self {
            mean: DVec3::ZERO,
            t_center: 0.5,
            log_duration: 0.0,
            velocity: DVec3::ZERO,
            log_scale: DVec3::splat(-3.0),
            rotation: [1.0, 0.0, 0.0, 0.0],
            opacity_logit: 0.0,
            sh: [[0.0; 3]; SH_COEFFS],
            gate_logit: 0.0,
        }
    }
}

impl SpacetimeGaussian {
    #[inline]
    pub fn duration(&self) -> f64 {
        self.log_duration.exp()
    }

    #[inline]
    pub fn scale(&self) -> DVec3 {
        DVec3::new(
            self.log_scale.x.exp(),
            self.log_scale.y.exp(),
            self.log_scale.z.exp(),
        )
    }

    #[inline]
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    /// Position at time `t` under the stored velocity.
    #[inline]
    pub fn position_at(&self, t: f64) -> DVec3 {
        self.position_with_velocity(t, self.velocity)
    }

    #[inline]
    pub fn position_with_velocity(&self, t: f64, velocity: DVec3) -> DVec3 {
        self.mean + velocity * (t - self.t_center)
    }

    /// Gaussian bump in time centred at `t_center` with std-dev `s`.
    #[inline]
    pub fn temporal_opacity(&self, t: f64) -> f64 {
        let z = (t - self.t_center) / self.duration();
        (-0.5 * z * z).exp()
    }

    /// `Σ = R S Sᵀ Rᵀ`.
    pub fn covariance(&self) -> DMat3 {
        let r = quat_to_mat(self.rotation);
        let m = r * DMat3::from_diagonal(self.scale());
        m * m.transpose()
    }

    #[inline]
    pub fn gate(&self, gamma: f64) -> f64 {
        sigmoid(gamma * self.gate_logit)
    }

    /// `g + (1 - g) exp(-½((t - τ)/(d/6))²)` with `d = 6 s`.
    #[inline]
    pub fn temporal_weight(&self, t: f64, gamma: f64) -> f64 {
        let g = self.gate(gamma);
        let window = 6.0 * self.duration();
        let z = (t - self.t_center) / (window / 6.0);
        g + (1.0 - g) * (-0.5 * z * z).exp()
    }

    /// Temporal factor of the opacity for the given mode.
    #[inline]
    pub fn temporal_factor(&self, t: f64, mode: OpacityMode, gamma: f64) -> f64 {
        match mode {
            OpacityMode::Legacy => self.temporal_opacity(t),
            OpacityMode::Gated => self.temporal_weight(t, gamma),
        }
    }

    /// Opacity at time `t` before the spatial Gaussian falloff.
    #[inline]
    pub fn final_opacity(&self, t: f64, mode: OpacityMode, gamma: f64) -> f64 {
        self.opacity() * self.temporal_factor(t, mode, gamma)
    }

    /// View-dependent RGB for a unit direction from the camera to the primitive.
    /// Negative channels are clamped to zero.
    pub fn color(&self, dir: DVec3) -> [f64; 3] {
        let mut c = [0.0; 3];
        for (ch, out) in c.iter_mut().enumerate() {
            let v = SH_C0 * self.sh[0][ch]
                + SH_C1 * (-dir.y * self.sh[1][ch] + dir.z * self.sh[2][ch] - dir.x * self.sh[3][ch])
                + 0.5;
            *out = v.max(0.0);
        }
        c
    }

    pub fn params(&self) -> ParamVec {
        use layout::*;
        let mut p = [0.0; NUM_PARAMS];
        p[MEAN..MEAN + 3].copy_from_slice(&self.mean.to_array());
        p[T_CENTER] = self.t_center;
        p[LOG_DURATION] = self.log_duration;
        p[VELOCITY..VELOCITY + 3].copy_from_slice(&self.velocity.to_array());
        p[LOG_SCALE..LOG_SCALE + 3].copy_from_slice(&self.log_scale.to_array());
        p[ROTATION..ROTATION + 4].copy_from_slice(&self.rotation);
        p[OPACITY] = self.opacity_logit;
        for k in 0..SH_COEFFS {
            p[SH + 3 * k..SH + 3 * k + 3].copy_from_slice(&self.sh[k]);
        }
        p[GATE] = self.gate_logit;
        p
    }

    pub fn from_params(p: &ParamVec) -> Self {
        use layout::*;
        let v3 = |o: usize| DVec3::new(p[o], p[o + 1], p[o + 2]);
        let mut sh = [[0.0; 3]; SH_COEFFS];
        for (k, coeff) in sh.iter_mut().enumerate() {
            coeff.copy_from_slice(&p[SH + 3 * k..SH + 3 * k + 3]);
        }
        Self {
            mean: v3(MEAN),
            t_center: p[T_CENTER],
            log_duration: p[LOG_DURATION],
            velocity: v3(VELOCITY),
            log_scale: v3(LOG_SCALE),
            rotation: [p[ROTATION], p[ROTATION + 1], p[ROTATION + 2], p[ROTATION + 3]],
            opacity_logit: p[OPACITY],
            sh,
            gate_logit: p[GATE],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|v| v.is_finite())
    }
}

/// DC coefficient reproducing `rgb` for any view direction.
#[inline]
pub fn rgb_to_sh_dc(rgb: [f64; 3]) -> [f64; 3] {
    [
        (rgb[0] - 0.5) / SH_C0,
        (rgb[1] - 0.5) / SH_C0,
        (rgb[2] - 0.5) / SH_C0,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::{mat_from_rows, quat_from_axis_angle};
    use proptest::prelude::*;

    fn with(f: impl FnOnce(&mut SpacetimeGaussian)) -> SpacetimeGaussian {
        let mut g = SpacetimeGaussian::default();
        f(&mut g);
        g
    }

    #[test]
    fn position_examples() {
        let g = with(|g| g.mean = DVec3::new(1.0, 2.0, 3.0));
        assert_eq!(g.position_at(0.37), DVec3::new(1.0, 2.0, 3.0));

        let g = with(|g| {
            g.velocity = DVec3::X;
            g.t_center = 0.5;
        });
        assert!((g.position_at(0.7) - DVec3::new(0.2, 0.0, 0.0)).length() < 1e-15);

        let g = with(|g| {
            g.mean = DVec3::ONE;
            g.velocity = DVec3::new(2.0, -1.0, 0.0);
            g.t_center = 0.2;
        });
        // 1 + 2(-0.2), 1 - (-0.2), 1
        assert!((g.position_at(0.0) - DVec3::new(0.6, 1.2, 1.0)).length() < 1e-15);
    }

    #[test]
    fn temporal_opacity_examples() {
        let g = with(|g| {
            g.t_center = 0.5;
            g.log_duration = 0.1f64.ln();
        });
        assert_eq!(g.temporal_opacity(0.5), 1.0);
        assert!((g.temporal_opacity(0.6) - (-0.5f64).exp()).abs() < 1e-12);
        assert!((g.temporal_opacity(0.6) - 0.6065).abs() < 1e-4);

        let flat = with(|g| g.log_duration = 1e3f64.ln());
        for t in [0.0, 0.25, 1.0] {
            assert!(flat.temporal_opacity(t) >= 0.999_999_5);
        }
    }

    #[test]
    fn covariance_examples() {
        let g = with(|g| g.log_scale = DVec3::new(1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()));
        let c = g.covariance();
        let expected = DMat3::from_diagonal(DVec3::new(1.0, 4.0, 9.0));
        assert!((c - expected).abs().to_cols_array().iter().all(|v| *v < 1e-12));

        let g = with(|g| {
            g.log_scale = DVec3::splat(0.7f64.ln());
            g.rotation = quat_from_axis_angle(DVec3::new(1.0, 2.0, -0.5), 1.1);
        });
        let c = g.covariance();
        let expected = DMat3::IDENTITY * 0.49;
        assert!((c - expected).abs().to_cols_array().iter().all(|v| *v < 1e-12));

        // 90° about z maps x->y: R diag(1,4,1) Rᵀ = diag(4,1,1), checked against
        // an explicit product.
        let g = with(|g| {
            g.log_scale = DVec3::new(0.0, 2.0f64.ln(), 0.0);
            g.rotation = quat_from_axis_angle(DVec3::Z, std::f64::consts::FRAC_PI_2);
        });
        let r = mat_from_rows([0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]);
        let s2 = DMat3::from_diagonal(DVec3::new(1.0, 4.0, 1.0));
        let oracle = r * s2 * r.transpose();
        let c = g.covariance();
        assert!((c - oracle).abs().to_cols_array().iter().all(|v| *v < 1e-12));
        assert!((c - DMat3::from_diagonal(DVec3::new(4.0, 1.0, 1.0)))
            .abs()
            .to_cols_array()
            .iter()
            .all(|v| *v < 1e-12));
    }

    #[test]
    fn gate_examples() {
        let g = with(|g| g.gate_logit = 0.0);
        assert_eq!(g.gate(20.0), 0.5);
        let g = with(|g| g.gate_logit = 0.5);
        assert!((g.gate(20.0) - 1.0 / (1.0 + (-10.0f64).exp())).abs() < 1e-15);
        assert!((g.gate(20.0) - 0.999_954_6).abs() < 1e-7);
        let g = with(|g| g.gate_logit = 1e6);
        assert_eq!(g.gate(20.0), 1.0);
    }

    #[test]
    fn temporal_weight_examples() {
        let g = with(|g| {
            g.gate_logit = 1e6;
            g.t_center = 0.1;
            g.log_duration = 0.01f64.ln();
        });
        assert_eq!(g.temporal_weight(0.9, 20.0), 1.0);

        let g = with(|g| {
            g.gate_logit = -1e6;
            g.t_center = 0.3;
        });
        assert_eq!(g.temporal_weight(0.3, 20.0), 1.0);

        // g = 0.5, τ = 0.5, d = 0.6 (s = 0.1), t = 0.6
        let g = with(|g| {
            g.gate_logit = 0.0;
            g.t_center = 0.5;
            g.log_duration = 0.1f64.ln();
        });
        let expected = 0.5 + 0.5 * (-0.5f64).exp();
        assert!((g.temporal_weight(0.6, 20.0) - expected).abs() < 1e-12);
        assert!((expected - 0.8033).abs() < 1e-4);
    }

    #[test]
    fn final_opacity_examples() {
        let g = with(|g| g.t_center = 0.4);
        assert_eq!(g.final_opacity(0.4, OpacityMode::Legacy, 20.0), 0.5);
        let g = with(|g| g.gate_logit = 1e6);
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(g.final_opacity(t, OpacityMode::Gated, 20.0), 0.5);
        }
        let g = with(|g| {
            g.opacity_logit = 2.0;
            g.t_center = 0.5;
            g.log_duration = 0.1f64.ln();
        });
        let expected = sigmoid(2.0) * (-0.5f64).exp();
        assert!((g.final_opacity(0.6, OpacityMode::Legacy, 20.0) - expected).abs() < 1e-12);
        assert!((expected - 0.5342).abs() < 1e-4);
    }

    #[test]
    fn param_vector_roundtrip() {
        let g = with(|g| {
            g.mean = DVec3::new(0.1, 0.2, 0.3);
            g.sh[2] = [1.0, 2.0, 3.0];
            g.gate_logit = -0.4;
            g.rotation = [0.5, 0.5, 0.5, 0.5];
        });
        assert_eq!(SpacetimeGaussian::from_params(&g.params()), g);
    }

    #[test]
    fn sh_dc_reproduces_rgb() {
        let mut g = SpacetimeGaussian::default();
        g.sh[0] = rgb_to_sh_dc([0.2, 0.7, 0.9]);
        let c = g.color(DVec3::new(0.0, 0.6, 0.8));
        for (a, b) in c.iter().zip([0.2, 0.7, 0.9]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn temporal_opacity_symmetric(mu_k in 0u32..1024, log_s in -4.0f64..2.0, delta_k in 0u32..2048) {
            // dyadic times keep μ ± δ exact so symmetry can be asserted bitwise
            let (mu, delta) = (mu_k as f64 / 1024.0, delta_k as f64 / 1024.0);
            let g = with(|g| { g.t_center = mu; g.log_duration = log_s; });
            prop_assert_eq!(g.temporal_opacity(mu + delta), g.temporal_opacity(mu - delta));
        }

        #[test]
        fn temporal_weight_monotone_in_gate(t in 0.0f64..1.0, mu in 0.0f64..1.0, log_s in -4.0f64..1.0,
                                             a in -2.0f64..2.0, b in -2.0f64..2.0) {
            prop_assume!((t - mu).abs() > 1e-9);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let g_lo = with(|g| { g.t_center = mu; g.log_duration = log_s; g.gate_logit = lo; });
            let g_hi = with(|g| { g.t_center = mu; g.log_duration = log_s; g.gate_logit = hi; });
            prop_assert!(g_lo.temporal_weight(t, 20.0) <= g_hi.temporal_weight(t, 20.0));
        }

        #[test]
        fn covariance_eigenvalues_are_squared_scales(
            ls in proptest::array::uniform3(-2.0f64..1.0),
            q in proptest::array::uniform4(-1.0f64..1.0),
        ) {
            prop_assume!(q.iter().map(|v| v * v).sum::<f64>() > 0.05);
            let g = with(|g| { g.log_scale = DVec3::from_array(ls); g.rotation = q; });
            let cov = g.covariance();
            // Eigenvalues via the orthonormal frame: Rᵀ Σ R must be diag(s²).
            let r = quat_to_mat(q);
            let d = r.transpose() * cov * r;
            for i in 0..3 {
                let s2 = (2.0 * ls[i]).exp();
                prop_assert!(((d.col(i)[i] - s2) / s2).abs() < 1e-10);
            }
            prop_assert!(crate::math::max_abs(&(cov - cov.transpose())) < 1e-14);
        }

        #[test]
        fn final_opacity_strictly_inside_unit_interval(o in -15.0f64..15.0, gl in -1.0f64..1.0,
                                                       mu in 0.0f64..1.0, log_s in -3.0f64..3.0,
                                                       t in 0.0f64..1.0) {
            let g = with(|g| { g.opacity_logit = o; g.gate_logit = gl; g.t_center = mu; g.log_duration = log_s; });
            for mode in [OpacityMode::Legacy, OpacityMode::Gated] {
                let a = g.final_opacity(t, mode, 20.0);
                prop_assert!(a > 0.0 && a < 1.0, "{a}");
            }
        }

        #[test]
        fn closed_gate_matches_legacy(mu in 0.0f64..1.0, log_s in -4.0f64..1.0, t in 0.0f64..1.0) {
            let g = with(|g| { g.t_center = mu; g.log_duration = log_s; g.gate_logit = -1e9; });
            prop_assert_eq!(g.gate(20.0), 0.0);
            prop_assert!((g.temporal_weight(t, 20.0) - g.temporal_opacity(t)).abs() <= 1e-15);
        }
    }
}
