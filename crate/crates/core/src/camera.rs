use glam::{DMat3, DVec3};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::math::{mat_from_rows, max_abs};

/// Per-camera affine colour transform `rgb ↦ M rgb + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorCorrection {
    pub matrix: DMat3,
    pub bias: DVec3,
}

impl Default for ColorCorrection {
    fn default() -> Self {
        Self {
            matrix: DMat3::IDENTITY,
            bias: DVec3::ZERO,
        }
    }
}

impl ColorCorrection {
    #[inline]
    pub fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        (self.matrix * DVec3::from_array(rgb) + self.bias).to_array()
    }

    pub fn is_identity(&self) -> bool {
        self.matrix == DMat3::IDENTITY && self.bias == DVec3::ZERO
    }

    /// Applies the transform to every pixel of an RGB image, without clamping.
    pub fn apply_image(&self, img: &Image) -> Image {
        assert_eq!(img.channels, 3, "colour correction needs an RGB image");
        let mut out = img.clone();
        for px in out.data.chunks_exact_mut(3) {
            px.copy_from_slice(&self.apply([px[0], px[1], px[2]]));
        }
        out
    }
}

/// Gradient of a loss w.r.t. a [`ColorCorrection`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ColorCorrectionGrad {
    pub matrix: DMat3,
    pub bias: DVec3,
}

impl Default for ColorCorrectionGrad {
    fn default() -> Self {
        Self {
            matrix: DMat3::ZERO,
            bias: DVec3::ZERO,
        }
    }
}

/// Pinhole camera with world-to-camera extrinsics. Camera space looks down +z
/// with +y pointing down the image.
#[derive(Debug, Clone, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    /// World-to-camera rotation.
    pub rotation: DMat3,
    /// World-to-camera translation.
    pub translation: DVec3,
    pub cc: ColorCorrection,
}

impl Camera {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: usize,
        height: usize,
        rotation: DMat3,
        translation: DVec3,
    ) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
            rotation,
            translation,
            cc: ColorCorrection::default(),
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(
        eye: DVec3,
        target: DVec3,
        up: DVec3,
        fx: f64,
        fy: f64,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(up).normalize();
        let down = forward.cross(right);
        if !right.is_finite() || !down.is_finite() {
            return Err(Error::InvalidInput("degenerate look-at frame".into()));
        }
        let rotation = mat_from_rows(right.to_array(), down.to_array(), forward.to_array());
        let translation = -(rotation * eye);
        Self::new(
            fx,
            fy,
            width as f64 / 2.0,
            height as f64 / 2.0,
            width,
            height,
            rotation,
            translation,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let r = self.rotation;
        let ortho = max_abs(&(r * r.transpose() - DMat3::IDENTITY));
        if ortho > 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::InvalidInput(format!(
                "camera rotation is not a proper rotation (orthogonality error {ortho:.2e})"
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::InvalidInput("camera intrinsics must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn world_to_camera(&self, p: DVec3) -> DVec3 {
        self.rotation * p + self.translation
    }

    pub fn center(&self) -> DVec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Pixel coordinates of a camera-space point (z > 0).
    #[inline]
    pub fn project_camera(&self, pc: DVec3) -> [f64; 2] {
        [
            self.fx * pc.x / pc.z + self.cx,
            self.fy * pc.y / pc.z + self.cy,
        ]
    }

    /// Projects a world point; `None` when it is behind the camera.
    pub fn project(&self, p: DVec3) -> Option<([f64; 2], f64)> {
        let pc = self.world_to_camera(p);
        (pc.z > 1e-9).then(|| (self.project_camera(pc), pc.z))
    }

    /// World-space point at pixel position `px` with camera-space depth `z`.
    pub fn unproject(&self, px: [f64; 2], z: f64) -> DVec3 {
        let pc = DVec3::new((px[0] - self.cx) / self.fx * z, (px[1] - self.cy) / self.fy * z, z);
        self.rotation.transpose() * (pc - self.translation)
    }

    /// Unit world-space direction of the ray through pixel position `px`.
    pub fn ray_direction(&self, px: [f64; 2]) -> DVec3 {
        let d = DVec3::new((px[0] - self.cx) / self.fx, (px[1] - self.cy) / self.fy, 1.0);
        (self.rotation.transpose() * d).normalize()
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }
}

/// `cc_loss`: summed squared deviation of every camera's colour correction
/// from the identity transform, with its gradient per camera.
pub fn cc_loss(cameras: &[Camera]) -> (f64, Vec<ColorCorrectionGrad>) {
    let mut value = 0.0;
    let grads = cameras
        .iter()
        .map(|cam| {
            let dm = cam.cc.matrix - DMat3::IDENTITY;
            value += dm.to_cols_array().iter().map(|v| v * v).sum::<f64>()
                + cam.cc.bias.length_squared();
            ColorCorrectionGrad {
                matrix: dm * 2.0,
                bias: cam.cc.bias * 2.0,
            }
        })
        .collect();
    (value, grads)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_puts_target_on_axis() {
        let cam = Camera::look_at(
            DVec3::new(0.0, -1.0, -4.0),
            DVec3::ZERO,
            DVec3::NEG_Y,
            50.0,
            50.0,
            64,
            64,
        )
        .unwrap();
        let (px, z) = cam.project(DVec3::ZERO).unwrap();
        assert!((px[0] - 32.0).abs() < 1e-12 && (px[1] - 32.0).abs() < 1e-12);
        assert!((z - 17f64.sqrt()).abs() < 1e-12);
        assert!((cam.center() - DVec3::new(0.0, -1.0, -4.0)).length() < 1e-12);
    }

    #[test]
    fn unproject_inverts_project() {
        let cam = Camera::look_at(
            DVec3::new(2.0, -1.0, -3.0),
            DVec3::new(0.0, 0.5, 0.0),
            DVec3::NEG_Y,
            60.0,
            55.0,
            64,
            48,
        )
        .unwrap();
        let p = DVec3::new(0.3, -0.2, 0.9);
        let (px, z) = cam.project(p).unwrap();
        assert!((cam.unproject(px, z) - p).length() < 1e-12);
        let d = cam.ray_direction(px);
        assert!(((p - cam.center()).normalize() - d).length() < 1e-12);
    }

    #[test]
    fn rejects_non_rotation() {
        let bad = DMat3::from_diagonal(DVec3::new(1.0, 1.0, -1.0));
        assert!(Camera::new(1.0, 1.0, 0.0, 0.0, 4, 4, bad, DVec3::ZERO).is_err());
    }

    #[test]
    fn cc_loss_examples() {
        let mut cam = Camera::look_at(DVec3::NEG_Z * 3.0, DVec3::ZERO, DVec3::NEG_Y, 10.0, 10.0, 8, 8)
            .unwrap();
        assert_eq!(cc_loss(std::slice::from_ref(&cam)).0, 0.0);
        cam.cc.bias = DVec3::new(0.1, 0.0, 0.0);
        assert!((cc_loss(std::slice::from_ref(&cam)).0 - 0.01).abs() < 1e-15);
    }
}
