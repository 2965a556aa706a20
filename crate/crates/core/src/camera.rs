//! Pinhole cameras: intrinsics, world-to-camera poses, projection and
//! per-pixel ray generation.
//!
//! Pixel coordinates are continuous with the origin at the top-left corner of
//! the top-left pixel. Integer pixel `(u, v)` is sampled through its center
//! `(u + 0.5, v + 0.5)`; the principal point lives in the same continuous
//! frame, so cropping a view only shifts `(cx, cy)` by the crop origin.
//!
//! Camera frame: `x` right, `y` down, `z` forward (depth).

use nalgebra::{Matrix3, Matrix3x4, Vector2};
use thiserror::Error;

use crate::geom::Vec3;

/// Tolerance on `R^T R = I` and `det R = 1` for a constructed [`Pose`].
pub const ORTHONORMAL_TOL: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum CameraError {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("rotation is not orthonormal (deviation {deviation:e}, det {det})")]
    NotOrthonormal { deviation: f64, det: f64 },
    #[error("non-finite pose entry")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, CameraError> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics(format!("focal lengths must be positive, got ({fx}, {fy})")));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(CameraError::InvalidIntrinsics("principal point must be finite".into()));
        }
        if width == 0 || height == 0 {
            return Err(CameraError::InvalidIntrinsics(format!("image size must be positive, got {width}x{height}")));
        }
        Ok(Self { fx, fy, cx, cy, width, height })
    }

    /// Symmetric intrinsics for a horizontal field of view in degrees,
    /// principal point at the image center.
    pub fn from_fov(width: u32, height: u32, hfov_deg: f64) -> Result<Self, CameraError> {
        let f = 0.5 * width as f64 / (0.5 * hfov_deg.to_radians()).tan();
        Self::new(f, f, 0.5 * width as f64, 0.5 * height as f64, width, height)
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, pixel: &Vector2<f64>) -> bool {
        pixel.x >= 0.0 && pixel.y >= 0.0 && pixel.x < self.width as f64 && pixel.y < self.height as f64
    }

    pub fn pixel_count(&self) -> u64 {
        self.width as u64 * self.height as u64
    }
}

/// World-to-camera rigid transform: `x_cam = R x_world + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

fn orthonormal_deviation(r: &Matrix3<f64>) -> (f64, f64) {
    let dev = (r.transpose() * r - Matrix3::identity()).abs().max();
    (dev, r.determinant())
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, CameraError> {
        Self::with_tolerance(rotation, translation, ORTHONORMAL_TOL)
    }

    /// Accepts rotations within `tol` of orthonormal, then projects onto the
    /// nearest rotation so the stored matrix meets [`ORTHONORMAL_TOL`].
    pub fn with_tolerance(rotation: Matrix3<f64>, translation: Vec3, tol: f64) -> Result<Self, CameraError> {
        if rotation.iter().chain(translation.iter()).any(|v| !v.is_finite()) {
            return Err(CameraError::NonFinite);
        }
        let (deviation, det) = orthonormal_deviation(&rotation);
        if deviation > tol || (det - 1.0).abs() > tol {
            return Err(CameraError::NotOrthonormal { deviation, det });
        }
        let rotation = if deviation > ORTHONORMAL_TOL * 0.1 { nearest_rotation(&rotation) } else { rotation };
        Ok(Self { rotation, translation })
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Camera at `eye` looking at `target`; `up` fixes the roll (image `y`
    /// points away from it).
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Result<Self, CameraError> {
        let z = (target - eye).normalize();
        let x = z.cross(&up);
        if x.norm() < 1e-12 {
            return Err(CameraError::InvalidIntrinsics("look_at up vector is parallel to view direction".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Camera center in world coordinates, `-R^T t`.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera-to-world transform expressed as a `Pose`.
    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose { rotation: rt, translation: -(rt * self.translation) }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// World-frame unit vector along the optical axis.
    pub fn optical_axis(&self) -> Vec3 {
        self.rotation.row(2).transpose()
    }
}

/// Closest rotation in the Frobenius sense (polar decomposition via SVD).
fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, vt) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut r = u * vt;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * vt;
    }
    r
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub t_near: f64,
    pub t_far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        self.origin + self.direction * t
    }
}

/// Result of projecting a world point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Vector2<f64>,
    /// Camera-frame `z`.
    pub depth: f64,
}

impl Projection {
    pub fn in_front(&self) -> bool {
        self.depth > 0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CameraView {
    pub view_id: String,
    pub intrinsics: Intrinsics,
    pub pose: Pose,
    pub image_path: std::path::PathBuf,
}

impl CameraView {
    pub fn new(view_id: impl Into<String>, intrinsics: Intrinsics, pose: Pose) -> Self {
        Self { view_id: view_id.into(), intrinsics, pose, image_path: Default::default() }
    }

    /// `P = K [R | t]`.
    pub fn projection_matrix(&self) -> Matrix3x4<f64> {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(self.pose.rotation());
        rt.set_column(3, self.pose.translation());
        self.intrinsics.matrix() * rt
    }

    /// Projects a world point to continuous pixel coordinates. Points behind
    /// the camera are returned with `depth <= 0`; no clamping to the frame.
    pub fn project(&self, point: &Vec3) -> Projection {
        let pc = self.pose.transform_point(point);
        let k = &self.intrinsics;
        Projection {
            pixel: Vector2::new(k.fx * pc.x / pc.z + k.cx, k.fy * pc.y / pc.z + k.cy),
            depth: pc.z,
        }
    }

    /// Ray through a continuous pixel location, unbounded in `t`.
    pub fn cast_ray(&self, pixel: &Vector2<f64>) -> Ray {
        let k = &self.intrinsics;
        let d_cam = Vec3::new((pixel.x - k.cx) / k.fx, (pixel.y - k.cy) / k.fy, 1.0);
        let direction = (self.pose.rotation().transpose() * d_cam).normalize();
        Ray { origin: self.pose.center(), direction, t_near: 0.0, t_far: f64::INFINITY }
    }

    /// Ray through the center of integer pixel `(u, v)`.
    pub fn cast_pixel_ray(&self, u: u32, v: u32) -> Ray {
        self.cast_ray(&pixel_center(u, v))
    }
}

pub fn pixel_center(u: u32, v: u32) -> Vector2<f64> {
    Vector2::new(u as f64 + 0.5, v as f64 + 0.5)
}
