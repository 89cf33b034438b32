//! Rotation algebra, pinhole projection with radial-tangential distortion,
//! and the world/body/camera frame chain.
//!
//! Conventions: Hamilton quaternions, `q_wb` rotates body-frame vectors into
//! the world frame, attitude perturbations are applied on the right
//! (`q ⊗ Exp(δθ)`). The world frame is z-up with gravity along `-z`.
//! Cameras use the usual x-right, y-down, z-forward frame.

use nalgebra::{Matrix2x3, Matrix3, Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Vec2 = Vector2<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Mat2x3 = Matrix2x3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Minimum camera-frame depth (m) for a point to be projected.
pub const DEPTH_EPSILON: f64 = 1e-3;

/// Below this rotation angle the exp/log maps switch to Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Number of fixed-point iterations used by [`CameraModel::undistort_normalize`].
pub const UNDISTORT_ITERATIONS: usize = 8;

/// Residual bound (normalized units) for an undistortion to count as converged.
pub const UNDISTORT_TOLERANCE: f64 = 1e-6;

/// Standard gravity magnitude (m/s²).
pub const GRAVITY_MAGNITUDE: f64 = 9.81;

#[derive(Debug, Error, Clone, Copy, PartialEq)]
pub enum GeometryError {
    #[error("point is behind the camera (depth {depth:.3e} m)")]
    BehindCamera { depth: f64 },
    #[error("undistortion did not converge (residual {residual:.3e})")]
    NoConvergence { residual: f64 },
    #[error("invalid camera model: {0}")]
    InvalidCamera(&'static str),
}

/// World up axis `g_z = [0, 0, 1]`.
pub fn up_axis() -> Vec3 {
    Vec3::new(0.0, 0.0, 1.0)
}

/// Gravity vector of a z-up world.
pub fn default_gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -GRAVITY_MAGNITUDE)
}

/// Exponential map from a rotation vector to a unit quaternion.
pub fn so3_exp(theta: &Vec3) -> Quat {
    let angle_sq = theta.norm_squared();
    let angle = angle_sq.sqrt();
    let (w, k) = if angle < SMALL_ANGLE {
        (1.0 - angle_sq / 8.0, 0.5 - angle_sq / 48.0)
    } else {
        let half = 0.5 * angle;
        (half.cos(), half.sin() / angle)
    };
    Quat::new_normalize(Quaternion::new(w, k * theta.x, k * theta.y, k * theta.z))
}

/// Logarithm map; the result has norm at most π.
pub fn so3_log(q: &Quat) -> Vec3 {
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let n_sq = v.norm_squared();
    let n = n_sq.sqrt();
    if n < SMALL_ANGLE {
        v * (2.0 / w) * (1.0 - n_sq / (3.0 * w * w))
    } else {
        v * (2.0 * n.atan2(w) / n)
    }
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

// Series switch for the SO(3) Jacobian coefficients; below it the closed forms
// lose digits to cancellation.
const JACOBIAN_SERIES_ANGLE: f64 = 1e-2;

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let t2 = phi.norm_squared();
    let t = t2.sqrt();
    let (a, b) = if t < JACOBIAN_SERIES_ANGLE {
        (
            0.5 - t2 / 24.0 + t2 * t2 / 720.0,
            1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0,
        )
    } else {
        ((1.0 - t.cos()) / t2, (t - t.sin()) / (t2 * t))
    };
    let s = skew(phi);
    Mat3::identity() - s * a + s * s * b
}

/// Inverse of [`right_jacobian`]: `Log(Exp(φ) Exp(δ)) ≈ φ + Jr⁻¹(φ) δ`.
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let t2 = phi.norm_squared();
    let t = t2.sqrt();
    let c = if t < JACOBIAN_SERIES_ANGLE {
        1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0
    } else {
        1.0 / t2 - (1.0 + t.cos()) / (2.0 * t * t.sin())
    };
    let s = skew(phi);
    Mat3::identity() + s * 0.5 + s * s * c
}

/// Perspective division `[x/z, y/z]`.
pub fn project(p_c: &Vec3) -> Result<Vec2, GeometryError> {
    if p_c.z <= DEPTH_EPSILON {
        return Err(GeometryError::BehindCamera { depth: p_c.z });
    }
    Ok(Vec2::new(p_c.x / p_c.z, p_c.y / p_c.z))
}

pub fn project_jacobian(p_c: &Vec3) -> Result<Mat2x3, GeometryError> {
    if p_c.z <= DEPTH_EPSILON {
        return Err(GeometryError::BehindCamera { depth: p_c.z });
    }
    let iz = 1.0 / p_c.z;
    let iz2 = iz * iz;
    Ok(Mat2x3::new(
        iz,
        0.0,
        -p_c.x * iz2,
        0.0,
        iz,
        -p_c.y * iz2,
    ))
}

/// Camera-to-body transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub r_bc: Quat,
    pub p_bc: Vec3,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self::forward_camera(0.0, Vec3::zeros())
    }
}

impl Extrinsics {
    pub fn new(r_bc: Quat, p_bc: Vec3) -> Self {
        Self {
            r_bc: Quat::new_normalize(r_bc.into_inner()),
            p_bc,
        }
    }

    /// Forward-looking camera on a forward-left-up body, tilted up by
    /// `uptilt` radians about the body y axis.
    pub fn forward_camera(uptilt: f64, p_bc: Vec3) -> Self {
        // Columns are the camera x (right), y (down) and z (forward) axes in body.
        let level = Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
        let tilt = nalgebra::Rotation3::from_axis_angle(&Vec3::y_axis(), -uptilt);
        let r = tilt.matrix() * level;
        let rot = nalgebra::Rotation3::from_matrix_unchecked(r);
        Self::new(Quat::from_rotation_matrix(&rot), p_bc)
    }
}

/// Expresses a world point in the camera frame:
/// `R_bcᵀ (R_wbᵀ (p_W − p_wb) − p_bc)`.
pub fn world_to_camera(p_w: &Vec3, p_wb: &Vec3, q_wb: &Quat, ext: &Extrinsics) -> Vec3 {
    ext.r_bc.inverse_transform_vector(&(q_wb.inverse_transform_vector(&(p_w - p_wb)) - ext.p_bc))
}

/// Inverse of [`world_to_camera`].
pub fn camera_to_world(p_c: &Vec3, p_wb: &Vec3, q_wb: &Quat, ext: &Extrinsics) -> Vec3 {
    q_wb.transform_vector(&(ext.r_bc.transform_vector(p_c) + ext.p_bc)) + p_wb
}

/// Pinhole intrinsics with 4-coefficient radial-tangential distortion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    #[serde(default)]
    pub k1: f64,
    #[serde(default)]
    pub k2: f64,
    #[serde(default)]
    pub p1: f64,
    #[serde(default)]
    pub p2: f64,
    pub width: u32,
    pub height: u32,
}

impl Default for CameraModel {
    /// 640×480 wide-angle racing camera with mild barrel distortion.
    fn default() -> Self {
        Self {
            fx: 300.0,
            fy: 300.0,
            cx: 320.0,
            cy: 240.0,
            k1: -0.03,
            k2: 0.004,
            p1: 2e-4,
            p2: -1e-4,
            width: 640,
            height: 480,
        }
    }
}

impl CameraModel {
    pub fn pinhole(fx: f64, fy: f64, cx: f64, cy: f64, width: u32, height: u32) -> Result<Self, GeometryError> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            k1: 0.0,
            k2: 0.0,
            p1: 0.0,
            p2: 0.0,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(GeometryError::InvalidCamera("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(GeometryError::InvalidCamera("cx must lie inside the image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(GeometryError::InvalidCamera("cy must lie inside the image"));
        }
        let coeffs = [self.k1, self.k2, self.p1, self.p2];
        if coeffs.iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidCamera("distortion coefficients must be finite"));
        }
        Ok(())
    }

    pub fn has_distortion(&self) -> bool {
        self.k1 != 0.0 || self.k2 != 0.0 || self.p1 != 0.0 || self.p2 != 0.0
    }

    /// Applies radial-tangential distortion to an ideal normalized point.
    pub fn distort(&self, xn: &Vec2) -> Vec2 {
        let (x, y) = (xn.x, xn.y);
        let r2 = x * x + y * y;
        let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
        Vec2::new(
            x * radial + 2.0 * self.p1 * x * y + self.p2 * (r2 + 2.0 * x * x),
            y * radial + self.p1 * (r2 + 2.0 * y * y) + 2.0 * self.p2 * x * y,
        )
    }

    pub fn normalized_to_pixel(&self, xn: &Vec2) -> Vec2 {
        let d = self.distort(xn);
        Vec2::new(self.fx * d.x + self.cx, self.fy * d.y + self.cy)
    }

    /// Projects a camera-frame point all the way to distorted pixels.
    pub fn project_to_pixel(&self, p_c: &Vec3) -> Result<Vec2, GeometryError> {
        Ok(self.normalized_to_pixel(&project(p_c)?))
    }

    /// Removes distortion from a pixel and returns ideal normalized coordinates.
    pub fn undistort_normalize(&self, u_px: &Vec2) -> Result<Vec2, GeometryError> {
        let xd = Vec2::new((u_px.x - self.cx) / self.fx, (u_px.y - self.cy) / self.fy);
        if !self.has_distortion() {
            return Ok(xd);
        }
        let mut x = xd;
        for _ in 0..UNDISTORT_ITERATIONS {
            let r2 = x.norm_squared();
            let radial = 1.0 + self.k1 * r2 + self.k2 * r2 * r2;
            let dx = 2.0 * self.p1 * x.x * x.y + self.p2 * (r2 + 2.0 * x.x * x.x);
            let dy = self.p1 * (r2 + 2.0 * x.y * x.y) + 2.0 * self.p2 * x.x * x.y;
            x = Vec2::new((xd.x - dx) / radial, (xd.y - dy) / radial);
        }
        let residual = (self.distort(&x) - xd).norm();
        if !(residual <= UNDISTORT_TOLERANCE) {
            return Err(GeometryError::NoConvergence { residual });
        }
        Ok(x)
    }

    pub fn in_image(&self, u_px: &Vec2) -> bool {
        u_px.x >= 0.0 && u_px.y >= 0.0 && u_px.x <= self.width as f64 && u_px.y <= self.height as f64
    }
}
