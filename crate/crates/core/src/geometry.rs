//! Rigid-body poses, the se(3) tangent parameterization and the pinhole camera.
//!
//! Tangent vectors are ordered `(rho, phi)`: three translational components
//! followed by three rotational components. Poses map world points into the
//! camera frame, `X_c = R X + t`, and the solver updates them on the left,
//! `T <- exp(delta) * T`.

use nalgebra::{Matrix2x3, Matrix2x6, Matrix3, Matrix3x6, Rotation3, UnitQuaternion, Vector2, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Below this rotation angle exp/log use their Taylor expansions.
const SMALL_ANGLE: f64 = 1e-8;
/// The `(theta - sin theta) / theta^3` coefficient cancels badly well above
/// `SMALL_ANGLE`, so it switches to its series earlier.
const SERIES_ANGLE: f64 = 1e-2;

/// Default minimum camera-frame depth for a valid projection (meters).
pub const DEFAULT_Z_MIN: f64 = 1e-6;

#[inline]
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Element of se(3), `(rho, phi)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tangent(pub Vector6<f64>);

impl Tangent {
    pub fn new(translation: Vector3<f64>, rotation: Vector3<f64>) -> Self {
        Self(Vector6::new(
            translation.x,
            translation.y,
            translation.z,
            rotation.x,
            rotation.y,
            rotation.z,
        ))
    }

    pub fn zero() -> Self {
        Self(Vector6::zeros())
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(0).into_owned()
    }

    pub fn rotation(&self) -> Vector3<f64> {
        self.0.fixed_rows::<3>(3).into_owned()
    }

    pub fn norm(&self) -> f64 {
        self.0.norm()
    }
}

/// SE(3) transform `X -> R X + t`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Builds a pose and checks orthonormality and handedness of `rotation`.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self
            .rotation
            .iter()
            .chain(self.translation.iter())
            .all(|v| v.is_finite())
        {
            return Err(Error::InvalidArgument("pose has non-finite entries".into()));
        }
        let ortho = (self.rotation.transpose() * self.rotation - Matrix3::identity()).norm();
        let det = self.rotation.determinant();
        if ortho > 1e-10 || (det - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidArgument(format!(
                "rotation not in SO(3): |R^T R - I| = {ortho:e}, det = {det}"
            )));
        }
        Ok(())
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self * other`, applying `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    /// Re-orthonormalizes the rotation through its quaternion.
    pub fn renormalized(&self) -> Self {
        Self {
            rotation: self.quaternion().to_rotation_matrix().into_inner(),
            translation: self.translation,
        }
    }

    /// `exp(delta) * self`.
    pub fn retract_left(&self, delta: &Tangent) -> Self {
        exp(delta).compose(self).renormalized()
    }
}

fn so3_exp(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta2 / 6.0, 0.5 - theta2 / 24.0)
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / half;
        (theta.sin() / theta, 0.5 * s * s)
    };
    Matrix3::identity() + a * k + b * k * k
}

/// Left Jacobian of SO(3), `V(phi)`, mapping `rho` to the translation of `exp`.
pub fn so3_left_jacobian(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let b = if theta < SMALL_ANGLE {
        0.5 - theta2 / 24.0
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / half;
        0.5 * s * s
    };
    let c = if theta < SERIES_ANGLE {
        1.0 / 6.0 - theta2 / 120.0 + theta2 * theta2 / 5040.0
    } else {
        (theta - theta.sin()) / (theta2 * theta)
    };
    Matrix3::identity() + b * k + c * k * k
}

fn so3_left_jacobian_inverse(phi: &Vector3<f64>) -> Matrix3<f64> {
    let theta2 = phi.norm_squared();
    let theta = theta2.sqrt();
    let k = skew(phi);
    let c = if theta < SERIES_ANGLE {
        1.0 / 12.0 + theta2 / 720.0 + theta2 * theta2 / 30240.0
    } else {
        let half = 0.5 * theta;
        (1.0 - half * half.cos() / half.sin()) / theta2
    };
    Matrix3::identity() - 0.5 * k + c * k * k
}

/// Rotation vector of `r`, computed through the quaternion so the angle stays
/// well conditioned all the way to pi. At exactly pi the axis sign is the one
/// with non-negative quaternion scalar part, which is ambiguous by nature.
fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (w, v) = if q.w < 0.0 { (-q.w, -q.imag()) } else { (q.w, q.imag()) };
    let vn = v.norm();
    if vn < SMALL_ANGLE {
        // theta ~ 2 vn / w
        v * (2.0 / w) * (1.0 - vn * vn / (3.0 * w * w))
    } else {
        let theta = 2.0 * vn.atan2(w);
        v * (theta / vn)
    }
}

pub fn exp(xi: &Tangent) -> Pose {
    let rho = xi.translation();
    let phi = xi.rotation();
    Pose {
        rotation: so3_exp(&phi),
        translation: so3_left_jacobian(&phi) * rho,
    }
}

/// Checked variant of [`exp`] rejecting non-finite input.
pub fn try_exp(xi: &Tangent) -> Result<Pose> {
    if !xi.0.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite tangent".into()));
    }
    Ok(exp(xi))
}

pub fn log(p: &Pose) -> Tangent {
    let phi = so3_log(&p.rotation);
    let rho = so3_left_jacobian_inverse(&phi) * p.translation;
    Tangent::new(rho, phi)
}

/// Pinhole intrinsics plus the RGB-D virtual baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub baseline: f64,
    #[serde(default = "default_z_min")]
    pub z_min: f64,
}

fn default_z_min() -> f64 {
    DEFAULT_Z_MIN
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, baseline: f64) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            baseline,
            z_min: DEFAULT_Z_MIN,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy, self.baseline, self.z_min]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 || self.baseline <= 0.0 || self.z_min <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "intrinsics need positive finite fx, fy, baseline, z_min: {self:?}"
            )));
        }
        Ok(())
    }

    /// `fx * b`, the disparity numerator.
    pub fn fx_baseline(&self) -> f64 {
        self.fx * self.baseline
    }

    pub fn project(&self, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
        self.check_depth(xc.z)?;
        Ok(Vector2::new(
            self.fx * xc.x / xc.z + self.cx,
            self.fy * xc.y / xc.z + self.cy,
        ))
    }

    pub fn back_project(&self, uv: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
        if !(depth > self.z_min) || !depth.is_finite() {
            return Err(Error::InvalidDepth(depth));
        }
        Ok(Vector3::new(
            (uv.x - self.cx) * depth / self.fx,
            (uv.y - self.cy) * depth / self.fy,
            depth,
        ))
    }

    pub(crate) fn check_depth(&self, z: f64) -> Result<()> {
        if z > self.z_min {
            Ok(())
        } else {
            Err(Error::BehindCamera { z, z_min: self.z_min })
        }
    }

    /// Derivative of the projection with respect to the camera-frame point.
    pub fn projection_jacobian(&self, xc: &Vector3<f64>) -> Result<Matrix2x3<f64>> {
        self.check_depth(xc.z)?;
        let iz = 1.0 / xc.z;
        let iz2 = iz * iz;
        Ok(Matrix2x3::new(
            self.fx * iz,
            0.0,
            -self.fx * xc.x * iz2,
            0.0,
            self.fy * iz,
            -self.fy * xc.y * iz2,
        ))
    }
}

pub fn transform(p: &Pose, x: &Vector3<f64>) -> Vector3<f64> {
    p.transform(x)
}

pub fn project(k: &CameraIntrinsics, xc: &Vector3<f64>) -> Result<Vector2<f64>> {
    k.project(xc)
}

pub fn back_project(k: &CameraIntrinsics, uv: &Vector2<f64>, depth: f64) -> Result<Vector3<f64>> {
    k.back_project(uv, depth)
}

/// Derivative of the camera-frame point `T X` under a left perturbation of
/// `T`: `[I | -[X_c]x]`.
pub fn camera_point_pose_jacobian(xc: &Vector3<f64>) -> Matrix3x6<f64> {
    let mut j = Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&Matrix3::identity());
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-skew(xc)));
    j
}

/// Jacobians of `project(T X)` with respect to the left pose perturbation
/// (2x6) and the world point (2x3).
pub fn jacobian_project_pose_point(
    p: &Pose,
    x: &Vector3<f64>,
    k: &CameraIntrinsics,
) -> Result<(Matrix2x6<f64>, Matrix2x3<f64>)> {
    let xc = p.transform(x);
    let jp = k.projection_jacobian(&xc)?;
    Ok((jp * camera_point_pose_jacobian(&xc), jp * p.rotation))
}
