//! Rigid transforms on SE(3).
//!
//! Tangent vectors are ordered `[rho, theta]`: translational part first, then
//! the rotation vector. Perturbations are applied on the right,
//! `T ⊕ δ = T · exp(δ)`, which is the local parameterization the optimizer uses.

use nalgebra::{Matrix3, Matrix6, Rotation3, UnitQuaternion, Vector3, Vector6};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::GeometryError;

const SMALL_ANGLE: f64 = 1e-5;
const ORTHO_TOL: f64 = 1e-9;

/// Skew-symmetric matrix such that `hat(a) * b == a.cross(&b)`.
pub fn hat(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rotation about the z axis.
pub fn rot_z(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Exponential map of SO(3) (Rodrigues).
pub fn so3_exp(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let k = hat(theta);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() + k + 0.5 * k * k;
    }
    let a = angle.sin() / angle;
    let b = (1.0 - angle.cos()) / (angle * angle);
    Matrix3::identity() + a * k + b * k * k
}

/// Logarithm of SO(3), returning a rotation vector with norm in `[0, π]`.
pub fn so3_log(r: &Matrix3<f64>) -> Vector3<f64> {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*r));
    let (mut w, mut v) = (q.w, q.imag());
    if w < 0.0 {
        w = -w;
        v = -v;
    }
    let s = v.norm();
    if s < 1e-12 {
        // first-order: theta ≈ 2 v / w
        return v * (2.0 / w);
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

/// Right Jacobian of SO(3).
pub fn so3_right_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let k = hat(theta);
    if angle < SMALL_ANGLE {
        return Matrix3::identity() - 0.5 * k + k * k / 6.0;
    }
    let a2 = angle * angle;
    Matrix3::identity() - (1.0 - angle.cos()) / a2 * k + (angle - angle.sin()) / (a2 * angle) * k * k
}

/// Inverse of the right Jacobian of SO(3).
pub fn so3_right_jacobian_inv(theta: &Vector3<f64>) -> Matrix3<f64> {
    let angle = theta.norm();
    let k = hat(theta);
    let c = if angle < SMALL_ANGLE {
        1.0 / 12.0 + angle * angle / 720.0
    } else {
        1.0 / (angle * angle) - (0.5 * angle).cos() / (0.5 * angle).sin() / (2.0 * angle)
    };
    Matrix3::identity() + 0.5 * k + c * k * k
}

/// Left Jacobian of SO(3) (the `V` matrix of the SE(3) exponential).
fn so3_left_jacobian(theta: &Vector3<f64>) -> Matrix3<f64> {
    so3_right_jacobian(&-theta)
}

/// Coupling block of the SE(3) left Jacobian.
fn se3_q(rho: &Vector3<f64>, phi: &Vector3<f64>) -> Matrix3<f64> {
    let a = phi.norm();
    let p = hat(phi);
    let r = hat(rho);
    let (c1, c2, c3) = if a < 1e-2 {
        let a2 = a * a;
        (
            1.0 / 6.0 - a2 / 120.0 + a2 * a2 / 5040.0,
            1.0 / 24.0 - a2 / 720.0 + a2 * a2 / 40320.0,
            1.0 / 120.0 - a2 / 2520.0,
        )
    } else {
        let (s, c) = a.sin_cos();
        let a2 = a * a;
        (
            (a - s) / (a2 * a),
            (a2 + 2.0 * c - 2.0) / (2.0 * a2 * a2),
            (2.0 * a - 3.0 * s + a * c) / (2.0 * a2 * a2 * a),
        )
    };
    let pr = p * r;
    let rp = r * p;
    let prp = pr * p;
    let pp = p * p;
    0.5 * r + c1 * (pr + rp + prp) + c2 * (pp * r + rp * p - 3.0 * prp) + c3 * (prp * p + pp * r * p)
}

/// Right Jacobian of SE(3) for the `[rho, theta]` ordering.
pub fn se3_right_jacobian(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho: Vector3<f64> = xi.fixed_rows::<3>(0).into();
    let phi: Vector3<f64> = xi.fixed_rows::<3>(3).into();
    let jr = so3_right_jacobian(&phi);
    let q = se3_q(&-rho, &-phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jr);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&q);
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr);
    out
}

/// Inverse right Jacobian of SE(3): `log(exp(ξ)·exp(δ)) ≈ ξ + J⁻¹ δ`.
pub fn se3_right_jacobian_inv(xi: &Vector6<f64>) -> Matrix6<f64> {
    let rho: Vector3<f64> = xi.fixed_rows::<3>(0).into();
    let phi: Vector3<f64> = xi.fixed_rows::<3>(3).into();
    let jinv = so3_right_jacobian_inv(&phi);
    let q = se3_q(&-rho, &-phi);
    let mut out = Matrix6::zeros();
    out.fixed_view_mut::<3, 3>(0, 0).copy_from(&jinv);
    out.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-jinv * q * jinv));
    out.fixed_view_mut::<3, 3>(3, 3).copy_from(&jinv);
    out
}

/// A rigid transform `X ↦ R·X + t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
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

    /// Builds a pose, rejecting rotations that are not proper orthonormal within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let ortho = (rotation.transpose() * rotation - Matrix3::identity()).amax();
        let det = rotation.determinant();
        if !ortho.is_finite() || ortho > ORTHO_TOL || (det - 1.0).abs() > ORTHO_TOL {
            return Err(GeometryError::InvalidRotation {
                ortho_error: ortho,
                det,
            });
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(GeometryError::NonFinite("translation"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    pub fn from_quaternion(q: &UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation,
        }
    }

    /// Rotation about z by `yaw` followed by a translation.
    pub fn from_yaw(yaw: f64, translation: Vector3<f64>) -> Self {
        Self {
            rotation: rot_z(yaw),
            translation,
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(self.rotation))
    }

    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        Self {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Relative transform `self⁻¹ ∘ other`.
    pub fn between(&self, other: &Pose) -> Self {
        self.inverse().compose(other)
    }

    pub fn exp(xi: &Vector6<f64>) -> Self {
        let rho: Vector3<f64> = xi.fixed_rows::<3>(0).into();
        let phi: Vector3<f64> = xi.fixed_rows::<3>(3).into();
        Self {
            rotation: so3_exp(&phi),
            translation: so3_left_jacobian(&phi) * rho,
        }
    }

    pub fn log(&self) -> Vector6<f64> {
        let phi = so3_log(&self.rotation);
        let angle = phi.norm();
        let k = hat(&phi);
        let c = if angle < SMALL_ANGLE {
            1.0 / 12.0 + angle * angle / 720.0
        } else {
            1.0 / (angle * angle) - (0.5 * angle).cos() / (0.5 * angle).sin() / (2.0 * angle)
        };
        let v_inv = Matrix3::identity() - 0.5 * k + c * k * k;
        let rho = v_inv * self.translation;
        Vector6::new(rho.x, rho.y, rho.z, phi.x, phi.y, phi.z)
    }

    /// Right perturbation `self · exp(delta)`.
    pub fn retract(&self, delta: &Vector6<f64>) -> Self {
        self.compose(&Pose::exp(delta)).renormalized()
    }

    /// Adjoint `Ad_T` with `T · exp(δ) = exp(Ad_T δ) · T`.
    pub fn adjoint(&self) -> Matrix6<f64> {
        let mut out = Matrix6::zeros();
        out.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        out.fixed_view_mut::<3, 3>(0, 3)
            .copy_from(&(hat(&self.translation) * self.rotation));
        out.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.rotation);
        out
    }

    /// Projects the rotation back onto SO(3) to stop round-off drift.
    pub fn renormalized(&self) -> Self {
        let q = UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(self.rotation));
        Self {
            rotation: q.to_rotation_matrix().into_inner(),
            translation: self.translation,
        }
    }
}

/// `pose · point`.
pub fn apply_pose(pose: &Pose, point: &Vector3<f64>) -> Vector3<f64> {
    pose.apply(point)
}

/// Serialized as translation plus unit quaternion `[qx, qy, qz, qw]`.
#[derive(Serialize, Deserialize)]
struct PoseRepr {
    translation: [f64; 3],
    quaternion: [f64; 4],
}

impl Serialize for Pose {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let q = self.quaternion();
        let q = if q.w < 0.0 { -q.into_inner() } else { q.into_inner() };
        PoseRepr {
            translation: [self.translation.x, self.translation.y, self.translation.z],
            quaternion: [q.i, q.j, q.k, q.w],
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Pose {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let r = PoseRepr::deserialize(deserializer)?;
        let [x, y, z, w] = r.quaternion;
        let q = nalgebra::Quaternion::new(w, x, y, z);
        if !(q.norm() > 1e-12) {
            return Err(serde::de::Error::custom("quaternion has zero norm"));
        }
        Ok(Pose::from_quaternion(
            &UnitQuaternion::from_quaternion(q),
            Vector3::from(r.translation),
        ))
    }
}
