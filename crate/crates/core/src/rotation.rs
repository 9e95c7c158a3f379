//! Rotation helpers shared by the body model and the skeletal chain.

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};

/// Below this angle Rodrigues' formula switches to its Taylor expansion.
pub const SMALL_ANGLE: f64 = 1e-8;

/// Axis-angle vector to rotation matrix.
///
/// Uses the second-order series `I + [w]x + [w]x^2 / 2` when the angle is tiny so
/// that the zero pose maps to the identity exactly.
pub fn rodrigues(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = w.cross_matrix();
    if theta < SMALL_ANGLE {
        return Matrix3::identity() + k + k * k * 0.5;
    }
    let (s, c) = theta.sin_cos();
    Matrix3::identity() + k * (s / theta) + k * k * ((1.0 - c) / (theta * theta))
}

/// Rotation of `angle` radians about a unit `axis`.
pub fn axis_rotation(axis: &Unit<Vector3<f64>>, angle: f64) -> Matrix3<f64> {
    Rotation3::from_axis_angle(axis, angle).into_inner()
}

/// Intrinsic rotation sequence: rotate about `axes[0]`, then the moved `axes[1]`, then `axes[2]`.
pub fn intrinsic_sequence(axes: &[Unit<Vector3<f64>>; 3], angles: [f64; 3]) -> Matrix3<f64> {
    axis_rotation(&axes[0], angles[0]) * axis_rotation(&axes[1], angles[1]) * axis_rotation(&axes[2], angles[2])
}

/// The canonical Z-X-Y axes used by free and ball joints.
pub fn zxy_axes() -> [Unit<Vector3<f64>>; 3] {
    [Vector3::z_axis(), Vector3::x_axis(), Vector3::y_axis()]
}

/// Decomposes `r = Rz(a) * Rx(b) * Ry(c)` into `[a, b, c]`.
///
/// `b` is returned in `[-pi/2, pi/2]`; at gimbal lock `c` is set to zero.
pub fn euler_zxy_from_matrix(r: &Matrix3<f64>) -> [f64; 3] {
    // r[(2,1)] = sin(b); r[(0,1)] = -sin(a)cos(b); r[(1,1)] = cos(a)cos(b)
    // r[(2,0)] = -cos(b)sin(c); r[(2,2)] = cos(b)cos(c)
    let sb = r[(2, 1)].clamp(-1.0, 1.0);
    let b = sb.asin();
    if sb.abs() < 1.0 - 1e-12 {
        let a = (-r[(0, 1)]).atan2(r[(1, 1)]);
        let c = (-r[(2, 0)]).atan2(r[(2, 2)]);
        [a, b, c]
    } else {
        let a = r[(1, 0)].atan2(r[(0, 0)]);
        [a, b, 0.0]
    }
}

/// A rotation followed by a translation, `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// `self * other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform { rotation: rt, translation: -(rt * self.translation) }
    }
}

/// Checks that `r` is a proper rotation within `tol`.
pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    let orth = (r.transpose() * r - Matrix3::identity()).abs().max();
    orth <= tol && (r.determinant() - 1.0).abs() <= tol
}
