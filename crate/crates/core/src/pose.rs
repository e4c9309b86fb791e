//! Rigid object pose and SO(3) helpers.
//!
//! A pose maps object-frame points into the world frame, which by convention
//! is the frame of the first camera. Rotations are stored as plain 3x3
//! matrices; the small-angle helpers below keep them orthonormal without a
//! separate quaternion type.

use nalgebra::{Matrix3, Rotation3, Vector3};
use rand::Rng;

use crate::rng::normal_pair;

/// Rigid transform from object frame to world frame. Translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self { rotation, translation }
    }

    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vector3::zeros() }
    }

    /// Applies the pose to an object-frame point.
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// True when the rotation block is orthonormal with determinant +1.
    pub fn has_valid_rotation(&self, tol: f64) -> bool {
        is_rotation(&self.rotation, tol) && self.translation.iter().all(|v| v.is_finite())
    }
}

/// True when `m` is orthonormal with determinant +1 within `tol`.
pub fn is_rotation(m: &Matrix3<f64>, tol: f64) -> bool {
    let gram = m.transpose() * m;
    (gram - Matrix3::identity()).norm() <= tol && (m.determinant() - 1.0).abs() <= tol
}

/// Exponential map: rotation by angle `|w|` about axis `w / |w|`.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_scaled_axis(*w).into_inner()
}

/// Rotation by `angle` radians about `axis` (normalized internally).
pub fn rotation_about(axis: &Vector3<f64>, angle: f64) -> Matrix3<f64> {
    let n = axis.norm();
    assert!(n > 0.0, "rotation axis must be nonzero");
    so3_exp(&(axis * (angle / n)))
}

/// Rotation angle of `r` in [0, pi].
///
/// Uses atan2 of the skew part against the trace, which stays accurate for
/// angles near zero where the plain acos formula loses half the mantissa.
pub fn rotation_angle(r: &Matrix3<f64>) -> f64 {
    let skew = Vector3::new(
        0.5 * (r[(2, 1)] - r[(1, 2)]),
        0.5 * (r[(0, 2)] - r[(2, 0)]),
        0.5 * (r[(1, 0)] - r[(0, 1)]),
    );
    let sin = skew.norm();
    let cos = 0.5 * (r.trace() - 1.0);
    sin.atan2(cos).abs()
}

/// Geodesic distance between two rotations, in radians.
pub fn geodesic_angle(a: &Matrix3<f64>, b: &Matrix3<f64>) -> f64 {
    rotation_angle(&(a.transpose() * b))
}

/// Uniform random rotation (normalized Gaussian quaternion).
pub fn random_rotation<R: Rng>(rng: &mut R) -> Matrix3<f64> {
    loop {
        let (a, b) = normal_pair(rng);
        let (c, d) = normal_pair(rng);
        let n = (a * a + b * b + c * c + d * d).sqrt();
        if n < 1e-6 {
            continue;
        }
        let (w, x, y, z) = (a / n, b / n, c / n, d / n);
        return Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        );
    }
}
