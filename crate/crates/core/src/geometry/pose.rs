//! Planar and spatial rigid poses.

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::so3::so3_log;

/// Wrap an angle to (-pi, pi].
pub(crate) fn wrap_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut a = theta % two_pi;
    if a <= -std::f64::consts::PI {
        a += two_pi;
    } else if a > std::f64::consts::PI {
        a -= two_pi;
    }
    a
}

/// Planar pose (x, y, theta) with theta normalized to (-pi, pi].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PoseSE2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PoseSE2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn identity() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    /// Compose: self * other (apply other in self's frame).
    pub fn compose(&self, other: &PoseSE2) -> PoseSE2 {
        let (s, c) = self.theta.sin_cos();
        PoseSE2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> PoseSE2 {
        let (s, c) = self.theta.sin_cos();
        PoseSE2::new(
            -(c * self.x + s * self.y),
            -(-s * self.x + c * self.y),
            -self.theta,
        )
    }

    /// Relative pose taking self to other: self^-1 * other.
    pub fn between(&self, other: &PoseSE2) -> PoseSE2 {
        self.inverse().compose(other)
    }

    /// Apply the pose to a point in the local frame.
    pub fn transform(&self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            self.x + c * p.0 - s * p.1,
            self.y + s * p.0 + c * p.1,
        )
    }

    /// Geodesic interpolation from self toward other, t in [0, 1].
    pub fn interpolate(&self, other: &PoseSE2, t: f64) -> PoseSE2 {
        let dtheta = wrap_angle(other.theta - self.theta);
        PoseSE2::new(
            self.x + t * (other.x - self.x),
            self.y + t * (other.y - self.y),
            self.theta + t * dtheta,
        )
    }
}

/// Spatial rigid pose: rotation (body to parent) plus translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PoseSE3 {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn identity() -> Self {
        Self::new(Matrix3::identity(), Vector3::zeros())
    }

    pub fn from_se2(pose: &PoseSE2) -> Self {
        let (s, c) = pose.theta.sin_cos();
        let rotation = Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0);
        Self::new(rotation, Vector3::new(pose.x, pose.y, 0.0))
    }

    /// Project onto the plane: (x, y) plus the yaw extracted from the rotation.
    pub fn to_se2(&self) -> PoseSE2 {
        let yaw = self.rotation[(1, 0)].atan2(self.rotation[(0, 0)]);
        PoseSE2::new(self.translation.x, self.translation.y, yaw)
    }

    pub fn compose(&self, other: &PoseSE3) -> PoseSE3 {
        PoseSE3::new(
            self.rotation * other.rotation,
            self.rotation * other.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> PoseSE3 {
        let rt = self.rotation.transpose();
        PoseSE3::new(rt, -(rt * self.translation))
    }

    pub fn quaternion(&self) -> UnitQuaternion<f64> {
        super::so3::canonicalize_quaternion(UnitQuaternion::from_matrix(&self.rotation))
    }

    /// Rotation part as an axis-angle vector.
    pub fn rotation_log(&self) -> Vector3<f64> {
        so3_log(&self.rotation)
    }
}

/// R * p + t.
pub fn transform_point(pose: &PoseSE3, p: Vector3<f64>) -> Vector3<f64> {
    pose.rotation * p + pose.translation
}
