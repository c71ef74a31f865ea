//! IMU-centric navigation state and its 18-dim tangent-space operators.

use nalgebra::{Matrix3, SVector, Vector3};

use super::so3::{so3_exp, so3_log};

/// Tangent dimension of [`NavState`]: (dp, dv, dtheta, dbw, dba, dg).
pub const ERROR_STATE_DIM: usize = 18;

/// 18-dim error/tangent vector ordered (dp, dv, dtheta, db_gyro, db_accel, dg).
///
/// Every Jacobian in the filter indexes this block order.
pub type ErrorState = SVector<f64, ERROR_STATE_DIM>;

/// Full navigation state: position, velocity, attitude, IMU biases, gravity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NavState {
    /// Position (m, world frame).
    pub position: Vector3<f64>,
    /// Velocity (m/s, world frame).
    pub velocity: Vector3<f64>,
    /// Attitude, body to world.
    pub rotation: Matrix3<f64>,
    /// Gyroscope bias (rad/s).
    pub gyro_bias: Vector3<f64>,
    /// Accelerometer bias (m/s^2).
    pub accel_bias: Vector3<f64>,
    /// Gravity vector (m/s^2, world frame).
    pub gravity: Vector3<f64>,
}

impl NavState {
    /// At-rest state with gravity pointing down the world z axis.
    pub fn stationary() -> Self {
        NavState {
            position: Vector3::zeros(),
            velocity: Vector3::zeros(),
            rotation: Matrix3::identity(),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }
}

/// Manifold-aware addition: vector blocks added, rotation composed on the
/// right as `R * exp(dtheta)`.
pub fn boxplus(state: &NavState, delta: &ErrorState) -> NavState {
    NavState {
        position: state.position + delta.fixed_rows::<3>(0).into_owned(),
        velocity: state.velocity + delta.fixed_rows::<3>(3).into_owned(),
        rotation: state.rotation * so3_exp(delta.fixed_rows::<3>(6).into_owned()),
        gyro_bias: state.gyro_bias + delta.fixed_rows::<3>(9).into_owned(),
        accel_bias: state.accel_bias + delta.fixed_rows::<3>(12).into_owned(),
        gravity: state.gravity + delta.fixed_rows::<3>(15).into_owned(),
    }
}

/// Manifold-aware difference `a [-] b`; inverse of [`boxplus`] in its first
/// argument. Rotation block is `log(b.R^T * a.R)`.
pub fn boxminus(a: &NavState, b: &NavState) -> ErrorState {
    let mut out = ErrorState::zeros();
    out.fixed_rows_mut::<3>(0).copy_from(&(a.position - b.position));
    out.fixed_rows_mut::<3>(3).copy_from(&(a.velocity - b.velocity));
    out.fixed_rows_mut::<3>(6)
        .copy_from(&so3_log(&(b.rotation.transpose() * a.rotation)));
    out.fixed_rows_mut::<3>(9).copy_from(&(a.gyro_bias - b.gyro_bias));
    out.fixed_rows_mut::<3>(12)
        .copy_from(&(a.accel_bias - b.accel_bias));
    out.fixed_rows_mut::<3>(15).copy_from(&(a.gravity - b.gravity));
    out
}
