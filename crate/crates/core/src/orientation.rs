//! Hybrid attitude estimation from IMU streams: a Madgwick
//! gradient-descent filter for fast noise rejection, refined by an
//! error-state EKF on the rotation tangent space.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

use crate::geometry::{canonicalize_quaternion, so3_exp, so3_log};
use crate::{Error, Result};

/// One inertial sample. Magnetometer is optional; when present it is a
/// unit-normalized field direction in the body frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    /// Specific force (m/s^2, body frame).
    pub accel: Vector3<f64>,
    /// Angular rate (rad/s, body frame).
    pub gyro: Vector3<f64>,
    pub mag: Option<Vector3<f64>>,
}

/// Filtered attitude with its tangent-space covariance.
#[derive(Debug, Clone, Copy)]
pub struct OrientationEstimate {
    pub quaternion: UnitQuaternion<f64>,
    /// 3x3 covariance over the rotation tangent (rad^2).
    pub covariance: Matrix3<f64>,
    pub timestamp: f64,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct MadgwickConfig {
    /// Gradient-descent gain; trades gyro trust against accel/mag trust.
    pub beta: f64,
}

impl Default for MadgwickConfig {
    fn default() -> Self {
        Self { beta: 0.1 }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct OrientationEkfConfig {
    /// Gyro white-noise density (rad/s/sqrt(Hz)).
    pub gyro_noise_density: f64,
    /// Variance of the Madgwick orientation treated as a measurement (rad^2).
    pub measurement_noise: f64,
}

impl Default for OrientationEkfConfig {
    fn default() -> Self {
        Self {
            gyro_noise_density: 0.005,
            measurement_noise: 0.02 * 0.02,
        }
    }
}

/// Quaternion derivative from body rates: 0.5 * q * (0, w).
fn gyro_rate(q: &Quaternion<f64>, gyro: Vector3<f64>) -> Quaternion<f64> {
    q * Quaternion::from_parts(0.0, gyro) * 0.5
}

/// One Madgwick update. Quaternions are body-to-world, Hamilton, w >= 0.
///
/// The gradient step pulls the attitude toward the measured gravity
/// direction (and magnetic field when present); zero-norm accel degrades
/// to pure gyro integration.
pub fn madgwick_step(
    q_prev: &UnitQuaternion<f64>,
    sample: &ImuSample,
    dt: f64,
    cfg: &MadgwickConfig,
) -> UnitQuaternion<f64> {
    assert!(dt > 0.0, "madgwick_step requires dt > 0");
    let q = q_prev.into_inner();
    let mut q_dot = gyro_rate(&q, sample.gyro);

    let accel_norm = sample.accel.norm();
    if accel_norm > 1e-12 {
        let a = sample.accel / accel_norm;
        let (qw, qx, qy, qz) = (q.w, q.i, q.j, q.k);

        // Gravity objective: predicted body-frame up minus measured accel.
        let f_g = Vector3::new(
            2.0 * (qx * qz - qw * qy) - a.x,
            2.0 * (qw * qx + qy * qz) - a.y,
            2.0 * (0.5 - qx * qx - qy * qy) - a.z,
        );
        // grad = J_g^T f_g, expanded per component.
        let mut grad = [
            -2.0 * qy * f_g.x + 2.0 * qx * f_g.y,
            2.0 * qz * f_g.x + 2.0 * qw * f_g.y - 4.0 * qx * f_g.z,
            -2.0 * qw * f_g.x + 2.0 * qz * f_g.y - 4.0 * qy * f_g.z,
            2.0 * qx * f_g.x + 2.0 * qy * f_g.y,
        ];

        if let Some(mag) = sample.mag {
            if mag.norm() > 1e-12 {
                let m = mag.normalize();
                // Reference field from the current estimate, inclination kept.
                let h = q_prev.transform_vector(&m);
                let bx = (h.x * h.x + h.y * h.y).sqrt();
                let bz = h.z;
                let f_b = Vector3::new(
                    2.0 * bx * (0.5 - qy * qy - qz * qz) + 2.0 * bz * (qx * qz - qw * qy) - m.x,
                    2.0 * bx * (qx * qy - qw * qz) + 2.0 * bz * (qw * qx + qy * qz) - m.y,
                    2.0 * bx * (qw * qy + qx * qz) + 2.0 * bz * (0.5 - qx * qx - qy * qy) - m.z,
                );
                grad[0] += -2.0 * bz * qy * f_b.x
                    + (-2.0 * bx * qz + 2.0 * bz * qx) * f_b.y
                    + 2.0 * bx * qy * f_b.z;
                grad[1] += 2.0 * bz * qz * f_b.x
                    + (2.0 * bx * qy + 2.0 * bz * qw) * f_b.y
                    + (2.0 * bx * qz - 4.0 * bz * qx) * f_b.z;
                grad[2] += (-4.0 * bx * qy - 2.0 * bz * qw) * f_b.x
                    + (2.0 * bx * qx + 2.0 * bz * qz) * f_b.y
                    + (2.0 * bx * qw - 4.0 * bz * qy) * f_b.z;
                grad[3] += (-4.0 * bx * qz + 2.0 * bz * qx) * f_b.x
                    + (-2.0 * bx * qw + 2.0 * bz * qy) * f_b.y
                    + 2.0 * bx * qx * f_b.z;
            }
        }

        let gnorm =
            (grad[0] * grad[0] + grad[1] * grad[1] + grad[2] * grad[2] + grad[3] * grad[3]).sqrt();
        if gnorm > 1e-12 {
            q_dot -= Quaternion::new(grad[0], grad[1], grad[2], grad[3]) * (cfg.beta / gnorm);
        }
    }

    let q_new = q + q_dot * dt;
    canonicalize_quaternion(UnitQuaternion::from_quaternion(q_new))
}

/// Error-state EKF step on the rotation tangent: gyro prediction,
/// then a full-orientation measurement update using the Madgwick output.
pub fn ekf_refine(
    prev: &OrientationEstimate,
    madgwick_q: &UnitQuaternion<f64>,
    gyro: Vector3<f64>,
    dt: f64,
    cfg: &OrientationEkfConfig,
) -> OrientationEstimate {
    assert!(dt > 0.0, "ekf_refine requires dt > 0");
    // Predict. Right-multiplicative error transports by exp(-w dt).
    let delta = gyro * dt;
    let q_pred = prev.quaternion
        * UnitQuaternion::from_scaled_axis(delta);
    let f = so3_exp(-delta);
    let q_proc = cfg.gyro_noise_density * cfg.gyro_noise_density * dt;
    let p_pred = f * prev.covariance * f.transpose() + Matrix3::identity() * q_proc;

    // Update: innovation is the tangent difference prediction -> measurement.
    let innovation = so3_log(&(q_pred.inverse() * madgwick_q).to_rotation_matrix().into_inner());
    let s = p_pred + Matrix3::identity() * cfg.measurement_noise;
    let k = p_pred
        * s.try_inverse()
            .expect("innovation covariance is positive definite");
    let correction = k * innovation;
    let q_new = q_pred * UnitQuaternion::from_scaled_axis(correction);
    // Joseph form keeps the covariance symmetric PSD.
    let i_k = Matrix3::identity() - k;
    let p_new = i_k * p_pred * i_k.transpose()
        + k * (Matrix3::identity() * cfg.measurement_noise) * k.transpose();

    OrientationEstimate {
        quaternion: canonicalize_quaternion(q_new),
        covariance: 0.5 * (p_new + p_new.transpose()),
        timestamp: prev.timestamp + dt,
    }
}

/// Attitude seed from a gravity measurement: the shortest-arc rotation
/// aligning measured accel with world up (yaw left at zero).
pub fn quaternion_from_gravity(accel: Vector3<f64>) -> UnitQuaternion<f64> {
    if accel.norm() < 1e-12 {
        return UnitQuaternion::identity();
    }
    let a = accel.normalize();
    canonicalize_quaternion(
        UnitQuaternion::rotation_between(&a, &Vector3::z()).unwrap_or_else(|| {
            // Antiparallel (upside down): pick a half turn about x.
            UnitQuaternion::from_axis_angle(&Vector3::x_axis(), std::f64::consts::PI)
        }),
    )
}

/// Run Madgwick + EKF over a time-ordered sample stream.
///
/// The first sample seeds the attitude from gravity; each later sample
/// contributes one estimate. Out-of-order timestamps are an error.
pub fn run_orientation_pipeline(
    samples: &[ImuSample],
    madgwick_cfg: &MadgwickConfig,
    ekf_cfg: &OrientationEkfConfig,
) -> Result<Vec<OrientationEstimate>> {
    let mut out = Vec::with_capacity(samples.len());
    if samples.is_empty() {
        return Ok(out);
    }

    let q0 = quaternion_from_gravity(samples[0].accel);
    let mut madgwick_q = q0;
    let mut estimate = OrientationEstimate {
        quaternion: q0,
        covariance: Matrix3::identity() * 0.01,
        timestamp: samples[0].timestamp,
    };
    out.push(estimate);

    for (index, pair) in samples.windows(2).enumerate() {
        let dt = pair[1].timestamp - pair[0].timestamp;
        if dt <= 0.0 {
            return Err(Error::OutOfOrderTimestamp {
                index: index + 1,
                prev: pair[0].timestamp,
                next: pair[1].timestamp,
            });
        }
        madgwick_q = madgwick_step(&madgwick_q, &pair[1], dt, madgwick_cfg);
        estimate = ekf_refine(&estimate, &madgwick_q, pair[1].gyro, dt, ekf_cfg);
        estimate.timestamp = pair[1].timestamp;
        out.push(estimate);
    }
    Ok(out)
}
