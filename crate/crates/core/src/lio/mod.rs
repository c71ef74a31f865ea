//! Tightly coupled LiDAR-inertial odometry: forward propagation on IMU
//! samples and an iterated Kalman measurement update against point-to-line
//! residuals in a world-frame feature map.

mod map;
mod propagate;
mod residual;
mod step;
mod undistort;
mod update;

pub use map::{FeatureMap, MapIndex};
pub use propagate::propagate;
pub use residual::{compute_residuals, fit_line, planar_pseudo_residuals, MapLine, ResidualTerm};
pub use step::{LioFilter, LioStepResult};
pub use undistort::undistort_scan;
pub use update::iekf_update;

use nalgebra::SMatrix;

use crate::geometry::{PoseSE3, ERROR_STATE_DIM};

/// 18x18 covariance over the error state.
pub type StateCovariance = SMatrix<f64, ERROR_STATE_DIM, ERROR_STATE_DIM>;

/// IMU stochastic model: white-noise and bias random-walk densities.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ImuNoiseParams {
    /// Gyro white noise density (rad/s/sqrt(Hz)).
    pub gyro_noise: f64,
    /// Accel white noise density (m/s^2/sqrt(Hz)).
    pub accel_noise: f64,
    /// Gyro bias random walk density.
    pub gyro_bias_walk: f64,
    /// Accel bias random walk density.
    pub accel_bias_walk: f64,
}

impl Default for ImuNoiseParams {
    fn default() -> Self {
        Self {
            gyro_noise: 0.005,
            accel_noise: 0.05,
            gyro_bias_walk: 1e-4,
            accel_bias_walk: 1e-3,
        }
    }
}

/// Iterated-update tuning.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct IekfConfig {
    pub max_iterations: usize,
    /// Stop when the tangent-norm of the step falls below this.
    pub convergence_eps: f64,
    /// Neighbors used for the local line fit.
    pub knn_k: usize,
    /// Reject associations whose nearest map point is farther than this (m).
    pub max_assoc_dist: f64,
    /// Neighbors farther than this from the query never join a line fit,
    /// which keeps fits on small structures (pillars) from absorbing
    /// points of a nearby wall. At least 3 must remain.
    pub neighborhood_radius: f64,
    /// Variance of the planar-motion pseudo-measurements.
    pub planar_constraint_noise: f64,
    /// Variance of a point-to-line measurement (m^2).
    pub measurement_noise: f64,
    /// Reject line fits whose second/first eigenvalue ratio exceeds this.
    pub line_quality_max: f64,
}

impl Default for IekfConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            convergence_eps: 1e-4,
            knn_k: 5,
            max_assoc_dist: 1.0,
            neighborhood_radius: 0.4,
            planar_constraint_noise: 1e-6,
            measurement_noise: 0.02 * 0.02,
            line_quality_max: 0.1,
        }
    }
}

/// LiDAR pose in the IMU frame.
#[derive(Debug, Clone, Copy)]
pub struct Extrinsics {
    pub lidar_in_imu: PoseSE3,
}

impl Default for Extrinsics {
    fn default() -> Self {
        Self {
            lidar_in_imu: PoseSE3::identity(),
        }
    }
}
