//! IMU forward propagation of the state and its covariance.

use nalgebra::Matrix3;

use super::{ImuNoiseParams, StateCovariance};
use crate::geometry::{skew, so3_exp, NavState};
use crate::orientation::ImuSample;

fn set_block(cov: &mut StateCovariance, row: usize, col: usize, m: &Matrix3<f64>) {
    cov.fixed_view_mut::<3, 3>(row, col).copy_from(m);
}

/// One discrete propagation step over dt.
///
/// Kinematics: p += v dt, v += (R (a_m - b_a) + g) dt, R <- R exp((w_m - b_w) dt);
/// biases and gravity are constant. The covariance follows the first-order
/// transition of the 18-dim error state; process noise grows as
/// density^2 * dt per axis on the velocity, attitude, and bias blocks.
pub fn propagate(
    state: &NavState,
    cov: &StateCovariance,
    sample: &ImuSample,
    dt: f64,
    noise: &ImuNoiseParams,
) -> (NavState, StateCovariance) {
    assert!(dt > 0.0, "propagate requires dt > 0");
    let accel_body = sample.accel - state.accel_bias;
    let omega = (sample.gyro - state.gyro_bias) * dt;
    let accel_world = state.rotation * accel_body + state.gravity;

    let next = NavState {
        position: state.position + state.velocity * dt,
        velocity: state.velocity + accel_world * dt,
        rotation: state.rotation * so3_exp(omega),
        gyro_bias: state.gyro_bias,
        accel_bias: state.accel_bias,
        gravity: state.gravity,
    };

    // Error-state transition, blocks ordered (dp, dv, dtheta, dbw, dba, dg).
    let mut f = StateCovariance::identity();
    let i_dt = Matrix3::identity() * dt;
    set_block(&mut f, 0, 3, &i_dt);
    set_block(&mut f, 3, 6, &(-(state.rotation * skew(&accel_body)) * dt));
    set_block(&mut f, 3, 12, &(-state.rotation * dt));
    set_block(&mut f, 3, 15, &i_dt);
    set_block(&mut f, 6, 6, &so3_exp(-omega));
    set_block(&mut f, 6, 9, &(-i_dt));

    let mut next_cov = f * cov * f.transpose();
    let q_gyro = noise.gyro_noise * noise.gyro_noise * dt;
    let q_accel = noise.accel_noise * noise.accel_noise * dt;
    let q_bw = noise.gyro_bias_walk * noise.gyro_bias_walk * dt;
    let q_ba = noise.accel_bias_walk * noise.accel_bias_walk * dt;
    for i in 0..3 {
        next_cov[(3 + i, 3 + i)] += q_accel;
        next_cov[(6 + i, 6 + i)] += q_gyro;
        next_cov[(9 + i, 9 + i)] += q_bw;
        next_cov[(12 + i, 12 + i)] += q_ba;
    }
    next_cov = 0.5 * (next_cov + next_cov.transpose());

    (next, next_cov)
}
