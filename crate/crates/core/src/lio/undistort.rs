//! Motion compensation: per-beam poses reconstructed across the sweep by
//! backward IMU integration from the scan-end state.

use nalgebra::{Matrix3, Vector3};

use super::Extrinsics;
use crate::geometry::{so3_exp, so3_log, NavState};
use crate::orientation::ImuSample;
use crate::preprocess::{scan_to_cloud, LaserScan, PointCloud2};

#[derive(Debug, Clone, Copy)]
struct PoseEntry {
    t: f64,
    rotation: Matrix3<f64>,
    position: Vector3<f64>,
}

/// Transform every beam from its own mid-sweep pose into the scan-end
/// LiDAR frame. Beam i fires at `scan.timestamp + i * sweep / beams`.
///
/// Returns the corrected cloud and a flag that is true when no IMU data
/// covered the sweep and the scan passed through uncorrected.
pub fn undistort_scan(
    scan: &LaserScan,
    imu_window: &[ImuSample],
    state_at_scan_end: &NavState,
    ext: &Extrinsics,
    sweep_duration: f64,
) -> (PointCloud2, bool) {
    let raw = scan_to_cloud(scan);
    if sweep_duration <= 0.0 {
        return (raw, false);
    }
    let t_start = scan.timestamp;
    let t_end = scan.timestamp + sweep_duration;

    // Backward-integrate poses from the end state through the window.
    let mut table = vec![PoseEntry {
        t: t_end,
        rotation: state_at_scan_end.rotation,
        position: state_at_scan_end.position,
    }];
    let mut velocity = state_at_scan_end.velocity;
    let mut covered = false;
    for s in imu_window.iter().rev() {
        if s.timestamp >= t_end {
            continue;
        }
        let last = *table.last().unwrap();
        if s.timestamp < t_start - 0.5 {
            break;
        }
        covered = true;
        let dt = last.t - s.timestamp;
        let omega = (s.gyro - state_at_scan_end.gyro_bias) * dt;
        let rotation = last.rotation * so3_exp(-omega);
        let accel = rotation * (s.accel - state_at_scan_end.accel_bias) + state_at_scan_end.gravity;
        velocity -= accel * dt;
        let position = last.position - velocity * dt;
        table.push(PoseEntry {
            t: s.timestamp,
            rotation,
            position,
        });
        if s.timestamp <= t_start {
            break;
        }
    }
    if !covered {
        return (raw, true);
    }
    table.reverse();

    let pose_at = |t: f64| -> (Matrix3<f64>, Vector3<f64>) {
        if t <= table[0].t {
            return (table[0].rotation, table[0].position);
        }
        if t >= table[table.len() - 1].t {
            let last = table[table.len() - 1];
            return (last.rotation, last.position);
        }
        let hi = table.partition_point(|e| e.t < t).max(1);
        let a = table[hi - 1];
        let b = table[hi];
        let alpha = (t - a.t) / (b.t - a.t);
        let delta = so3_log(&(a.rotation.transpose() * b.rotation));
        let rotation = a.rotation * so3_exp(delta * alpha);
        let position = a.position + (b.position - a.position) * alpha;
        (rotation, position)
    };

    let end_rot_t = state_at_scan_end.rotation.transpose();
    let lid = &ext.lidar_in_imu;
    let lid_inv = lid.inverse();
    let beam_dt = sweep_duration / scan.ranges.len() as f64;

    let mut points = Vec::with_capacity(raw.points.len());
    for (i, r) in scan.ranges.iter().enumerate() {
        if !r.is_finite() || *r < scan.range_min || *r > scan.range_max {
            continue;
        }
        let theta = scan.angle_min + i as f64 * scan.angle_increment;
        let p_lidar = Vector3::new(r * theta.cos(), r * theta.sin(), 0.0);
        let (rot_b, pos_b) = pose_at(t_start + i as f64 * beam_dt);
        // lidar -> imu -> world at beam time, then world -> end imu -> end lidar.
        let p_world = rot_b * (lid.rotation * p_lidar + lid.translation) + pos_b;
        let p_end_imu = end_rot_t * (p_world - state_at_scan_end.position);
        let p_end_lidar = lid_inv.rotation * p_end_imu + lid_inv.translation;
        points.push((p_end_lidar.x, p_end_lidar.y));
    }
    (PointCloud2::new(scan.timestamp, points), false)
}
