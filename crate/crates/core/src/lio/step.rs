//! Per-scan odometry driver: propagate, undistort, extract features,
//! iterated update, map insertion.

use nalgebra::Vector3;

use super::{
    compute_residuals, iekf_update, planar_pseudo_residuals, propagate, undistort_scan,
    Extrinsics, FeatureMap, IekfConfig, ImuNoiseParams, StateCovariance,
};
use crate::geometry::{NavState, PoseSE2, PoseSE3};
use crate::orientation::ImuSample;
use crate::preprocess::{extract_features, FeatureSet, LaserScan, PreprocessConfig};

/// Outcome of one scan step.
#[derive(Debug, Clone)]
pub struct LioStepResult {
    /// IMU pose in the world frame at the scan-end time.
    pub pose: PoseSE3,
    /// Planar projection of the pose.
    pub pose_se2: PoseSE2,
    /// Residuals used by the final update iteration (0 means the step
    /// fell back to pure propagation).
    pub residual_count: usize,
    /// Map points added by this scan.
    pub map_points_added: usize,
    /// Undistortion ran without IMU coverage.
    pub undistort_gap: bool,
}

/// Sequential LiDAR-inertial filter over one sensor stream.
pub struct LioFilter {
    pub state: NavState,
    pub covariance: StateCovariance,
    map: FeatureMap,
    cfg: IekfConfig,
    noise: ImuNoiseParams,
    extrinsics: Extrinsics,
    preprocess: PreprocessConfig,
    last_time: Option<f64>,
    scan_counter: u32,
}

/// Initial diagonal covariance: position and attitude fairly confident,
/// biases and gravity generous.
fn initial_covariance() -> StateCovariance {
    let mut cov = StateCovariance::zeros();
    let blocks: [(usize, f64); 6] = [
        (0, 1e-4),   // position
        (3, 1e-2),   // velocity
        (6, 1e-3),   // attitude
        (9, 1e-4),   // gyro bias
        (12, 1e-2),  // accel bias
        (15, 1e-2),  // gravity
    ];
    for (row, var) in blocks {
        for i in 0..3 {
            cov[(row + i, row + i)] = var;
        }
    }
    cov
}

impl LioFilter {
    pub fn new(
        initial_rotation: nalgebra::Matrix3<f64>,
        cfg: IekfConfig,
        noise: ImuNoiseParams,
        extrinsics: Extrinsics,
        preprocess: PreprocessConfig,
    ) -> Self {
        let state = NavState {
            rotation: initial_rotation,
            ..NavState::stationary()
        };
        Self {
            state,
            covariance: initial_covariance(),
            map: FeatureMap::new(0.5, 0.1),
            cfg,
            noise,
            extrinsics,
            preprocess,
            last_time: None,
            scan_counter: 0,
        }
    }

    pub fn map(&self) -> &FeatureMap {
        &self.map
    }

    pub fn extrinsics(&self) -> &Extrinsics {
        &self.extrinsics
    }

    /// Advance the filter by one scan. `imu_batch` must cover the span
    /// from the previous scan end through this scan's sweep end.
    pub fn step(
        &mut self,
        imu_batch: &[ImuSample],
        scan: &LaserScan,
        sweep_duration: f64,
    ) -> LioStepResult {
        let t_end = scan.timestamp + sweep_duration;
        let t_from = self.last_time.unwrap_or(scan.timestamp);

        // Propagate through the batch up to the scan-end time.
        let mut clock = t_from;
        for (i, sample) in imu_batch.iter().enumerate() {
            if sample.timestamp < t_from - 1e-12 {
                continue;
            }
            let t_next = imu_batch
                .get(i + 1)
                .map(|s| s.timestamp.min(t_end))
                .unwrap_or(t_end);
            let dt = t_next - clock;
            if dt > 1e-12 {
                let (s, c) = propagate(&self.state, &self.covariance, sample, dt, &self.noise);
                self.state = s;
                self.covariance = c;
                clock = t_next;
            }
            if clock >= t_end - 1e-12 {
                break;
            }
        }
        self.last_time = Some(t_end);

        let (cloud, undistort_gap) =
            undistort_scan(scan, imu_batch, &self.state, &self.extrinsics, sweep_duration);
        let features = extract_features(&cloud, &self.preprocess);

        let residual_count = self.update_with_features(&features);
        let map_points_added = self.insert_features(&features);
        self.scan_counter += 1;

        let pose = PoseSE3::new(self.state.rotation, self.state.position);
        LioStepResult {
            pose,
            pose_se2: pose.to_se2(),
            residual_count,
            map_points_added,
            undistort_gap,
        }
    }

    fn update_with_features(&mut self, features: &FeatureSet) -> usize {
        let map = &self.map;
        let cfg = self.cfg;
        let ext = self.extrinsics;
        let mut last_count = 0usize;
        let residual_fn = |state: &NavState| {
            let mut res = compute_residuals(features, map.index(), state, &ext, &cfg);
            if res.is_empty() {
                // No associations: fall back to propagation (pseudo
                // measurements alone would still pin z and tilt, but the
                // caller treats an empty set as "skip update").
                return res;
            }
            res.extend(planar_pseudo_residuals(state, cfg.planar_constraint_noise));
            last_count = res.len();
            res
        };
        let (state, cov) = iekf_update(&self.state, &self.covariance, residual_fn, &self.cfg);
        self.state = state;
        self.covariance = cov;
        last_count
    }

    fn insert_features(&mut self, features: &FeatureSet) -> usize {
        let mut added = 0;
        for &(x, y) in features.edges.iter().chain(features.planars.iter()) {
            let p_lidar = Vector3::new(x, y, 0.0);
            let p_imu = self.extrinsics.lidar_in_imu.rotation * p_lidar
                + self.extrinsics.lidar_in_imu.translation;
            let p_world = self.state.rotation * p_imu + self.state.position;
            if self.map.insert_deduped(p_world, self.scan_counter) {
                added += 1;
            }
        }
        added
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{build_corridor, simulate, SensorNoise, SimObject, TrajectorySpec};

    fn run_noise_free(
        env: &crate::sim::Environment,
        traj: &TrajectorySpec,
    ) -> (Vec<PoseSE2>, Vec<(f64, PoseSE2)>) {
        let out = simulate(env, traj, &SensorNoise::noiseless(), 1).unwrap();
        let mut filter = LioFilter::new(
            nalgebra::Matrix3::identity(),
            IekfConfig::default(),
            ImuNoiseParams::default(),
            Extrinsics::default(),
            PreprocessConfig::default(),
        );
        let sweep = 1.0 / traj.scan_rate;
        let mut poses = Vec::new();
        let mut imu_cursor = 0usize;
        let mut prev_end = out.scans[0].timestamp;
        for scan in &out.scans {
            let t_end = scan.timestamp + sweep;
            let start = out.imu[imu_cursor..]
                .iter()
                .position(|s| s.timestamp >= prev_end - 0.02)
                .map(|i| imu_cursor + i)
                .unwrap_or(imu_cursor);
            let stop = out.imu[start..]
                .iter()
                .position(|s| s.timestamp > t_end + 0.02)
                .map(|i| start + i)
                .unwrap_or(out.imu.len());
            let result = filter.step(&out.imu[start..stop], scan, sweep);
            poses.push(result.pose_se2);
            imu_cursor = start;
            prev_end = t_end;
        }
        (poses, out.gt_poses)
    }

    #[test]
    fn stationary_device_stays_put() {
        let env = build_corridor(10.0, 4.0, vec![SimObject::pillar(7.0, 2.0, 0.3)]).unwrap();
        let traj = TrajectorySpec {
            waypoints: vec![(3.0, 2.0), (3.0, 2.0)],
            speed: 1.0,
            scan_rate: 10.0,
            imu_rate: 100.0,
            hold_time: 10.0,
        };
        let (poses, gt) = run_noise_free(&env, &traj);
        let last = poses.last().unwrap();
        let truth = gt.last().unwrap().1;
        let err = ((last.x - (truth.x - gt[0].1.x)).powi(2)
            + (last.y - (truth.y - gt[0].1.y)).powi(2))
        .sqrt();
        assert!(err < 1e-3, "stationary drift {err}");
    }

    #[test]
    fn straight_corridor_traverse_tracks_ground_truth() {
        // 10 m noise-free run; the filter world frame starts at the first pose.
        let env = build_corridor(14.0, 4.0, vec![SimObject::pillar(7.0, 1.0, 0.3)]).unwrap();
        let traj = TrajectorySpec {
            waypoints: vec![(1.5, 2.0), (11.5, 2.0)],
            speed: 0.5,
            scan_rate: 10.0,
            imu_rate: 100.0,
            hold_time: 0.0,
        };
        let (poses, gt) = run_noise_free(&env, &traj);
        let origin = gt[0].1;
        let last = poses.last().unwrap();
        let truth = gt.last().unwrap().1;
        // Filter trajectory lives in the start frame.
        let expected = origin.between(&truth);
        let err = ((last.x - expected.x).powi(2) + (last.y - expected.y).powi(2)).sqrt();
        assert!(err < 0.05, "final position error {err}");
    }

    #[test]
    fn with_no_measurements_step_reduces_to_propagation() {
        // Empty map and an empty scan: the update must be skipped.
        let mut filter = LioFilter::new(
            nalgebra::Matrix3::identity(),
            IekfConfig::default(),
            ImuNoiseParams::default(),
            Extrinsics::default(),
            PreprocessConfig::default(),
        );
        let imu: Vec<ImuSample> = (0..=10)
            .map(|i| ImuSample {
                timestamp: i as f64 * 0.01,
                accel: nalgebra::Vector3::new(0.0, 0.0, 9.81),
                gyro: nalgebra::Vector3::new(0.0, 0.0, 0.2),
                mag: None,
            })
            .collect();
        let scan = LaserScan {
            timestamp: 0.0,
            angle_min: -std::f64::consts::PI,
            angle_increment: std::f64::consts::TAU / 8.0,
            range_min: 0.1,
            range_max: 10.0,
            ranges: vec![f64::INFINITY; 8],
        };

        // Reference: pure propagation over the same samples and the same
        // computed time deltas.
        let mut ref_state = filter.state;
        let mut ref_cov = filter.covariance;
        for pair in imu.windows(2) {
            let dt = pair[1].timestamp - pair[0].timestamp;
            let (s, c) = propagate(&ref_state, &ref_cov, &pair[0], dt, &ImuNoiseParams::default());
            ref_state = s;
            ref_cov = c;
        }

        let result = filter.step(&imu, &scan, 0.1);
        assert_eq!(result.residual_count, 0);
        assert_eq!(filter.state, ref_state);
        assert_eq!(filter.covariance, ref_cov);
    }
}
