//! Deterministic synthetic world: corridor scenes, ray-cast 2D LiDAR,
//! IMU synthesis with analytic kinematics, and ground-truth logs.

mod env;
mod path;

pub use env::{build_corridor, raycast, raycast_at, segment_collides, Environment, ObjectMotion,
              Segment, SimObject};
pub use path::{PathModel, PathSample};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::geometry::PoseSE2;
use crate::orientation::ImuSample;
use crate::preprocess::LaserScan;
use crate::{Error, Result};

/// Waypoint trajectory followed at constant speed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrajectorySpec {
    pub waypoints: Vec<(f64, f64)>,
    /// Travel speed (m/s).
    pub speed: f64,
    /// Scan rate (Hz).
    pub scan_rate: f64,
    /// IMU rate (Hz); at least the scan rate.
    pub imu_rate: f64,
    /// Extra time to hold at the final waypoint (s).
    pub hold_time: f64,
}

impl TrajectorySpec {
    pub fn validate(&self) -> Result<()> {
        if self.waypoints.len() < 2 {
            return Err(Error::Config("trajectory needs >= 2 waypoints".into()));
        }
        if self.speed <= 0.0 || self.scan_rate <= 0.0 || self.imu_rate <= 0.0 {
            return Err(Error::Config("trajectory rates and speed must be positive".into()));
        }
        if self.imu_rate < self.scan_rate {
            return Err(Error::Config("imu_rate must be >= scan_rate".into()));
        }
        Ok(())
    }
}

/// Sensor noise model and sensor limits.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SensorNoise {
    /// Range noise std (m).
    pub range_std: f64,
    /// Sensor max range (m); beams beyond it are misses.
    pub range_max: f64,
    /// Sensor min range (m).
    pub range_min: f64,
    pub beam_count: usize,
    /// Gyro white-noise density (rad/s/sqrt(Hz)).
    pub gyro_noise_density: f64,
    /// Accel white-noise density (m/s^2/sqrt(Hz)).
    pub accel_noise_density: f64,
    /// Constant gyro bias (rad/s), applied per axis.
    pub gyro_bias: [f64; 3],
    /// Constant accel bias (m/s^2), applied per axis.
    pub accel_bias: [f64; 3],
    /// Magnetometer direction noise std per axis.
    pub mag_noise: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        Self {
            range_std: 0.02,
            range_max: 12.0,
            range_min: 0.15,
            beam_count: 360,
            gyro_noise_density: 0.005,
            accel_noise_density: 0.05,
            gyro_bias: [0.002, -0.002, 0.001],
            accel_bias: [0.05, -0.03, 0.02],
            mag_noise: 0.01,
        }
    }
}

impl SensorNoise {
    /// Noise-free variant with the same sensor limits.
    pub fn noiseless() -> Self {
        Self {
            range_std: 0.0,
            gyro_noise_density: 0.0,
            accel_noise_density: 0.0,
            gyro_bias: [0.0; 3],
            accel_bias: [0.0; 3],
            mag_noise: 0.0,
            ..Self::default()
        }
    }
}

/// World-frame object state at one timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectState {
    pub center: (f64, f64),
    pub radius: f64,
    pub is_static: bool,
}

/// Everything one simulation run produces.
#[derive(Debug, Clone)]
pub struct SimOutput {
    pub scans: Vec<LaserScan>,
    pub imu: Vec<ImuSample>,
    /// Ground-truth pose at each scan timestamp.
    pub gt_poses: Vec<(f64, PoseSE2)>,
    /// World-frame object states at each scan timestamp.
    pub gt_objects: Vec<Vec<ObjectState>>,
}

/// Sentinel triple for an absent object slot.
pub const OBJECT_SENTINEL: (f64, f64, f64) = (0.0, 0.0, -1.0);

/// Margin inside the sensor range within which objects are labeled.
const LABEL_RANGE_MARGIN: f64 = 0.5;

fn gravity_world() -> Vector3<f64> {
    Vector3::new(0.0, 0.0, -9.81)
}

/// IMU sample synthesized from the analytic path kinematics at time t.
fn imu_from_path(sample: &PathSample, t: f64) -> ImuSample {
    let (s, c) = sample.heading.sin_cos();
    // Body frame: rotate world vectors by -heading (planar motion).
    let a_w = Vector3::new(sample.accel.0, sample.accel.1, 0.0) - gravity_world();
    let accel = Vector3::new(c * a_w.x + s * a_w.y, -s * a_w.x + c * a_w.y, a_w.z);
    let mag_w = Vector3::new(1.0, 0.0, 0.0);
    let mag = Vector3::new(c * mag_w.x + s * mag_w.y, -s * mag_w.x + c * mag_w.y, 0.0);
    ImuSample {
        timestamp: t,
        accel,
        gyro: Vector3::new(0.0, 0.0, sample.yaw_rate),
        mag: Some(mag),
    }
}

/// Run the simulator: scans, IMU, ground truth. Bit-reproducible for a
/// fixed seed; scan and IMU noise draw from independent seeded streams.
pub fn simulate(
    env: &Environment,
    traj: &TrajectorySpec,
    noise: &SensorNoise,
    seed: u64,
) -> Result<SimOutput> {
    traj.validate()?;
    let path = PathModel::new(&traj.waypoints, traj.speed, traj.hold_time);
    let duration = path.total_time();
    let sweep = 1.0 / traj.scan_rate;

    // Collision check at IMU resolution.
    let imu_dt = 1.0 / traj.imu_rate;
    let n_check = (duration * traj.imu_rate).floor() as usize;
    let mut prev = path.sample(0.0).position;
    for i in 1..=n_check {
        let t = i as f64 * imu_dt;
        let cur = path.sample(t).position;
        if segment_collides(env, t, prev, cur) {
            return Err(Error::TrajectoryExitsEnvironment {
                t,
                x: cur.0,
                y: cur.1,
            });
        }
        prev = cur;
    }

    let mut rng_scan = ChaCha8Rng::seed_from_u64(seed ^ 0x5ca4_0001);
    let mut rng_imu = ChaCha8Rng::seed_from_u64(seed ^ 0x13a7_0002);
    let range_noise = Normal::new(0.0, noise.range_std.max(0.0)).unwrap();

    // Scans at scan_rate, inclusive of t = 0 and the final multiple <= duration.
    let n_scans = (duration * traj.scan_rate).floor() as usize + 1;
    let mut scans = Vec::with_capacity(n_scans);
    let mut gt_poses = Vec::with_capacity(n_scans);
    let mut gt_objects = Vec::with_capacity(n_scans);
    let angle_increment = std::f64::consts::TAU / noise.beam_count as f64;
    let angle_min = -std::f64::consts::PI;

    for k in 0..n_scans {
        let t_scan = k as f64 / traj.scan_rate;
        let mut ranges = Vec::with_capacity(noise.beam_count);
        for b in 0..noise.beam_count {
            let t_beam = t_scan + b as f64 * sweep / noise.beam_count as f64;
            let s = path.sample(t_beam);
            let beam_angle = s.heading + angle_min + b as f64 * angle_increment;
            let r = raycast_at(env, t_beam, s.position, beam_angle, noise.range_max);
            if r >= noise.range_max {
                ranges.push(f64::INFINITY);
            } else if noise.range_std > 0.0 {
                ranges.push(r + range_noise.sample(&mut rng_scan));
            } else {
                ranges.push(r);
            }
        }
        scans.push(LaserScan {
            timestamp: t_scan,
            angle_min,
            angle_increment,
            range_min: noise.range_min,
            range_max: noise.range_max,
            ranges,
        });
        let s = path.sample(t_scan);
        gt_poses.push((t_scan, PoseSE2::new(s.position.0, s.position.1, s.heading)));
        gt_objects.push(
            env.objects
                .iter()
                .map(|o| ObjectState {
                    center: o.center_at(t_scan),
                    radius: o.radius,
                    is_static: o.is_static(),
                })
                .collect(),
        );
    }

    // IMU log extends past the last scan so its sweep stays bracketed.
    let imu_end = duration + sweep;
    let n_imu = (imu_end * traj.imu_rate).floor() as usize + 1;
    let gyro_std = noise.gyro_noise_density * traj.imu_rate.sqrt();
    let accel_std = noise.accel_noise_density * traj.imu_rate.sqrt();
    let gyro_noise = Normal::new(0.0, gyro_std.max(0.0)).unwrap();
    let accel_noise = Normal::new(0.0, accel_std.max(0.0)).unwrap();
    let mag_noise = Normal::new(0.0, noise.mag_noise.max(0.0)).unwrap();

    let mut imu = Vec::with_capacity(n_imu);
    for i in 0..n_imu {
        let t = i as f64 * imu_dt;
        let mut s = imu_from_path(&path.sample(t), t);
        for axis in 0..3 {
            s.gyro[axis] += noise.gyro_bias[axis];
            s.accel[axis] += noise.accel_bias[axis];
            if gyro_std > 0.0 {
                s.gyro[axis] += gyro_noise.sample(&mut rng_imu);
            }
            if accel_std > 0.0 {
                s.accel[axis] += accel_noise.sample(&mut rng_imu);
            }
        }
        if noise.mag_noise > 0.0 {
            let mut m = s.mag.unwrap();
            for axis in 0..3 {
                m[axis] += mag_noise.sample(&mut rng_imu);
            }
            s.mag = Some(m.normalize());
        }
        imu.push(s);
    }

    Ok(SimOutput {
        scans,
        imu,
        gt_poses,
        gt_objects,
    })
}

/// Sensor-frame object labels at one timestamp, nearest first,
/// sentinel-padded to 4. An object is labeled when its surface is
/// solidly inside the sensor range and it subtends at least
/// `min_angular_width` radians, so labels track what the scanner can
/// actually resolve.
pub fn label_objects(
    env: &Environment,
    gt_pose: &PoseSE2,
    timestamp: f64,
    range_max: f64,
    min_angular_width: f64,
) -> [(f64, f64, f64); 4] {
    let mut visible: Vec<(f64, (f64, f64, f64))> = Vec::new();
    let inv = gt_pose.inverse();
    for obj in &env.objects {
        let c = obj.center_at(timestamp);
        let d = ((c.0 - gt_pose.x).powi(2) + (c.1 - gt_pose.y).powi(2)).sqrt();
        if d - obj.radius > range_max - LABEL_RANGE_MARGIN {
            continue;
        }
        let width = if d > obj.radius {
            2.0 * (obj.radius / d).asin()
        } else {
            std::f64::consts::PI
        };
        if width < min_angular_width {
            continue;
        }
        let local = inv.transform(c);
        visible.push((d, (local.0, local.1, obj.radius)));
    }
    visible.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut out = [OBJECT_SENTINEL; 4];
    for (slot, (_, label)) in visible.into_iter().take(4).enumerate() {
        out[slot] = label;
    }
    out
}

/// Angular width below which the default 360-beam scanner cannot form a
/// cluster worth fitting (about five beams).
pub fn min_resolvable_width(beam_count: usize) -> f64 {
    5.0 * std::f64::consts::TAU / beam_count.max(1) as f64
}

/// Scene preset: environment plus the trajectory driven through it.
#[derive(Debug, Clone)]
pub struct ScenePreset {
    pub name: &'static str,
    pub environment: Environment,
    pub trajectory: TrajectorySpec,
}

/// 100 m x 4 m corridor with four static pillars placed so that, at the
/// default 12 m sensor range, some longitudinal reference (pillar or end
/// wall) is always visible.
pub fn preset_corridor_a() -> ScenePreset {
    let objects = vec![
        SimObject::pillar(20.0, 0.8, 0.3),
        SimObject::pillar(44.0, 3.2, 0.3),
        SimObject::pillar(68.0, 0.8, 0.3),
        SimObject::pillar(88.0, 3.2, 0.3),
    ];
    ScenePreset {
        name: "corridor-A",
        environment: build_corridor(100.0, 4.0, objects).expect("preset geometry is valid"),
        trajectory: TrajectorySpec {
            waypoints: vec![(0.1, 2.0), (99.9, 2.0)],
            speed: 0.32,
            scan_rate: 10.0,
            imu_rate: 100.0,
            hold_time: 0.0,
        },
    }
}

/// 90 m x 4 m corridor, same pillar coverage idea as corridor-A.
pub fn preset_corridor_b() -> ScenePreset {
    let objects = vec![
        SimObject::pillar(18.0, 3.2, 0.3),
        SimObject::pillar(40.0, 0.8, 0.3),
        SimObject::pillar(62.0, 3.2, 0.3),
        SimObject::pillar(80.0, 0.8, 0.3),
    ];
    ScenePreset {
        name: "corridor-B",
        environment: build_corridor(90.0, 4.0, objects).expect("preset geometry is valid"),
        trajectory: TrajectorySpec {
            waypoints: vec![(0.1, 2.0), (89.9, 2.0)],
            speed: 0.32,
            scan_rate: 10.0,
            imu_rate: 100.0,
            hold_time: 0.0,
        },
    }
}

pub fn preset_by_name(name: &str) -> Option<ScenePreset> {
    match name {
        "corridor-A" | "corridor-a" => Some(preset_corridor_a()),
        "corridor-B" | "corridor-b" => Some(preset_corridor_b()),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn stationary_traj(hold: f64) -> TrajectorySpec {
        TrajectorySpec {
            waypoints: vec![(5.0, 2.0), (5.0, 2.0)],
            speed: 1.0,
            scan_rate: 10.0,
            imu_rate: 100.0,
            hold_time: hold,
        }
    }

    #[test]
    fn stationary_noise_free_scans_are_identical() {
        let env = build_corridor(10.0, 4.0, vec![SimObject::pillar(7.0, 2.0, 0.3)]).unwrap();
        let out = simulate(&env, &stationary_traj(1.0), &SensorNoise::noiseless(), 7).unwrap();
        assert!(out.scans.len() > 2);
        for scan in &out.scans[1..] {
            assert_eq!(scan.ranges, out.scans[0].ranges);
        }
        // Stationary accel reads pure gravity reaction in the body frame.
        for s in &out.imu {
            assert_relative_eq!(s.accel.z, 9.81, epsilon = 1e-12);
            assert!(s.accel.x.abs() < 1e-12 && s.accel.y.abs() < 1e-12);
            assert_eq!(s.gyro, Vector3::zeros());
        }
    }

    #[test]
    fn straight_line_scan_count() {
        // 10 m at 1 m/s, 10 Hz scans: 100 scans plus the initial one.
        let env = build_corridor(20.0, 4.0, vec![]).unwrap();
        let traj = TrajectorySpec {
            waypoints: vec![(5.0, 2.0), (15.0, 2.0)],
            speed: 1.0,
            scan_rate: 10.0,
            imu_rate: 100.0,
            hold_time: 0.0,
        };
        let out = simulate(&env, &traj, &SensorNoise::noiseless(), 0).unwrap();
        assert_eq!(out.scans.len(), 101);
    }

    #[test]
    fn corridor_a_traverse_takes_about_313_seconds() {
        let preset = preset_corridor_a();
        let path = PathModel::new(
            &preset.trajectory.waypoints,
            preset.trajectory.speed,
            preset.trajectory.hold_time,
        );
        assert!((path.total_time() - 313.0).abs() < 5.0, "{}", path.total_time());
    }

    #[test]
    fn deterministic_for_fixed_seed() {
        let preset = preset_corridor_a();
        let mut traj = preset.trajectory.clone();
        traj.waypoints = vec![(0.1, 2.0), (10.0, 2.0)];
        let a = simulate(&preset.environment, &traj, &SensorNoise::default(), 42).unwrap();
        let b = simulate(&preset.environment, &traj, &SensorNoise::default(), 42).unwrap();
        for (x, y) in a.scans.iter().zip(&b.scans) {
            assert_eq!(x.ranges, y.ranges);
        }
        for (x, y) in a.imu.iter().zip(&b.imu) {
            assert_eq!(x.accel, y.accel);
            assert_eq!(x.gyro, y.gyro);
            assert_eq!(x.mag, y.mag);
        }
    }

    #[test]
    fn noise_free_ranges_match_analytic_distances() {
        let env = build_corridor(10.0, 4.0, vec![SimObject::pillar(7.0, 2.0, 0.4)]).unwrap();
        let out = simulate(&env, &stationary_traj(0.2), &SensorNoise::noiseless(), 1).unwrap();
        let scan = &out.scans[0];
        // Beam pointing straight ahead (+x in world, heading 0): hits pillar.
        let fwd = scan
            .ranges
            .iter()
            .enumerate()
            .find(|(b, _)| {
                let a = scan.angle_min + *b as f64 * scan.angle_increment;
                a.abs() < 1e-9
            })
            .unwrap();
        assert_relative_eq!(*fwd.1, 2.0 - 0.4, epsilon = 1e-9);
    }

    #[test]
    fn out_of_range_beams_are_infinite() {
        let env = build_corridor(100.0, 4.0, vec![]).unwrap();
        let out = simulate(&env, &stationary_traj(0.1), &SensorNoise::noiseless(), 1).unwrap();
        // Looking down a 100 m corridor from x=5: forward beam exceeds 12 m range.
        let scan = &out.scans[0];
        let has_inf = scan.ranges.iter().any(|r| r.is_infinite());
        assert!(has_inf);
    }

    #[test]
    fn imu_double_integration_tracks_ground_truth() {
        let env = build_corridor(30.0, 4.0, vec![]).unwrap();
        let traj = TrajectorySpec {
            waypoints: vec![(2.0, 1.0), (12.0, 1.0), (12.0, 3.0), (25.0, 3.0)],
            speed: 1.0,
            scan_rate: 10.0,
            imu_rate: 200.0,
            hold_time: 0.0,
        };
        let out = simulate(&env, &traj, &SensorNoise::noiseless(), 3).unwrap();
        let path = PathModel::new(&traj.waypoints, traj.speed, traj.hold_time);

        // Midpoint integration of the exact IMU signal, planar.
        let dt = 1.0 / traj.imu_rate;
        let s0 = path.sample(0.0);
        let mut pos = nalgebra::Vector2::new(s0.position.0, s0.position.1);
        let mut vel = nalgebra::Vector2::new(s0.velocity.0, s0.velocity.1);
        let mut heading = s0.heading;
        for pair in out.imu.windows(2) {
            let gyro_mid = 0.5 * (pair[0].gyro.z + pair[1].gyro.z);
            let a0 = pair[0].accel;
            let (sn, cs) = heading.sin_cos();
            let a_world = nalgebra::Vector2::new(cs * a0.x - sn * a0.y, sn * a0.x + cs * a0.y);
            pos += vel * dt + 0.5 * a_world * dt * dt;
            vel += a_world * dt;
            heading += gyro_mid * dt;
            if pair[1].timestamp >= path.total_time() {
                break;
            }
        }
        let end = path.sample(path.total_time());
        let err = ((pos.x - end.position.0).powi(2) + (pos.y - end.position.1).powi(2)).sqrt();
        // First-order integration error accumulates like O(dt) overall.
        assert!(err < 0.1, "dead-reckoning error {err}");
    }

    #[test]
    fn scan_timestamps_have_bracketing_imu_samples() {
        let preset = preset_corridor_b();
        let mut traj = preset.trajectory.clone();
        traj.waypoints = vec![(0.1, 2.0), (7.3, 2.0)];
        let out = simulate(&preset.environment, &traj, &SensorNoise::default(), 5).unwrap();
        let imu_first = out.imu.first().unwrap().timestamp;
        let imu_last = out.imu.last().unwrap().timestamp;
        let sweep = 1.0 / traj.scan_rate;
        for scan in &out.scans {
            assert!(scan.timestamp >= imu_first);
            assert!(scan.timestamp + sweep <= imu_last + 1e-9);
        }
        for pair in out.imu.windows(2) {
            assert!(pair[1].timestamp > pair[0].timestamp);
        }
    }

    #[test]
    fn trajectory_through_wall_is_rejected() {
        let env = build_corridor(10.0, 4.0, vec![]).unwrap();
        let traj = TrajectorySpec {
            waypoints: vec![(5.0, 2.0), (15.0, 2.0)],
            speed: 1.0,
            scan_rate: 10.0,
            imu_rate: 100.0,
            hold_time: 0.0,
        };
        assert!(matches!(
            simulate(&env, &traj, &SensorNoise::noiseless(), 0),
            Err(Error::TrajectoryExitsEnvironment { .. })
        ));
    }

    #[test]
    fn labels_empty_when_nothing_in_range() {
        let env = build_corridor(100.0, 4.0, vec![SimObject::pillar(90.0, 2.0, 0.3)]).unwrap();
        let labels = label_objects(&env, &PoseSE2::new(5.0, 2.0, 0.0), 0.0, 12.0, min_resolvable_width(360));
        assert_eq!(labels, [OBJECT_SENTINEL; 4]);
    }

    #[test]
    fn label_directly_ahead() {
        let env = build_corridor(20.0, 4.0, vec![SimObject::pillar(7.0, 2.0, 0.25)]).unwrap();
        let labels = label_objects(&env, &PoseSE2::new(5.0, 2.0, 0.0), 0.0, 12.0, min_resolvable_width(360));
        assert_relative_eq!(labels[0].0, 2.0, epsilon = 1e-12);
        assert_relative_eq!(labels[0].1, 0.0, epsilon = 1e-12);
        assert_relative_eq!(labels[0].2, 0.25, epsilon = 1e-12);
        assert_eq!(labels[1], OBJECT_SENTINEL);
    }

    #[test]
    fn labels_sorted_nearest_first() {
        let env = build_corridor(
            30.0,
            4.0,
            vec![
                SimObject::pillar(12.0, 2.0, 0.3),
                SimObject::pillar(8.0, 1.0, 0.3),
            ],
        )
        .unwrap();
        let labels = label_objects(&env, &PoseSE2::new(5.0, 2.0, 0.0), 0.0, 12.0, min_resolvable_width(360));
        let d0 = (labels[0].0.powi(2) + labels[0].1.powi(2)).sqrt();
        let d1 = (labels[1].0.powi(2) + labels[1].1.powi(2)).sqrt();
        assert!(d0 < d1);
    }
}
