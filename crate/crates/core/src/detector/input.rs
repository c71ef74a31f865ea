//! Detector input assembly: geometric preliminary object extraction and
//! the fused 26-dim LiDAR+IMU feature vector.

use nalgebra::UnitQuaternion;

use crate::orientation::ImuSample;
use crate::preprocess::{LaserScan, PointCloud2};

/// Input layout: [min, max, mean range, density] ++ 4 x (cx, cy, r)
/// preliminary objects ++ accel (3) ++ gyro (3) ++ quaternion (x, y, z, w).
pub const DETECTOR_INPUT_DIM: usize = 26;

/// Absent object slots are encoded as (0, 0, -1).
pub const SLOT_SENTINEL: (f64, f64, f64) = (0.0, 0.0, -1.0);

/// Fixed 26-dim fused feature vector.
pub type DetectorInput = [f64; DETECTOR_INPUT_DIM];

/// One regressed landmark in the sensor frame. Radius -1 marks an empty slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectedObject {
    pub center_x: f64,
    pub center_y: f64,
    pub radius: f64,
}

impl DetectedObject {
    pub fn empty() -> Self {
        Self {
            center_x: SLOT_SENTINEL.0,
            center_y: SLOT_SENTINEL.1,
            radius: SLOT_SENTINEL.2,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.radius > 0.0
    }
}

/// Gap threshold (m) splitting consecutive scan points into clusters.
const CLUSTER_GAP: f64 = 0.3;
/// Minimum cluster size eligible for a circle fit.
const MIN_CLUSTER_POINTS: usize = 5;
/// Fitted radii outside (0.05, 2.0] are discarded.
const RADIUS_MIN: f64 = 0.05;
const RADIUS_MAX: f64 = 2.0;

/// Algebraic least-squares circle fit (Kasa): minimizes
/// sum ((x-a)^2 + (y-b)^2 - r^2)^2 linearized in (a, b, a^2+b^2-r^2).
fn fit_circle(points: &[(f64, f64)]) -> Option<(f64, f64, f64)> {
    let n = points.len() as f64;
    if points.len() < 3 {
        return None;
    }
    let (mut sx, mut sy) = (0.0, 0.0);
    for p in points {
        sx += p.0;
        sy += p.1;
    }
    let (mx, my) = (sx / n, sy / n);
    // Centered coordinates keep the normal equations well conditioned.
    let (mut suu, mut suv, mut svv, mut suuu, mut svvv, mut suvv, mut svuu) =
        (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    for p in points {
        let u = p.0 - mx;
        let v = p.1 - my;
        suu += u * u;
        suv += u * v;
        svv += v * v;
        suuu += u * u * u;
        svvv += v * v * v;
        suvv += u * v * v;
        svuu += v * u * u;
    }
    let det = suu * svv - suv * suv;
    if det.abs() < 1e-12 {
        return None; // collinear
    }
    let rhs_u = 0.5 * (suuu + suvv);
    let rhs_v = 0.5 * (svvv + svuu);
    let uc = (rhs_u * svv - rhs_v * suv) / det;
    let vc = (rhs_v * suu - rhs_u * suv) / det;
    let r2 = uc * uc + vc * vc + (suu + svv) / n;
    Some((uc + mx, vc + my, r2.max(0.0).sqrt()))
}

/// Euclidean clustering along scan order followed by circle fits; keeps
/// the four largest clusters whose fitted radius lies in the clamp.
/// Clusters split across the seam of a full-circle sweep are merged.
pub fn preliminary_objects(cloud: &PointCloud2) -> Vec<(f64, f64, f64)> {
    let mut clusters: Vec<Vec<(f64, f64)>> = Vec::new();
    let mut current: Vec<(f64, f64)> = Vec::new();
    for &p in &cloud.points {
        if let Some(&last) = current.last() {
            let gap = ((p.0 - last.0).powi(2) + (p.1 - last.1).powi(2)).sqrt();
            if gap > CLUSTER_GAP {
                clusters.push(std::mem::take(&mut current));
            }
        }
        current.push(p);
    }
    if !current.is_empty() {
        clusters.push(current);
    }
    if clusters.len() >= 2 {
        let first_point = clusters[0][0];
        let last_point = *clusters.last().unwrap().last().unwrap();
        let seam_gap =
            ((first_point.0 - last_point.0).powi(2) + (first_point.1 - last_point.1).powi(2)).sqrt();
        if seam_gap <= CLUSTER_GAP {
            let head = clusters.remove(0);
            clusters.last_mut().unwrap().extend(head);
        }
    }

    let mut fits: Vec<(usize, (f64, f64, f64))> = clusters
        .iter()
        .filter(|c| c.len() >= MIN_CLUSTER_POINTS)
        .filter_map(|c| {
            fit_circle(c).and_then(|(cx, cy, r)| {
                if r > RADIUS_MIN && r <= RADIUS_MAX {
                    Some((c.len(), (cx, cy, r)))
                } else {
                    None
                }
            })
        })
        .collect();
    fits.sort_by(|a, b| b.0.cmp(&a.0));
    fits.truncate(4);
    fits.into_iter().map(|(_, f)| f).collect()
}

/// Concatenate scan statistics, preliminary objects, and IMU channels
/// into the fixed input layout.
pub fn assemble_input(
    scan: &LaserScan,
    prelim: &[(f64, f64, f64)],
    imu: &ImuSample,
    quat: &UnitQuaternion<f64>,
) -> DetectorInput {
    let mut out = [0.0; DETECTOR_INPUT_DIM];
    let valid: Vec<f64> = scan
        .ranges
        .iter()
        .copied()
        .filter(|r| r.is_finite() && *r >= scan.range_min && *r <= scan.range_max)
        .collect();
    if valid.is_empty() {
        out[0] = scan.range_max;
        out[1] = scan.range_max;
        out[2] = scan.range_max;
        out[3] = 0.0;
    } else {
        out[0] = valid.iter().cloned().fold(f64::INFINITY, f64::min);
        out[1] = valid.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        out[2] = valid.iter().sum::<f64>() / valid.len() as f64;
        out[3] = valid.len() as f64 / scan.ranges.len() as f64;
    }
    for slot in 0..4 {
        let (cx, cy, r) = prelim.get(slot).copied().unwrap_or(SLOT_SENTINEL);
        out[4 + slot * 3] = cx;
        out[5 + slot * 3] = cy;
        out[6 + slot * 3] = r;
    }
    out[16] = imu.accel.x;
    out[17] = imu.accel.y;
    out[18] = imu.accel.z;
    out[19] = imu.gyro.x;
    out[20] = imu.gyro.y;
    out[21] = imu.gyro.z;
    out[22] = quat.i;
    out[23] = quat.j;
    out[24] = quat.k;
    out[25] = quat.w;
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use std::f64::consts::PI;

    #[test]
    fn circle_fit_recovers_exact_circle() {
        let (cx, cy, r) = (2.0, 1.0, 0.5);
        let points: Vec<(f64, f64)> = (0..20)
            .map(|i| {
                let a = i as f64 / 20.0 * PI; // half arc
                (cx + r * a.cos(), cy + r * a.sin())
            })
            .collect();
        let cloud = PointCloud2::new(0.0, points);
        let out = preliminary_objects(&cloud);
        assert_eq!(out.len(), 1);
        assert_relative_eq!(out[0].0, cx, epsilon = 1e-6);
        assert_relative_eq!(out[0].1, cy, epsilon = 1e-6);
        assert_relative_eq!(out[0].2, r, epsilon = 1e-6);
    }

    #[test]
    fn straight_wall_produces_no_objects() {
        // Collinear points: the fitted radius blows past the clamp (the
        // unconstrained fit diverges, degenerate det rejects it).
        let points: Vec<(f64, f64)> = (0..40).map(|i| (2.0, -1.0 + 0.05 * i as f64)).collect();
        let cloud = PointCloud2::new(0.0, points);
        assert!(preliminary_objects(&cloud).is_empty());

        // Nearly collinear (tiny bow): fits but with a huge radius.
        let points: Vec<(f64, f64)> = (0..40)
            .map(|i| {
                let y = -1.0 + 0.05 * i as f64;
                (2.0 + 1e-4 * y * y, y)
            })
            .collect();
        let cloud = PointCloud2::new(0.0, points);
        assert!(preliminary_objects(&cloud).is_empty());
    }

    #[test]
    fn empty_cloud_gives_empty_list() {
        assert!(preliminary_objects(&PointCloud2::new(0.0, vec![])).is_empty());
    }

    #[test]
    fn clusters_split_on_gaps_and_rank_by_size() {
        // Two arcs separated by a wide gap; the bigger cluster comes first.
        let arc = |cx: f64, cy: f64, r: f64, n: usize| -> Vec<(f64, f64)> {
            (0..n)
                .map(|i| {
                    let a = i as f64 / n as f64 * PI;
                    (cx + r * a.cos(), cy + r * a.sin())
                })
                .collect()
        };
        let mut pts = arc(0.0, 0.0, 0.4, 8);
        pts.extend(arc(5.0, 0.0, 0.4, 16));
        let out = preliminary_objects(&PointCloud2::new(0.0, pts));
        assert_eq!(out.len(), 2);
        assert_relative_eq!(out[0].0, 5.0, epsilon = 1e-6);
        assert_relative_eq!(out[1].0, 0.0, epsilon = 1e-6);
    }

    fn any_imu() -> ImuSample {
        ImuSample {
            timestamp: 0.0,
            accel: Vector3::new(0.1, -0.2, 9.8),
            gyro: Vector3::new(0.01, 0.02, -0.03),
            mag: None,
        }
    }

    #[test]
    fn uniform_scan_statistics() {
        let scan = LaserScan {
            timestamp: 0.0,
            angle_min: -PI,
            angle_increment: 2.0 * PI / 8.0,
            range_min: 0.1,
            range_max: 12.0,
            ranges: vec![2.0; 8],
        };
        let v = assemble_input(&scan, &[], &any_imu(), &UnitQuaternion::identity());
        assert_eq!(&v[0..4], &[2.0, 2.0, 2.0, 1.0]);
    }

    #[test]
    fn missing_objects_fill_with_sentinels() {
        let scan = LaserScan {
            timestamp: 0.0,
            angle_min: -PI,
            angle_increment: 2.0 * PI / 4.0,
            range_min: 0.1,
            range_max: 12.0,
            ranges: vec![1.0; 4],
        };
        let v = assemble_input(&scan, &[], &any_imu(), &UnitQuaternion::identity());
        for slot in 0..4 {
            assert_eq!(v[4 + slot * 3], 0.0);
            assert_eq!(v[5 + slot * 3], 0.0);
            assert_eq!(v[6 + slot * 3], -1.0);
        }
    }

    #[test]
    fn hand_built_vector_matches_layout() {
        let scan = LaserScan {
            timestamp: 0.0,
            angle_min: -PI,
            angle_increment: PI,
            range_min: 0.1,
            range_max: 12.0,
            ranges: vec![1.0, 3.0],
        };
        let prelim = vec![(0.5, -0.5, 0.3)];
        let imu = any_imu();
        let q = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), 0.5);
        let v = assemble_input(&scan, &prelim, &imu, &q);
        let mut expected = vec![1.0, 3.0, 2.0, 1.0, 0.5, -0.5, 0.3];
        expected.extend([0.0, 0.0, -1.0].repeat(3));
        expected.extend([imu.accel.x, imu.accel.y, imu.accel.z]);
        expected.extend([imu.gyro.x, imu.gyro.y, imu.gyro.z]);
        expected.extend([q.i, q.j, q.k, q.w]);
        assert_eq!(v.to_vec(), expected);
    }

    #[test]
    fn all_invalid_beams_use_range_max_stats() {
        let scan = LaserScan {
            timestamp: 0.0,
            angle_min: -PI,
            angle_increment: PI,
            range_min: 0.1,
            range_max: 12.0,
            ranges: vec![f64::INFINITY, 0.01],
        };
        let v = assemble_input(&scan, &[], &any_imu(), &UnitQuaternion::identity());
        assert_eq!(&v[0..4], &[12.0, 12.0, 12.0, 0.0]);
    }
}
