//! Scan-to-cloud conversion, statistical outlier removal, voxel grid
//! downsampling, unit-sphere normalization, and curvature-based
//! edge/planar feature extraction.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// One 2D laser sweep: beam ranges plus the angular layout.
#[derive(Debug, Clone, PartialEq)]
pub struct LaserScan {
    pub timestamp: f64,
    pub angle_min: f64,
    pub angle_increment: f64,
    pub range_min: f64,
    pub range_max: f64,
    /// One range per beam; misses are encoded as non-finite values.
    pub ranges: Vec<f64>,
}

/// Planar point cloud in the sensor frame.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud2 {
    pub timestamp: f64,
    pub points: Vec<(f64, f64)>,
}

impl PointCloud2 {
    pub fn new(timestamp: f64, points: Vec<(f64, f64)>) -> Self {
        Self { timestamp, points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Curvature statistic selector.
///
/// `NormOfSum` is the scan-matching statistic that cancels on straight
/// walls (default); `SumOfNorms` is the plain mean of neighbor distances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CurvatureMode {
    SumOfNorms,
    NormOfSum,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PreprocessConfig {
    /// Voxel edge length in meters.
    pub voxel_cell: f64,
    /// Neighbor count for statistical outlier removal.
    pub outlier_k: usize,
    /// Retain points with mean neighbor distance <= mu + mult * sigma.
    pub outlier_std_mult: f64,
    /// Curvature threshold separating edges from planars.
    pub sigma_t: f64,
    /// Neighborhood half-width (points per side) for curvature.
    pub curvature_neighborhood: usize,
    pub curvature_mode: CurvatureMode,
    /// Treat the cloud as a closed full-circle sweep: curvature
    /// neighborhoods wrap across the array seam and no boundary points
    /// are excluded. Off for open (partial) clouds.
    pub wrap_scan: bool,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            voxel_cell: 0.1,
            outlier_k: 10,
            outlier_std_mult: 1.0,
            sigma_t: 0.05,
            curvature_neighborhood: 5,
            curvature_mode: CurvatureMode::NormOfSum,
            wrap_scan: true,
        }
    }
}

/// Edge/planar partition of a scan with the per-point curvature values.
#[derive(Debug, Clone, Default)]
pub struct FeatureSet {
    pub edges: Vec<(f64, f64)>,
    pub planars: Vec<(f64, f64)>,
    /// Curvature of every classified point, edges first then planars.
    pub curvatures: Vec<f64>,
    /// Set when the input was too small to classify anything.
    pub too_small: bool,
}

impl FeatureSet {
    pub fn len(&self) -> usize {
        self.edges.len() + self.planars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Polar to Cartesian conversion; beams outside [range_min, range_max]
/// or non-finite are dropped.
pub fn scan_to_cloud(scan: &LaserScan) -> PointCloud2 {
    let points = scan
        .ranges
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_finite() && **r >= scan.range_min && **r <= scan.range_max)
        .map(|(i, r)| {
            let theta = scan.angle_min + i as f64 * scan.angle_increment;
            (r * theta.cos(), r * theta.sin())
        })
        .collect();
    PointCloud2::new(scan.timestamp, points)
}

/// Statistical outlier removal: drop points whose mean distance to their
/// `outlier_k` nearest neighbors exceeds mu + mult * sigma of that
/// statistic over the cloud. Clouds with <= k points pass through.
pub fn remove_outliers(cloud: &PointCloud2, cfg: &PreprocessConfig) -> PointCloud2 {
    let n = cloud.points.len();
    if n <= cfg.outlier_k {
        return cloud.clone();
    }

    let mut mean_dists = Vec::with_capacity(n);
    let mut dists = Vec::with_capacity(n - 1);
    for (i, &(xi, yi)) in cloud.points.iter().enumerate() {
        dists.clear();
        for (j, &(xj, yj)) in cloud.points.iter().enumerate() {
            if i != j {
                dists.push(((xi - xj).powi(2) + (yi - yj).powi(2)).sqrt());
            }
        }
        dists.sort_unstable_by(|a, b| a.partial_cmp(b).unwrap());
        let k = cfg.outlier_k.min(dists.len());
        mean_dists.push(dists[..k].iter().sum::<f64>() / k as f64);
    }

    let mu = mean_dists.iter().sum::<f64>() / n as f64;
    let var = mean_dists.iter().map(|d| (d - mu).powi(2)).sum::<f64>() / n as f64;
    let cutoff = mu + cfg.outlier_std_mult * var.sqrt();

    let points = cloud
        .points
        .iter()
        .zip(&mean_dists)
        .filter(|(_, d)| **d <= cutoff)
        .map(|(p, _)| *p)
        .collect();
    PointCloud2::new(cloud.timestamp, points)
}

/// Voxel grid downsampling: every occupied cell contributes the centroid
/// of its points. Output order follows first occupancy of each cell.
pub fn voxel_downsample(cloud: &PointCloud2, cell: f64) -> PointCloud2 {
    assert!(cell > 0.0, "voxel cell must be positive");
    let mut order: Vec<(i64, i64)> = Vec::new();
    let mut cells: std::collections::HashMap<(i64, i64), (f64, f64, usize)> =
        std::collections::HashMap::new();
    for &(x, y) in &cloud.points {
        let key = ((x / cell).floor() as i64, (y / cell).floor() as i64);
        let entry = cells.entry(key).or_insert_with(|| {
            order.push(key);
            (0.0, 0.0, 0)
        });
        entry.0 += x;
        entry.1 += y;
        entry.2 += 1;
    }
    let points = order
        .iter()
        .map(|key| {
            let (sx, sy, n) = cells[key];
            (sx / n as f64, sy / n as f64)
        })
        .collect();
    PointCloud2::new(cloud.timestamp, points)
}

/// Center the cloud and scale it into the unit disc, returning the
/// centroid and scale needed to invert the mapping. Scale is the max
/// distance from the centroid, reported as 1 for degenerate clouds.
pub fn normalize_unit_sphere(cloud: &PointCloud2) -> Result<(PointCloud2, (f64, f64), f64)> {
    if cloud.points.is_empty() {
        return Err(Error::EmptyCloud);
    }
    let n = cloud.points.len() as f64;
    let cx = cloud.points.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = cloud.points.iter().map(|p| p.1).sum::<f64>() / n;
    let max_dist = cloud
        .points
        .iter()
        .map(|&(x, y)| ((x - cx).powi(2) + (y - cy).powi(2)).sqrt())
        .fold(0.0, f64::max);
    let scale = if max_dist > 0.0 { max_dist } else { 1.0 };
    let points = cloud
        .points
        .iter()
        .map(|&(x, y)| ((x - cx) / scale, (y - cy) / scale))
        .collect();
    Ok((PointCloud2::new(cloud.timestamp, points), (cx, cy), scale))
}

/// Curvature of the point at `idx` over `half` neighbors per side;
/// indices wrap modulo the cloud size when `wrap` is set.
fn curvature_at(
    points: &[(f64, f64)],
    idx: usize,
    half: usize,
    mode: CurvatureMode,
    wrap: bool,
) -> f64 {
    let n = points.len();
    let (xn, yn) = points[idx];
    let neighbors = (-(half as isize)..=half as isize)
        .filter(|&o| o != 0)
        .map(|o| {
            if wrap {
                (idx as isize + o).rem_euclid(n as isize) as usize
            } else {
                (idx as isize + o) as usize
            }
        });
    match mode {
        CurvatureMode::SumOfNorms => {
            let mut sum = 0.0;
            let mut count = 0usize;
            for j in neighbors {
                let (xj, yj) = points[j];
                sum += ((xj - xn).powi(2) + (yj - yn).powi(2)).sqrt();
                count += 1;
            }
            sum / count as f64
        }
        CurvatureMode::NormOfSum => {
            let mut dx = 0.0;
            let mut dy = 0.0;
            let mut count = 0usize;
            for j in neighbors {
                let (xj, yj) = points[j];
                dx += xj - xn;
                dy += yj - yn;
                count += 1;
            }
            let norm_n = (xn * xn + yn * yn).sqrt().max(1e-12);
            (dx * dx + dy * dy).sqrt() / (count as f64 * norm_n)
        }
    }
}

/// Split an angle-ordered cloud into edge (high curvature) and planar
/// (low curvature) features. For open clouds the boundary points (the
/// first and last `curvature_neighborhood`) are excluded from both
/// sets; closed full-circle clouds (`wrap_scan`) classify every point.
pub fn extract_features(cloud: &PointCloud2, cfg: &PreprocessConfig) -> FeatureSet {
    let half = cfg.curvature_neighborhood;
    let n = cloud.points.len();
    if n <= 2 * half {
        return FeatureSet {
            too_small: true,
            ..FeatureSet::default()
        };
    }

    let mut edges = Vec::new();
    let mut planars = Vec::new();
    let mut edge_sigmas = Vec::new();
    let mut planar_sigmas = Vec::new();
    let range = if cfg.wrap_scan { 0..n } else { half..n - half };
    for idx in range {
        let sigma = curvature_at(&cloud.points, idx, half, cfg.curvature_mode, cfg.wrap_scan);
        if sigma > cfg.sigma_t {
            edges.push(cloud.points[idx]);
            edge_sigmas.push(sigma);
        } else {
            planars.push(cloud.points[idx]);
            planar_sigmas.push(sigma);
        }
    }
    edge_sigmas.extend(planar_sigmas);
    FeatureSet {
        edges,
        planars,
        curvatures: edge_sigmas,
        too_small: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use std::f64::consts::PI;

    fn scan(ranges: Vec<f64>) -> LaserScan {
        LaserScan {
            timestamp: 0.0,
            angle_min: 0.0,
            angle_increment: PI / 2.0,
            range_min: 0.1,
            range_max: 50.0,
            ranges,
        }
    }

    #[test]
    fn scan_to_cloud_single_beam() {
        let c = scan_to_cloud(&scan(vec![2.0]));
        assert_eq!(c.points, vec![(2.0, 0.0)]);
    }

    #[test]
    fn scan_to_cloud_drops_infinite_beam() {
        let c = scan_to_cloud(&scan(vec![f64::INFINITY]));
        assert!(c.points.is_empty());
    }

    #[test]
    fn scan_to_cloud_quarter_turn() {
        let c = scan_to_cloud(&scan(vec![5.0, 1.0]));
        assert_relative_eq!(c.points[1].0, 0.0, epsilon = 1e-12);
        assert_relative_eq!(c.points[1].1, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn scan_to_cloud_drops_out_of_range() {
        let c = scan_to_cloud(&scan(vec![0.05, 60.0, 2.0]));
        assert_eq!(c.points.len(), 1);
    }

    fn unit_grid(rows: usize, cols: usize) -> PointCloud2 {
        let mut pts = Vec::new();
        for i in 0..rows {
            for j in 0..cols {
                pts.push((i as f64, j as f64));
            }
        }
        PointCloud2::new(0.0, pts)
    }

    /// Brute-force kNN mean-distance oracle used to freeze expectations.
    fn brute_force_mean_knn(points: &[(f64, f64)], i: usize, k: usize) -> f64 {
        let mut d: Vec<f64> = points
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, p)| ((p.0 - points[i].0).powi(2) + (p.1 - points[i].1).powi(2)).sqrt())
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        d[..k].iter().sum::<f64>() / k as f64
    }

    #[test]
    fn outlier_removal_keeps_uniform_grid() {
        // 50 lattice points; with k=2 every point (corners included) has
        // two unit-distance neighbors, so d_i is uniform.
        let cloud = unit_grid(5, 10);
        let cfg = PreprocessConfig {
            outlier_k: 2,
            outlier_std_mult: 1.0,
            ..PreprocessConfig::default()
        };
        for i in 0..cloud.points.len() {
            assert_relative_eq!(brute_force_mean_knn(&cloud.points, i, 2), 1.0, epsilon = 1e-12);
        }
        let out = remove_outliers(&cloud, &cfg);
        assert_eq!(out.points.len(), cloud.points.len());
    }

    #[test]
    fn outlier_removal_drops_far_point() {
        let mut cloud = unit_grid(5, 10);
        cloud.points.push((100.0, 100.0));
        let far = cloud.points.len() - 1;
        let cfg = PreprocessConfig {
            outlier_k: 2,
            outlier_std_mult: 1.0,
            ..PreprocessConfig::default()
        };
        assert!(brute_force_mean_knn(&cloud.points, far, 2) > 100.0);
        let out = remove_outliers(&cloud, &cfg);
        assert_eq!(out.points.len(), 50);
        assert!(!out.points.contains(&(100.0, 100.0)));
    }

    #[test]
    fn outlier_removal_single_point_passthrough() {
        let cloud = PointCloud2::new(0.0, vec![(1.0, 1.0)]);
        let out = remove_outliers(&cloud, &PreprocessConfig::default());
        assert_eq!(out.points, cloud.points);
    }

    #[test]
    fn voxel_merges_points_in_one_cell() {
        let cloud = PointCloud2::new(0.0, vec![(0.0, 0.0), (0.2, 0.2)]);
        let out = voxel_downsample(&cloud, 1.0);
        assert_eq!(out.points.len(), 1);
        assert_relative_eq!(out.points[0].0, 0.1, epsilon = 1e-15);
        assert_relative_eq!(out.points[0].1, 0.1, epsilon = 1e-15);
    }

    #[test]
    fn voxel_distinct_cells_pass_through() {
        let cloud = PointCloud2::new(0.0, vec![(0.5, 0.5), (1.5, 0.5), (2.5, 2.5)]);
        let out = voxel_downsample(&cloud, 1.0);
        assert_eq!(out.points, cloud.points);
    }

    #[test]
    fn voxel_empty_in_empty_out() {
        let out = voxel_downsample(&PointCloud2::new(0.0, vec![]), 0.5);
        assert!(out.points.is_empty());
    }

    #[test]
    fn normalize_two_points() {
        let cloud = PointCloud2::new(0.0, vec![(0.0, 0.0), (2.0, 0.0)]);
        let (out, centroid, scale) = normalize_unit_sphere(&cloud).unwrap();
        assert_relative_eq!(centroid.0, 1.0);
        assert_relative_eq!(centroid.1, 0.0);
        assert_relative_eq!(scale, 1.0);
        assert_relative_eq!(out.points[0].0, -1.0);
        assert_relative_eq!(out.points[1].0, 1.0);
    }

    #[test]
    fn normalize_single_point_degenerate() {
        let cloud = PointCloud2::new(0.0, vec![(3.0, -4.0)]);
        let (out, _, scale) = normalize_unit_sphere(&cloud).unwrap();
        assert_eq!(out.points, vec![(0.0, 0.0)]);
        assert_eq!(scale, 1.0);
    }

    #[test]
    fn normalize_empty_errors() {
        assert!(matches!(
            normalize_unit_sphere(&PointCloud2::new(0.0, vec![])),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn normalize_idempotent_on_canonical_input() {
        // Symmetric set already centered with max radius 1.
        let cloud = PointCloud2::new(
            0.0,
            vec![(1.0, 0.0), (-1.0, 0.0), (0.0, 1.0), (0.0, -1.0)],
        );
        let (out, centroid, scale) = normalize_unit_sphere(&cloud).unwrap();
        assert_relative_eq!(centroid.0, 0.0, epsilon = 1e-12);
        assert_relative_eq!(scale, 1.0, epsilon = 1e-12);
        for (a, b) in out.points.iter().zip(&cloud.points) {
            assert_relative_eq!(a.0, b.0, epsilon = 1e-12);
            assert_relative_eq!(a.1, b.1, epsilon = 1e-12);
        }
    }

    #[test]
    fn straight_wall_is_all_planar() {
        // Evenly spaced points on a wall 2 m ahead: symmetric differences cancel.
        let pts: Vec<(f64, f64)> = (0..21).map(|i| (2.0, -1.0 + 0.1 * i as f64)).collect();
        let cloud = PointCloud2::new(0.0, pts);
        let cfg = PreprocessConfig {
            curvature_neighborhood: 3,
            sigma_t: 0.05,
            curvature_mode: CurvatureMode::NormOfSum,
            wrap_scan: false,
            ..PreprocessConfig::default()
        };
        let f = extract_features(&cloud, &cfg);
        assert!(f.edges.is_empty());
        assert_eq!(f.planars.len(), 21 - 6);
        for sigma in &f.curvatures {
            assert!(*sigma < 1e-10, "wall curvature should vanish, got {sigma}");
        }
    }

    #[test]
    fn corner_point_has_highest_curvature() {
        // 9-point right-angle corner; oracle: brute-force statistic per point.
        let mut pts: Vec<(f64, f64)> = (0..5).map(|i| (2.0, -0.4 + 0.1 * i as f64)).collect();
        pts.extend((1..5).map(|i| (2.0 + 0.1 * i as f64, 0.0)));
        let cloud = PointCloud2::new(0.0, pts.clone());
        let cfg = PreprocessConfig {
            curvature_neighborhood: 2,
            sigma_t: f64::INFINITY, // classify nothing as edge; just read sigmas
            curvature_mode: CurvatureMode::NormOfSum,
            wrap_scan: false,
            ..PreprocessConfig::default()
        };
        let f = extract_features(&cloud, &cfg);
        // Interior indices 2..=6; corner point (2.0, 0.0) is index 4 -> sigma slot 2.
        let corner_sigma = f.curvatures[2];
        for (slot, sigma) in f.curvatures.iter().enumerate() {
            if slot != 2 {
                assert!(
                    corner_sigma > *sigma,
                    "corner sigma {corner_sigma} not above neighbor {sigma}"
                );
            }
        }
        // Cross-check the corner value against a direct evaluation.
        let direct = {
            let (xn, yn) = pts[4];
            let (mut dx, mut dy) = (0.0, 0.0);
            for j in [2usize, 3, 5, 6] {
                dx += pts[j].0 - xn;
                dy += pts[j].1 - yn;
            }
            (dx * dx + dy * dy).sqrt() / (4.0 * (xn * xn + yn * yn).sqrt())
        };
        assert_relative_eq!(corner_sigma, direct, epsilon = 1e-12);
    }

    #[test]
    fn sum_of_norms_on_collinear_points() {
        // 5 points spacing d, half-width 2: interior sigma = (2d + d + d + 2d)/4.
        let d = 0.25;
        let pts: Vec<(f64, f64)> = (0..5).map(|i| (1.0 + d * i as f64, 0.0)).collect();
        let cloud = PointCloud2::new(0.0, pts);
        let cfg = PreprocessConfig {
            curvature_neighborhood: 2,
            curvature_mode: CurvatureMode::SumOfNorms,
            sigma_t: f64::INFINITY,
            wrap_scan: false,
            ..PreprocessConfig::default()
        };
        let f = extract_features(&cloud, &cfg);
        assert_eq!(f.curvatures.len(), 1);
        assert_relative_eq!(f.curvatures[0], 1.5 * d, epsilon = 1e-12);
    }

    #[test]
    fn features_partition_interior_points() {
        let pts: Vec<(f64, f64)> = (0..50)
            .map(|i| {
                let a = 0.05 * i as f64;
                (3.0 + (a * 7.3).sin() * 0.2, a)
            })
            .collect();
        let cloud = PointCloud2::new(0.0, pts);
        let cfg = PreprocessConfig {
            wrap_scan: false,
            ..PreprocessConfig::default()
        };
        let f = extract_features(&cloud, &cfg);
        let interior = cloud.points.len() - 2 * cfg.curvature_neighborhood;
        assert_eq!(f.edges.len() + f.planars.len(), interior);
        assert_eq!(f.curvatures.len(), interior);
    }

    #[test]
    fn too_small_cloud_flags_and_returns_empty() {
        let cloud = PointCloud2::new(0.0, vec![(1.0, 0.0), (1.0, 0.1)]);
        let f = extract_features(&cloud, &PreprocessConfig::default());
        assert!(f.too_small);
        assert!(f.is_empty());
    }
}
