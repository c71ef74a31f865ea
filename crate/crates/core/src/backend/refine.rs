//! Global map polish: after pose-graph optimization, re-registers every
//! scan's features against the map built from all other scans and applies
//! one damped least-squares pass over per-scan SE(2) increments.

use nalgebra::{Matrix3, Vector3};

use crate::geometry::PoseSE2;
use crate::lio::{fit_line, MapIndex};
use crate::preprocess::{voxel_downsample, FeatureSet, PointCloud2};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct RefineConfig {
    /// Neighbors for the local line fit.
    pub knn_k: usize,
    /// Skip associations farther than this (m).
    pub max_assoc_dist: f64,
    /// Reject line fits with a worse eigenvalue ratio.
    pub line_quality_max: f64,
    /// Voxel size of the output map (m).
    pub voxel_cell: f64,
    /// Damped Gauss-Newton iterations per scan.
    pub iterations: usize,
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            knn_k: 5,
            max_assoc_dist: 0.5,
            line_quality_max: 0.1,
            voxel_cell: 0.1,
            iterations: 3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RefineResult {
    pub poses: Vec<PoseSE2>,
    pub map: PointCloud2,
    /// Mean squared point-to-line distance before and after the polish.
    pub cost_before: f64,
    pub cost_after: f64,
}

fn project(pose: &PoseSE2, features: &FeatureSet) -> Vec<Vector3<f64>> {
    features
        .edges
        .iter()
        .chain(features.planars.iter())
        .map(|&(x, y)| {
            let w = pose.transform((x, y));
            Vector3::new(w.0, w.1, 0.0)
        })
        .collect()
}

/// Mean squared distance of one scan's projected points to lines fitted
/// from the other scans' map points; returns the per-point terms.
fn scan_residuals(
    points_world: &[Vector3<f64>],
    index: &MapIndex,
    own_scan: u32,
    scan_of: &[u32],
    cfg: &RefineConfig,
) -> Vec<(usize, Vector3<f64>, f64)> {
    // (point idx, line normal (x, y) + offset encoded, residual)
    let mut out = Vec::new();
    let mut neighborhood = Vec::with_capacity(cfg.knn_k);
    for (pi, p) in points_world.iter().enumerate() {
        // Over-query: own-scan points interleave with the rest and are
        // filtered out below.
        let nn = index.knn(p, cfg.knn_k * 3 + 4);
        neighborhood.clear();
        for (id, d) in &nn {
            if scan_of[*id] != own_scan && *d <= cfg.max_assoc_dist {
                neighborhood.push(index.point(*id));
                if neighborhood.len() == cfg.knn_k {
                    break;
                }
            }
        }
        if neighborhood.len() < cfg.knn_k {
            continue;
        }
        if let Some(line) = fit_line(&neighborhood) {
            if line.fit_quality > cfg.line_quality_max {
                continue;
            }
            let z = line.normal.dot(&(p - line.point));
            out.push((pi, Vector3::new(line.normal.x, line.normal.y, line.normal.dot(&line.point)), z));
        }
    }
    out
}

/// One polish pass. Reference lines come from the map excluding the scan
/// being refined, so a single scan (no cross-scan terms) is a no-op.
/// Each scan's increment is accepted only if it reduces that scan's
/// mean squared residual.
pub fn refine_global_map(
    poses: &[PoseSE2],
    features: &[FeatureSet],
    cfg: &RefineConfig,
) -> RefineResult {
    assert_eq!(poses.len(), features.len());
    let mut refined: Vec<PoseSE2> = poses.to_vec();

    // World map from the optimized poses, tagged with the source scan.
    let build_index = |poses: &[PoseSE2]| -> (MapIndex, Vec<u32>) {
        let mut index = MapIndex::new(0.5);
        let mut scan_of = Vec::new();
        for (si, (pose, fs)) in poses.iter().zip(features).enumerate() {
            for p in project(pose, fs) {
                index.insert(p);
                scan_of.push(si as u32);
            }
        }
        (index, scan_of)
    };
    let (index, scan_of) = build_index(&refined);

    let scan_cost = |pose: &PoseSE2, si: usize| -> (f64, usize) {
        let pts = project(pose, &features[si]);
        let res = scan_residuals(&pts, &index, si as u32, &scan_of, cfg);
        if res.is_empty() {
            return (0.0, 0);
        }
        let sum: f64 = res.iter().map(|(_, _, z)| z * z).sum();
        (sum / res.len() as f64, res.len())
    };

    let mut cost_before = 0.0;
    let mut cost_after = 0.0;
    let mut counted = 0usize;

    for si in 0..refined.len() {
        let (before, n_before) = scan_cost(&refined[si], si);
        if n_before > 0 {
            cost_before += before * n_before as f64;
            counted += n_before;
        }
        let mut pose = refined[si];
        for _ in 0..cfg.iterations {
            let sensor: Vec<(f64, f64)> = features[si]
                .edges
                .iter()
                .chain(features[si].planars.iter())
                .copied()
                .collect();
            let world = project(&pose, &features[si]);
            let res = scan_residuals(&world, &index, si as u32, &scan_of, cfg);
            if res.len() < cfg.knn_k {
                break;
            }
            // Damped normal equations over (dx, dy, dtheta).
            let (s, c) = pose.theta.sin_cos();
            let mut h = Matrix3::<f64>::zeros();
            let mut b = Vector3::<f64>::zeros();
            for (pi, line, z) in &res {
                let (px, py) = sensor[*pi];
                // d(world)/dtheta = dR/dtheta * p
                let dwx = -s * px - c * py;
                let dwy = c * px - s * py;
                let j = Vector3::new(line.x, line.y, line.x * dwx + line.y * dwy);
                h += j * j.transpose();
                b += j * *z;
            }
            for d in 0..3 {
                h[(d, d)] += 1e-6;
            }
            let step = match h.cholesky() {
                Some(chol) => -(chol.solve(&b)),
                None => break,
            };
            let candidate = PoseSE2::new(pose.x + step.x, pose.y + step.y, pose.theta + step.z);
            let (cand_cost, _) = scan_cost(&candidate, si);
            let (cur_cost, _) = scan_cost(&pose, si);
            if cand_cost < cur_cost {
                pose = candidate;
            } else {
                break;
            }
            if step.norm() < 1e-10 {
                break;
            }
        }
        refined[si] = pose;
        let (after, n_after) = scan_cost(&pose, si);
        if n_after > 0 {
            cost_after += after * n_after as f64;
        }
    }

    // Final map from the refined poses.
    let mut all_points = Vec::new();
    for (pose, fs) in refined.iter().zip(features) {
        for p in project(pose, fs) {
            all_points.push((p.x, p.y));
        }
    }
    let map = voxel_downsample(&PointCloud2::new(0.0, all_points), cfg.voxel_cell);

    let denom = counted.max(1) as f64;
    RefineResult {
        poses: refined,
        map,
        cost_before: cost_before / denom,
        cost_after: cost_after / denom,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn wall_features(offset: (f64, f64), theta: f64, n: usize) -> FeatureSet {
        // A wall along y = 1 in the world, sampled in a sensor frame at
        // `offset`/theta: sensor points = R^T (w - t).
        let pose = PoseSE2::new(offset.0, offset.1, theta);
        let inv = pose.inverse();
        let planars: Vec<(f64, f64)> = (0..n)
            .map(|i| {
                let w = (i as f64 * 0.08, 1.0);
                inv.transform(w)
            })
            .collect();
        FeatureSet {
            edges: vec![],
            planars,
            curvatures: vec![0.0; n],
            too_small: false,
        }
    }

    #[test]
    fn single_scan_is_untouched() {
        let fs = wall_features((0.0, 0.0), 0.0, 50);
        let poses = vec![PoseSE2::identity()];
        let out = refine_global_map(&poses, &[fs.clone()], &RefineConfig::default());
        assert_eq!(out.poses[0], PoseSE2::identity());
        assert_eq!(out.map.len(), {
            let pts: Vec<(f64, f64)> = fs.planars.clone();
            voxel_downsample(&PointCloud2::new(0.0, pts), 0.1).len()
        });
    }

    #[test]
    fn consistent_scans_take_zero_step() {
        let a = wall_features((0.0, 0.0), 0.0, 50);
        let b = wall_features((0.5, 0.0), 0.0, 50);
        let poses = vec![PoseSE2::identity(), PoseSE2::new(0.5, 0.0, 0.0)];
        let out = refine_global_map(&poses, &[a, b], &RefineConfig::default());
        assert!((out.poses[1].x - 0.5).abs() < 1e-9);
        assert!(out.poses[1].y.abs() < 1e-9);
        assert!(out.cost_after <= out.cost_before + 1e-15);
    }

    #[test]
    fn perturbed_scan_moves_back_toward_the_wall() {
        let a = wall_features((0.0, 0.0), 0.0, 60);
        let b = wall_features((0.5, 0.0), 0.0, 60);
        // Pose of scan b is perturbed laterally: its wall points project
        // off the line y = 1.
        let poses = vec![PoseSE2::identity(), PoseSE2::new(0.5, 0.07, 0.0)];
        let features = [a, b.clone()];
        let out = refine_global_map(&poses, &features, &RefineConfig::default());
        assert!(out.cost_after < out.cost_before);

        // RMS distance of scan b's points to the true wall must not grow.
        let rms = |pose: &PoseSE2| -> f64 {
            let pts = project(pose, &b);
            (pts.iter().map(|p| (p.y - 1.0).powi(2)).sum::<f64>() / pts.len() as f64).sqrt()
        };
        assert!(rms(&out.poses[1]) <= rms(&poses[1]) + 1e-12);
    }
}
