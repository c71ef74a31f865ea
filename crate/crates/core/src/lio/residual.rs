//! Point-to-line measurement residuals and their Jacobian rows.

use nalgebra::{SVector, Vector3};

use super::{Extrinsics, IekfConfig, MapIndex};
use crate::geometry::{skew, NavState, ERROR_STATE_DIM};
use crate::preprocess::FeatureSet;

/// Local line fitted around a map neighborhood.
#[derive(Debug, Clone, Copy)]
pub struct MapLine {
    /// A point on the line (world frame; the neighborhood centroid).
    pub point: Vector3<f64>,
    /// In-plane unit normal of the line.
    pub normal: Vector3<f64>,
    /// Second/first eigenvalue ratio of the neighborhood; 0 is a perfect line.
    pub fit_quality: f64,
    /// Variance of the neighborhood across the line (m^2).
    pub across_variance: f64,
}

/// One scalar measurement: signed distance, Jacobian row, and noise.
#[derive(Debug, Clone)]
pub struct ResidualTerm {
    pub z: f64,
    pub h: SVector<f64, ERROR_STATE_DIM>,
    pub noise: f64,
}

/// PCA line fit over a set of world points (planar, z ignored).
pub fn fit_line(points: &[Vector3<f64>]) -> Option<MapLine> {
    if points.len() < 2 {
        return None;
    }
    let n = points.len() as f64;
    let mut cx = 0.0;
    let mut cy = 0.0;
    for p in points {
        cx += p.x;
        cy += p.y;
    }
    cx /= n;
    cy /= n;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let dx = p.x - cx;
        let dy = p.y - cy;
        sxx += dx * dx;
        sxy += dx * dy;
        syy += dy * dy;
    }
    sxx /= n;
    sxy /= n;
    syy /= n;

    // Closed-form symmetric 2x2 eigen-decomposition.
    let tr = sxx + syy;
    let det = sxx * syy - sxy * sxy;
    let disc = (tr * tr / 4.0 - det).max(0.0).sqrt();
    let l1 = tr / 2.0 + disc;
    let l2 = (tr / 2.0 - disc).max(0.0);
    if l1 < 1e-12 {
        return None; // neighborhood collapsed to a point
    }
    // Principal direction of the larger eigenvalue.
    let dir = if sxy.abs() > 1e-14 {
        let d = Vector3::new(l1 - syy, sxy, 0.0);
        d / d.norm()
    } else if sxx >= syy {
        Vector3::new(1.0, 0.0, 0.0)
    } else {
        Vector3::new(0.0, 1.0, 0.0)
    };
    Some(MapLine {
        point: Vector3::new(cx, cy, 0.0),
        normal: Vector3::new(-dir.y, dir.x, 0.0),
        fit_quality: l2 / l1,
        across_variance: l2,
    })
}

/// Residual of a world point against a line: mu^T (p - q).
pub fn point_to_line(line: &MapLine, p: &Vector3<f64>) -> f64 {
    line.normal.dot(&(p - line.point))
}

/// Build point-to-line residuals for every feature point.
///
/// Each feature is transformed to the world frame through the extrinsics
/// and the current state; the measurement row has nonzero blocks only on
/// the position and attitude tangent components.
pub fn compute_residuals(
    features: &FeatureSet,
    map_index: &MapIndex,
    state: &NavState,
    ext: &Extrinsics,
    cfg: &IekfConfig,
) -> Vec<ResidualTerm> {
    let mut out = Vec::new();
    let min_fit_points = cfg.knn_k.min(3);
    if map_index.len() < min_fit_points {
        return out;
    }
    let mut neighborhood = Vec::with_capacity(cfg.knn_k);
    for &(x, y) in features.edges.iter().chain(features.planars.iter()) {
        let p_lidar = Vector3::new(x, y, 0.0);
        let p_imu = ext.lidar_in_imu.rotation * p_lidar + ext.lidar_in_imu.translation;
        let p_world = state.rotation * p_imu + state.position;

        let nn = map_index.knn(&p_world, cfg.knn_k);
        if nn.is_empty() || nn[0].1 > cfg.max_assoc_dist {
            continue;
        }
        neighborhood.clear();
        neighborhood.extend(
            nn.iter()
                .filter(|(_, d)| *d <= cfg.neighborhood_radius)
                .map(|(id, _)| map_index.point(*id)),
        );
        if neighborhood.len() < min_fit_points {
            continue;
        }
        let line = match fit_line(&neighborhood) {
            Some(l) if l.fit_quality <= cfg.line_quality_max => l,
            _ => continue,
        };

        let z = point_to_line(&line, &p_world);
        let mut h = SVector::<f64, ERROR_STATE_DIM>::zeros();
        h.fixed_rows_mut::<3>(0).copy_from(&line.normal);
        let dtheta = -(line.normal.transpose() * state.rotation * skew(&p_imu)).transpose();
        h.fixed_rows_mut::<3>(6).copy_from(&dtheta);
        // The across-line variance of the neighborhood adds to the noise,
        // downweighting curved surfaces (pillar arcs) that a line fits badly.
        out.push(ResidualTerm {
            z,
            h,
            noise: cfg.measurement_noise + line.across_variance,
        });
    }
    out
}

/// Planar-motion pseudo-measurements: z-position, roll, and pitch held
/// at zero. These pin the directions a 2D scanner cannot observe.
pub fn planar_pseudo_residuals(state: &NavState, noise_var: f64) -> Vec<ResidualTerm> {
    let mut out = Vec::with_capacity(3);

    // z position
    let mut h = SVector::<f64, ERROR_STATE_DIM>::zeros();
    h[2] = 1.0;
    out.push(ResidualTerm {
        z: state.position.z,
        h,
        noise: noise_var,
    });

    // Tilt: x and y components of the body z axis expressed in the world.
    let ez = Vector3::z();
    let tilt_jac = -(state.rotation * skew(&ez));
    for row in 0..2 {
        let mut h = SVector::<f64, ERROR_STATE_DIM>::zeros();
        h.fixed_rows_mut::<3>(6)
            .copy_from(&tilt_jac.row(row).transpose());
        out.push(ResidualTerm {
            z: (state.rotation * ez)[row],
            h,
            noise: noise_var,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{boxplus, so3_exp, ErrorState};
    use crate::preprocess::FeatureSet;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn horizontal_line_map() -> MapIndex {
        // Points along y = 1.0.
        let points: Vec<Vector3<f64>> = (0..40)
            .map(|i| Vector3::new(i as f64 * 0.1, 1.0, 0.0))
            .collect();
        MapIndex::from_points(&points, 0.5)
    }

    fn feature_at(x: f64, y: f64) -> FeatureSet {
        FeatureSet {
            edges: vec![],
            planars: vec![(x, y)],
            curvatures: vec![0.0],
            too_small: false,
        }
    }

    #[test]
    fn point_on_line_has_zero_residual() {
        let map = horizontal_line_map();
        let res = compute_residuals(
            &feature_at(1.55, 1.0),
            &map,
            &NavState::stationary(),
            &Extrinsics::default(),
            &IekfConfig::default(),
        );
        assert_eq!(res.len(), 1);
        assert!(res[0].z.abs() < 1e-12);
    }

    #[test]
    fn offset_along_normal_gives_signed_distance() {
        let map = horizontal_line_map();
        let res = compute_residuals(
            &feature_at(1.55, 1.1),
            &map,
            &NavState::stationary(),
            &Extrinsics::default(),
            &IekfConfig::default(),
        );
        assert_eq!(res.len(), 1);
        assert_relative_eq!(res[0].z.abs(), 0.1, epsilon = 1e-9);
    }

    #[test]
    fn far_point_is_not_associated() {
        let map = horizontal_line_map();
        let res = compute_residuals(
            &feature_at(1.55, 5.0),
            &map,
            &NavState::stationary(),
            &Extrinsics::default(),
            &IekfConfig::default(),
        );
        assert!(res.is_empty());
    }

    #[test]
    fn poor_line_fit_is_rejected() {
        // An isotropic blob of map points has eigenvalue ratio near 1.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let points: Vec<Vector3<f64>> = (0..50)
            .map(|_| Vector3::new(rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5), 0.0))
            .collect();
        let map = MapIndex::from_points(&points, 0.5);
        let res = compute_residuals(
            &feature_at(0.0, 0.0),
            &map,
            &NavState::stationary(),
            &Extrinsics::default(),
            &IekfConfig::default(),
        );
        assert!(res.is_empty());
    }

    fn random_state(rng: &mut ChaCha8Rng) -> NavState {
        NavState {
            position: Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-0.1..0.1)),
            velocity: Vector3::new(rng.gen_range(-1.0..1.0), 0.0, 0.0),
            rotation: so3_exp(Vector3::new(
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.1..0.1),
                rng.gen_range(-3.0..3.0),
            )),
            gyro_bias: Vector3::zeros(),
            accel_bias: Vector3::zeros(),
            gravity: Vector3::new(0.0, 0.0, -9.81),
        }
    }

    /// Central finite differences of the residual stack over the 18-dim
    /// error state; associations are frozen by the tiny step size.
    fn check_jacobians_at(state: &NavState, features: &FeatureSet, map: &MapIndex, ext: &Extrinsics) {
        let cfg = IekfConfig::default();
        let base = compute_residuals(features, map, state, ext, &cfg);
        assert!(!base.is_empty());
        let eps = 1e-6;
        for j in 0..ERROR_STATE_DIM {
            let mut d = ErrorState::zeros();
            d[j] = eps;
            let plus = compute_residuals(features, map, &boxplus(state, &d), ext, &cfg);
            d[j] = -eps;
            let minus = compute_residuals(features, map, &boxplus(state, &d), ext, &cfg);
            assert_eq!(plus.len(), base.len());
            assert_eq!(minus.len(), base.len());
            for (i, term) in base.iter().enumerate() {
                let fd = (plus[i].z - minus[i].z) / (2.0 * eps);
                let analytic = term.h[j];
                let denom = fd.abs().max(analytic.abs()).max(1e-6);
                assert!(
                    (fd - analytic).abs() / denom < 1e-5,
                    "residual {i} d/dx_{j}: fd={fd}, analytic={analytic}"
                );
            }
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let map = horizontal_line_map();
        let ext = Extrinsics {
            lidar_in_imu: crate::geometry::PoseSE3::new(
                so3_exp(Vector3::new(0.0, 0.0, 0.3)),
                Vector3::new(0.1, -0.05, 0.0),
            ),
        };
        for _ in 0..5 {
            let state = random_state(&mut rng);
            // Feature that lands near the mapped line under this state.
            let target = Vector3::new(rng.gen_range(0.5..3.0), 1.0 + rng.gen_range(-0.2..0.2), 0.0);
            let p_imu = state.rotation.transpose() * (target - state.position);
            let p_lidar = ext.lidar_in_imu.inverse().rotation * p_imu
                + ext.lidar_in_imu.inverse().translation;
            let features = feature_at(p_lidar.x, p_lidar.y);
            check_jacobians_at(&state, &features, &map, &ext);
        }
    }

    #[test]
    fn pseudo_residual_jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let state = random_state(&mut rng);
            let base = planar_pseudo_residuals(&state, 1e-6);
            let eps = 1e-6;
            for j in 0..ERROR_STATE_DIM {
                let mut d = ErrorState::zeros();
                d[j] = eps;
                let plus = planar_pseudo_residuals(&boxplus(&state, &d), 1e-6);
                d[j] = -eps;
                let minus = planar_pseudo_residuals(&boxplus(&state, &d), 1e-6);
                for i in 0..base.len() {
                    let fd = (plus[i].z - minus[i].z) / (2.0 * eps);
                    let analytic = base[i].h[j];
                    assert!(
                        (fd - analytic).abs() < 1e-6,
                        "pseudo residual {i} d/dx_{j}: fd={fd}, analytic={analytic}"
                    );
                }
            }
        }
    }

    #[test]
    fn fit_line_recovers_direction_and_quality() {
        let points: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(i as f64, 2.0 + i as f64, 0.0))
            .collect();
        let line = fit_line(&points).unwrap();
        assert!(line.fit_quality < 1e-12);
        // Normal perpendicular to the diagonal direction.
        let dir = Vector3::new(1.0, 1.0, 0.0).normalize();
        assert!(line.normal.dot(&dir).abs() < 1e-9);
    }
}
