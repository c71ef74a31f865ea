//! Levenberg-Marquardt optimization of an SE(2) pose graph with the
//! first node held fixed as the gauge.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use super::graph::PoseGraph;
use crate::geometry::PoseSE2;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LmConfig {
    pub lambda_init: f64,
    /// Multiplier applied to lambda after a rejected step (> 1).
    pub lambda_up: f64,
    /// Divisor applied to lambda after an accepted step (> 1).
    pub lambda_down: f64,
    pub max_iterations: usize,
    /// Stop when the relative cost decrease falls below this.
    pub cost_tol: f64,
    /// Stop when the step norm falls below this.
    pub step_tol: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self {
            lambda_init: 1e-4,
            lambda_up: 10.0,
            lambda_down: 10.0,
            max_iterations: 50,
            cost_tol: 1e-10,
            step_tol: 1e-10,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OptimizeResult {
    pub poses: Vec<PoseSE2>,
    pub initial_cost: f64,
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn wrap(theta: f64) -> f64 {
    let mut a = theta % std::f64::consts::TAU;
    if a > std::f64::consts::PI {
        a -= std::f64::consts::TAU;
    } else if a <= -std::f64::consts::PI {
        a += std::f64::consts::TAU;
    }
    a
}

/// Edge error e = t2v(Z^-1 (X_i^-1 X_j)) with the angle wrapped.
fn edge_error(xi: &PoseSE2, xj: &PoseSE2, z: &PoseSE2) -> Vector3<f64> {
    let pred = xi.between(xj);
    let (zs, zc) = z.theta.sin_cos();
    let dx = pred.x - z.x;
    let dy = pred.y - z.y;
    Vector3::new(
        zc * dx + zs * dy,
        -zs * dx + zc * dy,
        wrap(pred.theta - z.theta),
    )
}

/// Analytic Jacobians of the edge error w.r.t. x_i and x_j.
fn edge_jacobians(xi: &PoseSE2, xj: &PoseSE2, z: &PoseSE2) -> (Matrix3<f64>, Matrix3<f64>) {
    let (si, ci) = xi.theta.sin_cos();
    let (sz, cz) = z.theta.sin_cos();
    // R_z^T R_i^T
    let r_zt_rit = {
        // R_i^T
        let r_it = nalgebra::Matrix2::new(ci, si, -si, ci);
        let r_zt = nalgebra::Matrix2::new(cz, sz, -sz, cz);
        r_zt * r_it
    };
    // d(R_i^T)/d theta_i applied to (t_j - t_i)
    let dtx = xj.x - xi.x;
    let dty = xj.y - xi.y;
    let d_rit = nalgebra::Matrix2::new(-si, ci, -ci, -si);
    let r_zt = nalgebra::Matrix2::new(cz, sz, -sz, cz);
    let dtheta_col = r_zt * (d_rit * nalgebra::Vector2::new(dtx, dty));

    let mut a = Matrix3::zeros();
    a.fixed_view_mut::<2, 2>(0, 0).copy_from(&(-r_zt_rit));
    a[(0, 2)] = dtheta_col.x;
    a[(1, 2)] = dtheta_col.y;
    a[(2, 2)] = -1.0;

    let mut b = Matrix3::zeros();
    b.fixed_view_mut::<2, 2>(0, 0).copy_from(&r_zt_rit);
    b[(2, 2)] = 1.0;
    (a, b)
}

/// Total weighted squared error of the graph at the given poses.
pub fn graph_cost(graph: &PoseGraph, poses: &[PoseSE2], index: &HashMap<u64, usize>) -> f64 {
    graph
        .edges
        .iter()
        .map(|e| {
            let err = edge_error(&poses[index[&e.from]], &poses[index[&e.to]], &e.measurement);
            (err.transpose() * e.information * err)[(0, 0)]
        })
        .sum()
}

/// Minimize the pose-graph objective by damped Gauss-Newton (LM).
///
/// Node 0 is the gauge and never moves. Steps are accepted only when the
/// cost decreases, so the reported cost never increases across accepted
/// iterations; rejected steps raise lambda and retry. Repeated solve
/// failures return the best iterate with `converged = false`.
pub fn optimize(graph: &PoseGraph, cfg: &LmConfig) -> crate::Result<OptimizeResult> {
    graph.check_connected()?;
    let n = graph.nodes.len();
    let index: HashMap<u64, usize> = graph
        .nodes
        .iter()
        .enumerate()
        .map(|(i, node)| (node.id, i))
        .collect();
    let mut poses: Vec<PoseSE2> = graph.nodes.iter().map(|n| n.pose).collect();
    let initial_cost = graph_cost(graph, &poses, &index);
    if n <= 1 {
        return Ok(OptimizeResult {
            poses,
            initial_cost,
            final_cost: initial_cost,
            iterations: 0,
            converged: true,
        });
    }

    let dof = 3 * (n - 1); // node 0 fixed
    let mut lambda = cfg.lambda_init;
    let mut cost = initial_cost;
    let mut converged = false;
    let mut iterations = 0;
    let mut consecutive_failures = 0;

    for _ in 0..cfg.max_iterations {
        iterations += 1;
        // Build the normal equations at the current iterate.
        let mut h = DMatrix::<f64>::zeros(dof, dof);
        let mut bvec = DVector::<f64>::zeros(dof);
        for e in &graph.edges {
            let (i, j) = (index[&e.from], index[&e.to]);
            let err = edge_error(&poses[i], &poses[j], &e.measurement);
            let (ja, jb) = edge_jacobians(&poses[i], &poses[j], &e.measurement);
            let omega = &e.information;
            // Offsets into the reduced system (node 0 removed).
            let oi = i.checked_sub(1).map(|k| 3 * k);
            let oj = j.checked_sub(1).map(|k| 3 * k);
            if let Some(oi) = oi {
                let hii = ja.transpose() * omega * ja;
                let bi = ja.transpose() * omega * err;
                for r in 0..3 {
                    for c in 0..3 {
                        h[(oi + r, oi + c)] += hii[(r, c)];
                    }
                    bvec[oi + r] += bi[r];
                }
            }
            if let Some(oj) = oj {
                let hjj = jb.transpose() * omega * jb;
                let bj = jb.transpose() * omega * err;
                for r in 0..3 {
                    for c in 0..3 {
                        h[(oj + r, oj + c)] += hjj[(r, c)];
                    }
                    bvec[oj + r] += bj[r];
                }
            }
            if let (Some(oi), Some(oj)) = (oi, oj) {
                let hij = ja.transpose() * omega * jb;
                for r in 0..3 {
                    for c in 0..3 {
                        h[(oi + r, oj + c)] += hij[(r, c)];
                        h[(oj + c, oi + r)] += hij[(r, c)];
                    }
                }
            }
        }

        // Damped solve; raise lambda until a step is accepted.
        let mut accepted = false;
        for _ in 0..8 {
            let mut damped = h.clone();
            for d in 0..dof {
                damped[(d, d)] += lambda * h[(d, d)].max(1e-9);
            }
            let step = match damped.cholesky() {
                Some(chol) => chol.solve(&(-&bvec)),
                None => {
                    lambda *= cfg.lambda_up;
                    continue;
                }
            };
            let mut candidate = poses.clone();
            for k in 1..n {
                let o = 3 * (k - 1);
                candidate[k] = PoseSE2::new(
                    poses[k].x + step[o],
                    poses[k].y + step[o + 1],
                    poses[k].theta + step[o + 2],
                );
            }
            let new_cost = graph_cost(graph, &candidate, &index);
            if new_cost <= cost {
                let cost_drop = cost - new_cost;
                let step_norm = step.norm();
                poses = candidate;
                cost = new_cost;
                lambda = (lambda / cfg.lambda_down).max(1e-12);
                accepted = true;
                consecutive_failures = 0;
                if cost_drop <= cfg.cost_tol * cost.max(1.0) || step_norm <= cfg.step_tol {
                    converged = true;
                }
                break;
            }
            lambda *= cfg.lambda_up;
        }
        if !accepted {
            consecutive_failures += 1;
            if consecutive_failures >= 2 {
                break; // stuck: return best-so-far, converged stays false
            }
        }
        if converged {
            break;
        }
    }

    Ok(OptimizeResult {
        poses,
        initial_cost,
        final_cost: cost,
        iterations,
        converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backend::graph::{PoseEdge, PoseNode};
    use approx::assert_relative_eq;

    fn node(id: u64, x: f64, y: f64, theta: f64) -> PoseNode {
        PoseNode {
            id,
            timestamp: id as f64,
            pose: PoseSE2::new(x, y, theta),
        }
    }

    fn edge(from: u64, to: u64, z: PoseSE2, sigma: f64) -> PoseEdge {
        PoseEdge {
            from,
            to,
            measurement: z,
            information: Matrix3::identity() / (sigma * sigma),
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let xi = PoseSE2::new(0.4, -0.7, 0.6);
        let xj = PoseSE2::new(1.3, 0.5, -0.9);
        let z = PoseSE2::new(0.8, 0.9, -1.2);
        let (ja, jb) = edge_jacobians(&xi, &xj, &z);
        let eps = 1e-7;
        for k in 0..3 {
            let mut xi_p = [xi.x, xi.y, xi.theta];
            xi_p[k] += eps;
            let mut xi_m = [xi.x, xi.y, xi.theta];
            xi_m[k] -= eps;
            let ep = edge_error(&PoseSE2::new(xi_p[0], xi_p[1], xi_p[2]), &xj, &z);
            let em = edge_error(&PoseSE2::new(xi_m[0], xi_m[1], xi_m[2]), &xj, &z);
            let fd = (ep - em) / (2.0 * eps);
            for r in 0..3 {
                assert_relative_eq!(fd[r], ja[(r, k)], epsilon = 1e-6, max_relative = 1e-6);
            }

            let mut xj_p = [xj.x, xj.y, xj.theta];
            xj_p[k] += eps;
            let mut xj_m = [xj.x, xj.y, xj.theta];
            xj_m[k] -= eps;
            let ep = edge_error(&xi, &PoseSE2::new(xj_p[0], xj_p[1], xj_p[2]), &z);
            let em = edge_error(&xi, &PoseSE2::new(xj_m[0], xj_m[1], xj_m[2]), &z);
            let fd = (ep - em) / (2.0 * eps);
            for r in 0..3 {
                assert_relative_eq!(fd[r], jb[(r, k)], epsilon = 1e-6, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn noise_free_graph_recovers_truth_from_perturbed_guess() {
        // Ground truth square path, consistent edges, initial guess perturbed.
        let truth = [
            PoseSE2::new(0.0, 0.0, 0.0),
            PoseSE2::new(2.0, 0.0, std::f64::consts::FRAC_PI_2),
            PoseSE2::new(2.0, 2.0, std::f64::consts::PI),
            PoseSE2::new(0.0, 2.0, -std::f64::consts::FRAC_PI_2),
        ];
        let mut graph = PoseGraph::default();
        for (i, p) in truth.iter().enumerate() {
            let perturbed = if i == 0 {
                *p
            } else {
                PoseSE2::new(p.x + 0.3, p.y - 0.2, p.theta + 0.2)
            };
            graph.nodes.push(PoseNode {
                id: i as u64,
                timestamp: i as f64,
                pose: perturbed,
            });
        }
        for i in 0..3 {
            graph.edges.push(edge(
                i as u64,
                i as u64 + 1,
                truth[i].between(&truth[i + 1]),
                0.1,
            ));
        }
        graph.edges.push(edge(0, 3, truth[0].between(&truth[3]), 0.1));

        let out = optimize(&graph, &LmConfig::default()).unwrap();
        assert!(out.converged);
        assert!(out.final_cost < 1e-16, "final cost {}", out.final_cost);
        for (got, want) in out.poses.iter().zip(&truth) {
            assert_relative_eq!(got.x, want.x, epsilon = 1e-6);
            assert_relative_eq!(got.y, want.y, epsilon = 1e-6);
            assert_relative_eq!(got.theta, want.theta, epsilon = 1e-6);
        }
    }

    #[test]
    fn single_node_graph_is_returned_unchanged() {
        let mut graph = PoseGraph::default();
        graph.nodes.push(node(0, 1.0, 2.0, 0.5));
        let out = optimize(&graph, &LmConfig::default()).unwrap();
        assert_eq!(out.poses, vec![PoseSE2::new(1.0, 2.0, 0.5)]);
        assert!(out.converged);
    }

    #[test]
    fn cost_never_increases() {
        // Inconsistent noisy triangle.
        let mut graph = PoseGraph::default();
        graph.nodes.push(node(0, 0.0, 0.0, 0.0));
        graph.nodes.push(node(1, 1.1, 0.2, 0.1));
        graph.nodes.push(node(2, 1.9, 1.2, 1.4));
        graph.edges.push(edge(0, 1, PoseSE2::new(1.0, 0.0, 0.0), 0.1));
        graph.edges.push(edge(1, 2, PoseSE2::new(1.0, 1.0, 1.2), 0.1));
        graph.edges.push(edge(0, 2, PoseSE2::new(2.05, 0.95, 1.35), 0.1));
        let out = optimize(&graph, &LmConfig::default()).unwrap();
        assert!(out.final_cost <= out.initial_cost);
    }

    #[test]
    fn gauge_invariance_of_relative_poses() {
        // Rigidly moving the whole problem leaves relative solutions intact.
        let base = {
            let mut graph = PoseGraph::default();
            graph.nodes.push(node(0, 0.0, 0.0, 0.0));
            graph.nodes.push(node(1, 1.05, 0.1, 0.05));
            graph.nodes.push(node(2, 2.2, -0.1, -0.1));
            graph.edges.push(edge(0, 1, PoseSE2::new(1.0, 0.0, 0.0), 0.1));
            graph.edges.push(edge(1, 2, PoseSE2::new(1.0, 0.0, 0.0), 0.1));
            graph.edges.push(edge(0, 2, PoseSE2::new(2.1, 0.05, 0.0), 0.1));
            graph
        };
        let shift = PoseSE2::new(5.0, -3.0, 0.7);
        let shifted = {
            let mut g = base.clone();
            for n in &mut g.nodes {
                n.pose = shift.compose(&n.pose);
            }
            g
        };
        let a = optimize(&base, &LmConfig::default()).unwrap();
        let b = optimize(&shifted, &LmConfig::default()).unwrap();
        for i in 0..2 {
            let rel_a = a.poses[i].between(&a.poses[i + 1]);
            let rel_b = b.poses[i].between(&b.poses[i + 1]);
            assert_relative_eq!(rel_a.x, rel_b.x, epsilon = 1e-9);
            assert_relative_eq!(rel_a.y, rel_b.y, epsilon = 1e-9);
            assert_relative_eq!(rel_a.theta, rel_b.theta, epsilon = 1e-9);
        }
    }
}
