//! SE(2) pose graph: construction from a trajectory plus landmark
//! co-observations, and plain-text dump/load.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::Matrix3;

use super::alignment::estimate_alignment;
use crate::geometry::PoseSE2;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseNode {
    pub id: u64,
    pub timestamp: f64,
    pub pose: PoseSE2,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PoseEdge {
    pub from: u64,
    pub to: u64,
    /// Measured relative pose of `to` in `from`'s frame.
    pub measurement: PoseSE2,
    pub information: Matrix3<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct PoseGraph {
    pub nodes: Vec<PoseNode>,
    pub edges: Vec<PoseEdge>,
}

impl PoseGraph {
    /// Every node reachable from node 0 along edges (either direction).
    pub fn check_connected(&self) -> Result<()> {
        if self.nodes.is_empty() {
            return Ok(());
        }
        let index: HashMap<u64, usize> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id, i))
            .collect();
        let mut adj: Vec<Vec<usize>> = vec![Vec::new(); self.nodes.len()];
        for e in &self.edges {
            let (a, b) = (index[&e.from], index[&e.to]);
            adj[a].push(b);
            adj[b].push(a);
        }
        let mut seen = vec![false; self.nodes.len()];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for &j in &adj[i] {
                if !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        match seen.iter().position(|s| !s) {
            None => Ok(()),
            Some(i) => Err(Error::DisconnectedGraph(self.nodes[i].id)),
        }
    }
}

/// Graph construction tuning.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct GraphConfig {
    /// Odometry translation std (m) used for edge information.
    pub odom_sigma_xy: f64,
    /// Odometry rotation std (rad).
    pub odom_sigma_theta: f64,
    /// Landmark-alignment measurement stds for revisit edges.
    pub revisit_sigma_xy: f64,
    pub revisit_sigma_theta: f64,
    /// Minimum node separation for a revisit edge.
    pub revisit_min_gap: usize,
    /// At most this many revisit edges terminate at any node.
    pub revisit_max_per_node: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            odom_sigma_xy: 0.05,
            odom_sigma_theta: 0.01,
            revisit_sigma_xy: 0.1,
            revisit_sigma_theta: 0.02,
            revisit_min_gap: 20,
            revisit_max_per_node: 1,
        }
    }
}

fn diag_information(sigma_xy: f64, sigma_theta: f64) -> Matrix3<f64> {
    Matrix3::from_diagonal(&nalgebra::Vector3::new(
        1.0 / (sigma_xy * sigma_xy),
        1.0 / (sigma_xy * sigma_xy),
        1.0 / (sigma_theta * sigma_theta),
    ))
}

/// Build the graph: consecutive odometry edges, plus a revisit edge
/// whenever two sufficiently separated nodes co-observe at least two
/// confirmed static landmarks. The revisit measurement comes from
/// rigidly aligning the later node's sensor-frame landmark centers onto
/// the earlier node's.
///
/// `observations[i]` lists (landmark id, sensor-frame center) seen at
/// node i, restricted to confirmed static landmarks.
pub fn build_pose_graph(
    poses: &[(f64, PoseSE2)],
    observations: &[Vec<(u64, (f64, f64))>],
    cfg: &GraphConfig,
) -> Result<PoseGraph> {
    assert_eq!(poses.len(), observations.len());
    let mut graph = PoseGraph::default();
    for (i, (t, p)) in poses.iter().enumerate() {
        graph.nodes.push(PoseNode {
            id: i as u64,
            timestamp: *t,
            pose: *p,
        });
    }
    let odom_info = diag_information(cfg.odom_sigma_xy, cfg.odom_sigma_theta);
    for i in 1..poses.len() {
        graph.edges.push(PoseEdge {
            from: (i - 1) as u64,
            to: i as u64,
            measurement: poses[i - 1].1.between(&poses[i].1),
            information: odom_info,
        });
    }

    // Revisit edges: earliest co-observing node wins, capped per node.
    let revisit_info = diag_information(cfg.revisit_sigma_xy, cfg.revisit_sigma_theta);
    let mut edges_at: Vec<usize> = vec![0; poses.len()];
    for j in 0..poses.len() {
        if observations[j].len() < 2 {
            continue;
        }
        let ids_j: HashMap<u64, (f64, f64)> = observations[j].iter().copied().collect();
        for i in 0..j.saturating_sub(cfg.revisit_min_gap.max(1) - 1) {
            if edges_at[i] >= cfg.revisit_max_per_node || edges_at[j] >= cfg.revisit_max_per_node {
                continue;
            }
            let shared: Vec<((f64, f64), (f64, f64))> = observations[i]
                .iter()
                .filter_map(|(id, ci)| ids_j.get(id).map(|cj| (*cj, *ci)))
                .collect();
            if shared.len() < 2 {
                continue;
            }
            // Align node j's sensor points onto node i's: z_ij = pose of j in i.
            if let Ok(alignment) = estimate_alignment(&shared) {
                if alignment.translation_only {
                    continue;
                }
                graph.edges.push(PoseEdge {
                    from: i as u64,
                    to: j as u64,
                    measurement: alignment.pose,
                    information: revisit_info,
                });
                edges_at[i] += 1;
                edges_at[j] += 1;
                break;
            }
        }
    }

    graph.check_connected()?;
    Ok(graph)
}

/// Write the graph as plain text, one record per line:
/// `VERTEX_SE2 id x y theta` and `EDGE_SE2 from to dx dy dtheta` followed
/// by the upper-triangular information entries (i11 i12 i13 i22 i23 i33).
pub fn save_pose_graph(graph: &PoseGraph, path: &Path) -> Result<()> {
    let mut out = String::new();
    out.push_str("# format_version: 1\n");
    for n in &graph.nodes {
        out.push_str(&format!(
            "VERTEX_SE2 {} {} {} {}\n",
            n.id, n.pose.x, n.pose.y, n.pose.theta
        ));
    }
    for e in &graph.edges {
        let m = &e.information;
        out.push_str(&format!(
            "EDGE_SE2 {} {} {} {} {} {} {} {} {} {} {}\n",
            e.from,
            e.to,
            e.measurement.x,
            e.measurement.y,
            e.measurement.theta,
            m[(0, 0)],
            m[(0, 1)],
            m[(0, 2)],
            m[(1, 1)],
            m[(1, 2)],
            m[(2, 2)],
        ));
    }
    let tmp = path.with_extension("tmp");
    std::fs::File::create(&tmp)?.write_all(out.as_bytes())?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_pose_graph(path: &Path) -> Result<PoseGraph> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut graph = PoseGraph::default();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let num = |s: &str, what: &str| -> Result<f64> {
            s.parse::<f64>()
                .map_err(|_| parse_err(lineno + 1, format!("bad {what}: {s}")))
        };
        match fields[0] {
            "VERTEX_SE2" => {
                if fields.len() != 5 {
                    return Err(parse_err(lineno + 1, "VERTEX_SE2 needs 4 fields".into()));
                }
                graph.nodes.push(PoseNode {
                    id: fields[1]
                        .parse()
                        .map_err(|_| parse_err(lineno + 1, format!("bad id: {}", fields[1])))?,
                    timestamp: 0.0,
                    pose: PoseSE2::new(
                        num(fields[2], "x")?,
                        num(fields[3], "y")?,
                        num(fields[4], "theta")?,
                    ),
                });
            }
            "EDGE_SE2" => {
                if fields.len() != 12 {
                    return Err(parse_err(lineno + 1, "EDGE_SE2 needs 11 fields".into()));
                }
                let vals: Vec<f64> = fields[3..]
                    .iter()
                    .map(|s| num(s, "edge value"))
                    .collect::<Result<_>>()?;
                let mut info = Matrix3::zeros();
                info[(0, 0)] = vals[3];
                info[(0, 1)] = vals[4];
                info[(1, 0)] = vals[4];
                info[(0, 2)] = vals[5];
                info[(2, 0)] = vals[5];
                info[(1, 1)] = vals[6];
                info[(1, 2)] = vals[7];
                info[(2, 1)] = vals[7];
                info[(2, 2)] = vals[8];
                graph.edges.push(PoseEdge {
                    from: fields[1]
                        .parse()
                        .map_err(|_| parse_err(lineno + 1, format!("bad id: {}", fields[1])))?,
                    to: fields[2]
                        .parse()
                        .map_err(|_| parse_err(lineno + 1, format!("bad id: {}", fields[2])))?,
                    measurement: PoseSE2::new(vals[0], vals[1], vals[2]),
                    information: info,
                });
            }
            other => {
                return Err(parse_err(lineno + 1, format!("unknown record: {other}")));
            }
        }
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_poses_one_edge() {
        let poses = vec![(0.0, PoseSE2::identity()), (1.0, PoseSE2::new(1.0, 0.0, 0.0))];
        let obs = vec![vec![], vec![]];
        let g = build_pose_graph(&poses, &obs, &GraphConfig::default()).unwrap();
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges.len(), 1);
        assert_eq!(g.edges[0].measurement, PoseSE2::new(1.0, 0.0, 0.0));
    }

    #[test]
    fn no_landmarks_gives_pure_odometry_chain() {
        let poses: Vec<(f64, PoseSE2)> = (0..10)
            .map(|i| (i as f64, PoseSE2::new(i as f64 * 0.5, 0.0, 0.0)))
            .collect();
        let obs = vec![vec![]; 10];
        let g = build_pose_graph(&poses, &obs, &GraphConfig::default()).unwrap();
        assert_eq!(g.edges.len(), 9);
        assert!(g.edges.iter().all(|e| e.to == e.from + 1));
    }

    #[test]
    fn revisit_of_shared_landmarks_adds_one_edge() {
        // Nodes 0 and 50 both observe landmarks 1, 2, 3.
        let n = 60;
        let poses: Vec<(f64, PoseSE2)> = (0..n)
            .map(|i| (i as f64, PoseSE2::new(i as f64 * 0.2, 0.0, 0.0)))
            .collect();
        let mut obs: Vec<Vec<(u64, (f64, f64))>> = vec![vec![]; n];
        obs[0] = vec![(1, (2.0, 1.0)), (2, (3.0, -1.0)), (3, (4.0, 0.5))];
        // Node 50 sits at x = 10; the same world landmarks in its frame.
        obs[50] = vec![
            (1, (2.0 - 10.0, 1.0)),
            (2, (3.0 - 10.0, -1.0)),
            (3, (4.0 - 10.0, 0.5)),
        ];
        let g = build_pose_graph(&poses, &obs, &GraphConfig::default()).unwrap();
        let revisit: Vec<&PoseEdge> = g.edges.iter().filter(|e| e.to != e.from + 1).collect();
        assert_eq!(revisit.len(), 1);
        assert_eq!((revisit[0].from, revisit[0].to), (0, 50));
        // Measured relative pose = 10 m forward.
        approx::assert_relative_eq!(revisit[0].measurement.x, 10.0, epsilon = 1e-9);
        approx::assert_relative_eq!(revisit[0].measurement.theta, 0.0, epsilon = 1e-9);
    }

    #[test]
    fn graph_round_trips_through_text_format() {
        let poses = vec![
            (0.0, PoseSE2::identity()),
            (1.0, PoseSE2::new(1.0, 0.2, 0.1)),
            (2.0, PoseSE2::new(2.0, 0.1, -0.2)),
        ];
        let obs = vec![vec![]; 3];
        let g = build_pose_graph(&poses, &obs, &GraphConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("graph.txt");
        save_pose_graph(&g, &path).unwrap();
        let loaded = load_pose_graph(&path).unwrap();
        assert_eq!(g.nodes.len(), loaded.nodes.len());
        assert_eq!(g.edges.len(), loaded.edges.len());
        for (a, b) in g.edges.iter().zip(&loaded.edges) {
            assert_eq!(a.measurement, b.measurement);
            assert_eq!(a.information, b.information);
        }
    }

    #[test]
    fn malformed_line_reports_position() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "VERTEX_SE2 0 0 0 0\nEDGE_SE2 not enough\n").unwrap();
        match load_pose_graph(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn disconnected_graph_is_detected() {
        let mut g = PoseGraph::default();
        for i in 0..3 {
            g.nodes.push(PoseNode {
                id: i,
                timestamp: 0.0,
                pose: PoseSE2::identity(),
            });
        }
        g.edges.push(PoseEdge {
            from: 0,
            to: 1,
            measurement: PoseSE2::identity(),
            information: Matrix3::identity(),
        });
        assert!(matches!(g.check_connected(), Err(Error::DisconnectedGraph(2))));
    }
}
