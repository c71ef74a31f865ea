//! Multi-stage pipeline driver. Stages run in a fixed order, each
//! persisting its artifacts; any stage can also load its inputs from a
//! previous run's artifacts, so separate stage invocations compose to
//! the same results as one fused run.

use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::UnitQuaternion;

use super::config::{DatasetBundle, RunConfig};
use super::formats;
use crate::backend::{
    build_pose_graph, fuse_step, optimize, refine_global_map, save_pose_graph, FusionConfig,
    LandmarkMap,
};
use crate::detector::{
    assemble_input, detect, load_checkpoint, preliminary_objects, DetectorInput, NetworkParams,
    TrainingSample, SLOT_SENTINEL,
};
use crate::eval::{ape, ate, MetricsReport, Trajectory};
use crate::geometry::{PoseSE2, PoseSE3};
use crate::lio::{Extrinsics, LioFilter};
use crate::orientation::{run_orientation_pipeline, ImuSample, OrientationEstimate};
use crate::preprocess::{
    extract_features, normalize_unit_sphere, remove_outliers, scan_to_cloud, voxel_downsample,
    FeatureSet, LaserScan, PointCloud2,
};
use crate::sim::{label_objects, simulate, Environment, SensorNoise, SimOutput, TrajectorySpec};
use crate::{Error, Result};

/// Pipeline stages in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Preprocess,
    Orientation,
    Odometry,
    Detect,
    Fuse,
    Graph,
    Refine,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Preprocess,
        Stage::Orientation,
        Stage::Odometry,
        Stage::Detect,
        Stage::Fuse,
        Stage::Graph,
        Stage::Refine,
        Stage::Evaluate,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Stage::Preprocess => "preprocess",
            Stage::Orientation => "orientation",
            Stage::Odometry => "odometry",
            Stage::Detect => "detect",
            Stage::Fuse => "fuse",
            Stage::Graph => "graph",
            Stage::Refine => "refine",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        if s == "all" {
            return Ok(Stage::ALL.to_vec());
        }
        let mut out = Vec::new();
        for part in s.split(',') {
            let part = part.trim();
            let stage = Stage::ALL
                .iter()
                .find(|st| st.name() == part)
                .copied()
                .ok_or_else(|| Error::Config(format!("unknown stage: {part}")))?;
            out.push(stage);
        }
        out.sort();
        out.dedup();
        Ok(out)
    }
}

/// Everything the caller may want after a run.
#[derive(Debug, Clone, Default)]
pub struct PipelineSummary {
    pub ran: Vec<&'static str>,
    pub ate: Option<MetricsReport>,
    pub ape: Option<MetricsReport>,
    /// Mean per-scan wall time of the online stages (ms).
    pub mean_frame_ms: Option<f64>,
    pub scans: usize,
    pub detector_source: &'static str,
}

struct Ctx<'a> {
    cfg: &'a RunConfig,
    out_dir: PathBuf,
    checkpoint: Option<&'a Path>,
    scans: Vec<LaserScan>,
    imu: Vec<ImuSample>,
    sweep_duration: f64,
    // Lazily computed artifacts.
    prelim: Option<Vec<(f64, Vec<(f64, f64, f64)>)>>,
    orientation: Option<Vec<(f64, UnitQuaternion<f64>)>>,
    odometry: Option<Trajectory>,
    detections: Option<Vec<(f64, Vec<(f64, f64, f64)>)>>,
    fused: Option<Trajectory>,
    observations: Option<Vec<(f64, Vec<(u64, (f64, f64))>)>>,
    optimized: Option<Trajectory>,
    refined: Option<Trajectory>,
    timing: Vec<(f64, f64, f64, f64, f64)>,
    detector_source: &'static str,
}

impl<'a> Ctx<'a> {
    fn artifact(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn quaternion_at(&self, t: f64) -> UnitQuaternion<f64> {
        let table = self.orientation.as_ref().expect("orientation ready");
        nearest_by_time(table, t, |row| row.0)
            .map(|row| row.1)
            .unwrap_or_else(UnitQuaternion::identity)
    }

    fn imu_at(&self, t: f64) -> ImuSample {
        nearest_by_time(&self.imu, t, |s| s.timestamp).copied().unwrap_or(ImuSample {
            timestamp: t,
            accel: nalgebra::Vector3::zeros(),
            gyro: nalgebra::Vector3::zeros(),
            mag: None,
        })
    }

    // -- stage: preprocess ---------------------------------------------

    fn ensure_preprocess(&mut self) -> Result<()> {
        if self.prelim.is_some() {
            return Ok(());
        }
        let path = self.artifact("prelim.jsonl");
        if path.exists() {
            self.prelim = Some(formats::read_object_frames(&path)?);
            return Ok(());
        }
        let mut prelim = Vec::with_capacity(self.scans.len());
        let mut normalized_frames = Vec::with_capacity(self.scans.len());
        for scan in &self.scans {
            let cloud = scan_to_cloud(scan);
            let cleaned = voxel_downsample(
                &remove_outliers(&cloud, &self.cfg.preprocess),
                self.cfg.preprocess.voxel_cell,
            );
            let objects = preliminary_objects(&cleaned);
            prelim.push((scan.timestamp, objects));
            if !cleaned.is_empty() {
                let (norm, centroid, scale) = normalize_unit_sphere(&cleaned)?;
                normalized_frames.push((scan.timestamp, norm, centroid, scale));
            } else {
                normalized_frames.push((
                    scan.timestamp,
                    PointCloud2::new(scan.timestamp, vec![]),
                    (0.0, 0.0),
                    1.0,
                ));
            }
        }
        formats::write_object_frames(&path, &prelim)?;
        write_cloud_log(&self.artifact("clouds.jsonl"), &normalized_frames)?;
        self.prelim = Some(prelim);
        Ok(())
    }

    // -- stage: orientation ----------------------------------------------

    fn ensure_orientation(&mut self) -> Result<()> {
        if self.orientation.is_some() {
            return Ok(());
        }
        let path = self.artifact("orientation.jsonl");
        if path.exists() {
            self.orientation = Some(formats::read_orientation_log(&path)?);
            return Ok(());
        }
        let estimates: Vec<OrientationEstimate> = run_orientation_pipeline(
            &self.imu,
            &self.cfg.madgwick,
            &self.cfg.orientation_ekf,
        )?;
        let rows: Vec<(f64, UnitQuaternion<f64>)> = estimates
            .iter()
            .map(|e| (e.timestamp, e.quaternion))
            .collect();
        formats::write_orientation_log(&path, &rows)?;
        self.orientation = Some(rows);
        Ok(())
    }

    // -- stage: odometry --------------------------------------------------

    fn ensure_odometry(&mut self) -> Result<()> {
        if self.odometry.is_some() {
            return Ok(());
        }
        let path = self.artifact("odometry.tum");
        if path.exists() {
            self.odometry = Some(formats::read_trajectory(&path)?);
            return Ok(());
        }
        self.ensure_orientation()?;
        let initial_rotation = self
            .orientation
            .as_ref()
            .and_then(|o| o.first())
            .map(|(_, q)| q.to_rotation_matrix().into_inner())
            .unwrap_or_else(nalgebra::Matrix3::identity);

        let (ex, ey, eyaw) = self.cfg.extrinsics;
        let extrinsics = Extrinsics {
            lidar_in_imu: PoseSE3::from_se2(&PoseSE2::new(ex, ey, eyaw)),
        };
        let mut filter = LioFilter::new(
            initial_rotation,
            self.cfg.iekf,
            self.cfg.imu_noise,
            extrinsics,
            self.cfg.preprocess,
        );

        let sweep = self.sweep_duration;
        let mut poses = Vec::with_capacity(self.scans.len());
        let mut cursor = 0usize;
        let mut prev_end = self.scans.first().map(|s| s.timestamp).unwrap_or(0.0);
        self.timing = Vec::with_capacity(self.scans.len());
        for scan in &self.scans {
            let t_end = scan.timestamp + sweep;
            let start = advance_cursor(&self.imu, cursor, prev_end - 2.0 * sweep);
            let stop = batch_end(&self.imu, start, t_end + 2.0 * sweep);
            let began = Instant::now();
            let result = filter.step(&self.imu[start..stop], scan, sweep);
            let ms = began.elapsed().as_secs_f64() * 1e3;
            poses.push((scan.timestamp, result.pose_se2));
            self.timing.push((scan.timestamp, ms, 0.0, 0.0, ms));
            cursor = start;
            prev_end = t_end;
        }
        let traj = Trajectory::new(poses);
        formats::write_trajectory(&path, &traj)?;
        self.odometry = Some(traj);
        Ok(())
    }

    // -- stage: detect ------------------------------------------------------

    fn ensure_detections(&mut self) -> Result<()> {
        if self.detections.is_some() {
            return Ok(());
        }
        let path = self.artifact("detections.jsonl");
        if path.exists() {
            self.detections = Some(formats::read_object_frames(&path)?);
            return Ok(());
        }
        self.ensure_preprocess()?;
        self.ensure_orientation()?;

        let params: Option<NetworkParams> = match self.checkpoint {
            Some(p) => Some(load_checkpoint(p)?),
            None => None,
        };
        self.detector_source = if params.is_some() {
            "network"
        } else {
            "geometric-fallback"
        };
        let window_len = params
            .as_ref()
            .map(|p| p.config.window)
            .unwrap_or(self.cfg.training.window);

        // Assemble the per-frame inputs once.
        let prelim = self.prelim.clone().expect("preprocess ready");
        let mut inputs: Vec<DetectorInput> = Vec::with_capacity(self.scans.len());
        for (scan, (_, objects)) in self.scans.iter().zip(&prelim) {
            let imu = self.imu_at(scan.timestamp);
            let quat = self.quaternion_at(scan.timestamp);
            inputs.push(assemble_input(scan, objects, &imu, &quat));
        }

        let mut detections = Vec::with_capacity(self.scans.len());
        for (k, scan) in self.scans.iter().enumerate() {
            let began = Instant::now();
            let slots: Vec<(f64, f64, f64)> = match &params {
                Some(net) if k + 1 >= window_len => {
                    let window = &inputs[k + 1 - window_len..=k];
                    let dets = detect(net, window)?;
                    dets.iter()
                        .map(|d| {
                            if d.is_valid() {
                                (d.center_x, d.center_y, d.radius)
                            } else {
                                SLOT_SENTINEL
                            }
                        })
                        .collect()
                }
                Some(_) => vec![SLOT_SENTINEL; 4],
                None => {
                    let mut slots = vec![SLOT_SENTINEL; 4];
                    for (i, obj) in prelim[k].1.iter().take(4).enumerate() {
                        slots[i] = *obj;
                    }
                    slots
                }
            };
            let ms = began.elapsed().as_secs_f64() * 1e3;
            if let Some(row) = self.timing.get_mut(k) {
                row.2 = ms;
                row.4 += ms;
            }
            detections.push((scan.timestamp, slots));
        }
        formats::write_object_frames(&path, &detections)?;
        self.detections = Some(detections);
        Ok(())
    }

    // -- stage: fuse ---------------------------------------------------------

    fn ensure_fused(&mut self) -> Result<()> {
        if self.fused.is_some() {
            return Ok(());
        }
        let traj_path = self.artifact("fused.tum");
        let obs_path = self.artifact("observations.jsonl");
        if traj_path.exists() && obs_path.exists() {
            self.fused = Some(formats::read_trajectory(&traj_path)?);
            self.observations = Some(read_observations(&obs_path)?);
            return Ok(());
        }
        self.ensure_odometry()?;
        self.ensure_detections()?;

        let odometry = self.odometry.clone().expect("odometry ready");
        let detections = self.detections.clone().expect("detections ready");
        let fusion_cfg = FusionConfig {
            fusion_weight: if self.cfg.pipeline.fusion_enabled {
                self.cfg.fusion.fusion_weight
            } else {
                0.0
            },
            ..self.cfg.fusion
        };

        let mut map = LandmarkMap::default();
        let mut fused = Vec::with_capacity(odometry.poses.len());
        let mut observations = Vec::with_capacity(odometry.poses.len());
        for ((t, odom_pose), (_, slots)) in odometry.poses.iter().zip(&detections) {
            let began = Instant::now();
            let result = fuse_step(odom_pose, slots, &mut map, &fusion_cfg, *t);
            let ms = began.elapsed().as_secs_f64() * 1e3;
            if let Some(row) = self
                .timing
                .iter_mut()
                .find(|row| (row.0 - t).abs() < 1e-9)
            {
                row.3 = ms;
                row.4 += ms;
            }
            fused.push((*t, result.pose));
            observations.push((*t, result.matched_static));
        }

        // Keep only landmarks that finished the run confirmed and static.
        let keep: std::collections::HashSet<u64> =
            map.static_confirmed().map(|l| l.id).collect();
        for (_, obs) in &mut observations {
            obs.retain(|(id, _)| keep.contains(id));
        }

        let traj = Trajectory::new(fused);
        formats::write_trajectory(&traj_path, &traj)?;
        write_observations(&obs_path, &observations)?;
        formats::write_landmarks(&self.artifact("landmarks.jsonl"), &map.landmarks)?;
        if !self.timing.is_empty() {
            formats::write_timing_csv(&self.artifact("timing.csv"), &self.timing)?;
        }
        self.fused = Some(traj);
        self.observations = Some(observations);
        Ok(())
    }

    // -- stage: graph ----------------------------------------------------------

    fn ensure_optimized(&mut self) -> Result<()> {
        if self.optimized.is_some() {
            return Ok(());
        }
        let path = self.artifact("optimized.tum");
        if path.exists() {
            self.optimized = Some(formats::read_trajectory(&path)?);
            return Ok(());
        }
        self.ensure_fused()?;
        let fused = self.fused.clone().expect("fused ready");
        let observations = self.observations.clone().expect("observations ready");

        let stride = self.cfg.pipeline.keyframe_stride.max(1);
        let key_indices: Vec<usize> = (0..fused.poses.len()).step_by(stride).collect();
        let key_poses: Vec<(f64, PoseSE2)> = key_indices.iter().map(|&i| fused.poses[i]).collect();
        let key_obs: Vec<Vec<(u64, (f64, f64))>> = key_indices
            .iter()
            .map(|&i| observations[i].1.clone())
            .collect();

        let graph = build_pose_graph(&key_poses, &key_obs, &self.cfg.graph)?;
        save_pose_graph(&graph, &self.artifact("graph.txt"))?;
        let result = optimize(&graph, &self.cfg.lm)?;
        let mut optimized_graph = graph.clone();
        for (node, pose) in optimized_graph.nodes.iter_mut().zip(&result.poses) {
            node.pose = *pose;
        }
        save_pose_graph(&optimized_graph, &self.artifact("graph_optimized.txt"))?;

        let corrected = apply_keyframe_corrections(&fused, &key_indices, &key_poses, &result.poses);
        formats::write_trajectory(&path, &corrected)?;
        self.optimized = Some(corrected);
        Ok(())
    }

    // -- stage: refine ------------------------------------------------------------

    fn ensure_refined(&mut self) -> Result<()> {
        if self.refined.is_some() {
            return Ok(());
        }
        let path = self.artifact("refined.tum");
        if path.exists() {
            self.refined = Some(formats::read_trajectory(&path)?);
            return Ok(());
        }
        self.ensure_optimized()?;
        let optimized = self.optimized.clone().expect("optimized ready");

        let stride = self.cfg.pipeline.keyframe_stride.max(1);
        let key_indices: Vec<usize> = (0..optimized.poses.len()).step_by(stride).collect();
        let key_poses: Vec<PoseSE2> = key_indices.iter().map(|&i| optimized.poses[i].1).collect();
        let features: Vec<FeatureSet> = key_indices
            .iter()
            .map(|&i| extract_features(&scan_to_cloud(&self.scans[i]), &self.cfg.preprocess))
            .collect();
        let refined = refine_global_map(&key_poses, &features, &self.cfg.refine);

        formats::write_point_map(&self.artifact("global_map.txt"), &refined.map.points)?;
        let key_tuples: Vec<(f64, PoseSE2)> = key_indices
            .iter()
            .map(|&i| optimized.poses[i])
            .collect();
        let corrected =
            apply_keyframe_corrections(&optimized, &key_indices, &key_tuples, &refined.poses);
        formats::write_trajectory(&path, &corrected)?;
        self.refined = Some(corrected);
        Ok(())
    }

    // -- stage: evaluate -------------------------------------------------------------

    fn best_trajectory(&mut self) -> Result<Trajectory> {
        for (slot, file) in [
            (self.refined.clone(), "refined.tum"),
            (self.optimized.clone(), "optimized.tum"),
            (self.fused.clone(), "fused.tum"),
            (self.odometry.clone(), "odometry.tum"),
        ] {
            if let Some(t) = slot {
                return Ok(t);
            }
            let path = self.artifact(file);
            if path.exists() {
                return formats::read_trajectory(&path);
            }
        }
        Err(Error::Config(
            "no estimated trajectory available; run earlier stages first".into(),
        ))
    }

    fn run_evaluate(&mut self, bundle: &DatasetBundle) -> Result<(MetricsReport, MetricsReport)> {
        let gt_path = bundle.ground_truth.as_ref().ok_or_else(|| {
            Error::Config("evaluation requires a ground-truth trajectory".into())
        })?;
        let reference = formats::read_trajectory(gt_path)?;
        let est = self.best_trajectory()?;

        let ate_report = ate(&est, &reference)?;
        let ape_report = ape(&est, &reference)?;

        let mut text = String::from("metric  min  max  mean  median  rmse  std\n");
        let mut csv = String::from("metric,min,max,mean,median,rmse,std\n");
        for (name, r) in [("ATE", &ate_report), ("APE", &ape_report)] {
            text.push_str(&format!(
                "{name}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}\n",
                r.min, r.max, r.mean, r.median, r.rmse, r.std
            ));
            csv.push_str(&format!(
                "{name},{},{},{},{},{},{}\n",
                r.min, r.max, r.mean, r.median, r.rmse, r.std
            ));
        }
        std::fs::write(self.artifact("metrics.txt"), &text)?;
        std::fs::write(self.artifact("metrics.csv"), &csv)?;

        // Per-pose rigid-aligned error series for plotting.
        let (pairs, _) = crate::eval::associate_timestamps(&est, &reference, self.cfg.pipeline.eval_max_dt)?;
        let est_pts: Vec<(f64, f64)> = pairs.iter().map(|(e, _)| (e.x, e.y)).collect();
        let ref_pts: Vec<(f64, f64)> = pairs.iter().map(|(_, r)| (r.x, r.y)).collect();
        let al = crate::eval::umeyama_align(&est_pts, &ref_pts, false)?;
        let series: Vec<(f64, f64)> = est
            .poses
            .iter()
            .zip(est_pts.iter().zip(&ref_pts))
            .map(|((t, _), (e, r))| {
                let m = crate::eval::apply_alignment(&al, *e);
                (*t, ((m.0 - r.0).powi(2) + (m.1 - r.1).powi(2)).sqrt())
            })
            .collect();
        formats::write_error_series_csv(&self.artifact("error_series.csv"), &series)?;
        Ok((ate_report, ape_report))
    }
}

fn nearest_by_time<T>(items: &[T], t: f64, key: impl Fn(&T) -> f64) -> Option<&T> {
    if items.is_empty() {
        return None;
    }
    let idx = items.partition_point(|x| key(x) < t);
    let mut best: Option<&T> = None;
    for cand in [idx.wrapping_sub(1), idx] {
        if let Some(item) = items.get(cand) {
            let better = match best {
                None => true,
                Some(b) => (key(item) - t).abs() < (key(b) - t).abs(),
            };
            if better {
                best = Some(item);
            }
        }
    }
    best
}

fn advance_cursor(imu: &[ImuSample], from: usize, t: f64) -> usize {
    let mut i = from;
    while i + 1 < imu.len() && imu[i + 1].timestamp <= t {
        i += 1;
    }
    i
}

fn batch_end(imu: &[ImuSample], from: usize, t: f64) -> usize {
    let mut i = from;
    while i < imu.len() && imu[i].timestamp <= t {
        i += 1;
    }
    i.min(imu.len())
}

/// Spread keyframe pose corrections over the in-between scans: each scan
/// gets the interpolated world-frame correction of its bracketing
/// keyframes applied to its original pose.
fn apply_keyframe_corrections(
    original: &Trajectory,
    key_indices: &[usize],
    key_before: &[(f64, PoseSE2)],
    key_after: &[PoseSE2],
) -> Trajectory {
    let corrections: Vec<PoseSE2> = key_before
        .iter()
        .zip(key_after)
        .map(|((_, before), after)| after.compose(&before.inverse()))
        .collect();
    let mut out = Vec::with_capacity(original.poses.len());
    for (i, (t, pose)) in original.poses.iter().enumerate() {
        let slot = key_indices.partition_point(|&k| k <= i);
        let corrected = if slot == 0 {
            corrections[0].compose(pose)
        } else if slot >= key_indices.len() {
            corrections[corrections.len() - 1].compose(pose)
        } else {
            let (ka, kb) = (key_indices[slot - 1], key_indices[slot]);
            let alpha = (i - ka) as f64 / (kb - ka) as f64;
            let blended = corrections[slot - 1].interpolate(&corrections[slot], alpha);
            blended.compose(pose)
        };
        out.push((*t, corrected));
    }
    Trajectory::new(out)
}

// ---- observation log --------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct ObservationRecord {
    t: f64,
    obs: Vec<(u64, f64, f64)>,
}

fn write_observations(path: &Path, rows: &[(f64, Vec<(u64, (f64, f64))>)]) -> Result<()> {
    let mut out = String::from(formats::FORMAT_VERSION_LINE);
    out.push('\n');
    for (t, obs) in rows {
        let rec = ObservationRecord {
            t: *t,
            obs: obs.iter().map(|(id, (x, y))| (*id, *x, *y)).collect(),
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    let tmp = path.with_extension("tmp.part");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn read_observations(path: &Path) -> Result<Vec<(f64, Vec<(u64, (f64, f64))>)>> {
    let content = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in content.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let rec: ObservationRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        out.push((rec.t, rec.obs.into_iter().map(|(id, x, y)| (id, (x, y))).collect()));
    }
    Ok(out)
}

// ---- normalized cloud log ------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct CloudRecord {
    t: f64,
    centroid: (f64, f64),
    scale: f64,
    points: Vec<(f64, f64)>,
}

fn write_cloud_log(
    path: &Path,
    frames: &[(f64, PointCloud2, (f64, f64), f64)],
) -> Result<()> {
    let mut out = String::from(formats::FORMAT_VERSION_LINE);
    out.push('\n');
    for (t, cloud, centroid, scale) in frames {
        let rec = CloudRecord {
            t: *t,
            centroid: *centroid,
            scale: *scale,
            points: cloud.points.clone(),
        };
        out.push_str(&serde_json::to_string(&rec).unwrap());
        out.push('\n');
    }
    let tmp = path.with_extension("tmp.part");
    std::fs::write(&tmp, out)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Execute the requested stages against a dataset, writing artifacts to
/// `out_dir`. Stages not requested but required as inputs are computed
/// (and persisted) on demand, or loaded from an earlier run's artifacts.
pub fn run_pipeline(
    cfg: &RunConfig,
    bundle: &DatasetBundle,
    stages: &[Stage],
    out_dir: &Path,
    detector_checkpoint: Option<&Path>,
) -> Result<PipelineSummary> {
    cfg.validate()?;
    bundle.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let scans = formats::read_scan_log(&bundle.scan_log).map_err(|e| e.in_stage("input"))?;
    let imu = formats::read_imu_log(&bundle.imu_log).map_err(|e| e.in_stage("input"))?;
    if scans.is_empty() {
        return Err(Error::Config("scan log is empty".into()));
    }
    let sweep_duration = if scans.len() >= 2 {
        scans[1].timestamp - scans[0].timestamp
    } else {
        1.0 / cfg.pipeline.scan_rate
    };

    let mut ctx = Ctx {
        cfg,
        out_dir: out_dir.to_path_buf(),
        checkpoint: detector_checkpoint,
        scans,
        imu,
        sweep_duration,
        prelim: None,
        orientation: None,
        odometry: None,
        detections: None,
        fused: None,
        observations: None,
        optimized: None,
        refined: None,
        timing: Vec::new(),
        detector_source: "none",
    };

    let mut summary = PipelineSummary {
        scans: ctx.scans.len(),
        ..PipelineSummary::default()
    };

    for stage in stages {
        let res = match stage {
            Stage::Preprocess => ctx.ensure_preprocess(),
            Stage::Orientation => ctx.ensure_orientation(),
            Stage::Odometry => ctx.ensure_odometry(),
            Stage::Detect => ctx.ensure_detections(),
            Stage::Fuse => ctx.ensure_fused(),
            Stage::Graph => ctx.ensure_optimized(),
            Stage::Refine => ctx.ensure_refined(),
            Stage::Evaluate => match ctx.run_evaluate(bundle) {
                Ok((a, p)) => {
                    summary.ate = Some(a);
                    summary.ape = Some(p);
                    Ok(())
                }
                Err(e) => Err(e),
            },
        };
        res.map_err(|e| e.in_stage(stage.name()))?;
        summary.ran.push(stage.name());
    }

    if !ctx.timing.is_empty() {
        let mean = ctx.timing.iter().map(|r| r.4).sum::<f64>() / ctx.timing.len() as f64;
        summary.mean_frame_ms = Some(mean);
    }
    summary.detector_source = ctx.detector_source;
    Ok(summary)
}

/// Write one simulation run as a dataset directory: scan log, imu log,
/// ground truth, sensor-frame labels, and world-frame object states.
pub fn simulate_to_dir(
    env: &Environment,
    traj: &TrajectorySpec,
    noise: &SensorNoise,
    seed: u64,
    out_dir: &Path,
) -> Result<SimOutput> {
    std::fs::create_dir_all(out_dir)?;
    let sim = simulate(env, traj, noise, seed)?;
    formats::write_scan_log(&out_dir.join("scans.jsonl"), &sim.scans)?;
    formats::write_imu_log(&out_dir.join("imu.jsonl"), &sim.imu)?;
    formats::write_trajectory(
        &out_dir.join("ground_truth.tum"),
        &Trajectory::new(sim.gt_poses.clone()),
    )?;
    let labels: Vec<(f64, Vec<(f64, f64, f64)>)> = sim
        .gt_poses
        .iter()
        .map(|(t, pose)| {
            (
                *t,
                label_objects(
                    env,
                    pose,
                    *t,
                    noise.range_max,
                    crate::sim::min_resolvable_width(noise.beam_count),
                )
                .to_vec(),
            )
        })
        .collect();
    formats::write_object_frames(&out_dir.join("labels.jsonl"), &labels)?;
    let world: Vec<(f64, Vec<(f64, f64, f64)>)> = sim
        .gt_poses
        .iter()
        .zip(&sim.gt_objects)
        .map(|((t, _), objs)| {
            (
                *t,
                objs.iter()
                    .map(|o| (o.center.0, o.center.1, o.radius))
                    .collect(),
            )
        })
        .collect();
    formats::write_object_frames(&out_dir.join("world_objects.jsonl"), &world)?;
    Ok(sim)
}

/// Assemble detector training windows from a dataset directory written
/// by [`simulate_to_dir`]: inputs from the scans/IMU/orientation chain,
/// targets from the per-frame labels.
pub fn build_training_windows(
    cfg: &RunConfig,
    dataset_dir: &Path,
) -> Result<Vec<TrainingSample>> {
    let scans = formats::read_scan_log(&dataset_dir.join("scans.jsonl"))?;
    let imu = formats::read_imu_log(&dataset_dir.join("imu.jsonl"))?;
    let labels = formats::read_object_frames(&dataset_dir.join("labels.jsonl"))?;
    if scans.len() != labels.len() {
        return Err(Error::Config(format!(
            "scan/label count mismatch: {} vs {}",
            scans.len(),
            labels.len()
        )));
    }
    let orientation = run_orientation_pipeline(&imu, &cfg.madgwick, &cfg.orientation_ekf)?;
    let orientation_rows: Vec<(f64, UnitQuaternion<f64>)> = orientation
        .iter()
        .map(|e| (e.timestamp, e.quaternion))
        .collect();

    let mut inputs = Vec::with_capacity(scans.len());
    for scan in &scans {
        let cloud = scan_to_cloud(scan);
        let cleaned = voxel_downsample(
            &remove_outliers(&cloud, &cfg.preprocess),
            cfg.preprocess.voxel_cell,
        );
        let objects = preliminary_objects(&cleaned);
        let imu_sample = nearest_by_time(&imu, scan.timestamp, |s| s.timestamp)
            .copied()
            .unwrap();
        let quat = nearest_by_time(&orientation_rows, scan.timestamp, |r| r.0)
            .map(|r| r.1)
            .unwrap_or_else(UnitQuaternion::identity);
        inputs.push(assemble_input(scan, &objects, &imu_sample, &quat));
    }

    let t = cfg.training.window;
    let mut samples = Vec::new();
    for k in (t - 1)..scans.len() {
        let window: Vec<DetectorInput> = inputs[k + 1 - t..=k].to_vec();
        let prelim: Vec<(f64, f64, f64)> = (0..4)
            .map(|slot| {
                let row = &inputs[k];
                (row[4 + slot * 3], row[5 + slot * 3], row[6 + slot * 3])
            })
            .collect();
        let target = align_targets_to_slots(&labels[k].1, &prelim);
        samples.push((window, target));
    }
    Ok(samples)
}

/// Assign each label to the input slot whose preliminary object it
/// matches, so the network learns a slot-stable refinement instead of a
/// re-ordering; labels without a matching preliminary fill the free
/// slots nearest first.
fn align_targets_to_slots(
    labels: &[(f64, f64, f64)],
    prelim: &[(f64, f64, f64)],
) -> [f64; 12] {
    const ALIGN_GATE: f64 = 0.75;
    let mut target = [0.0; 12];
    for slot in 0..4 {
        target[slot * 3] = SLOT_SENTINEL.0;
        target[slot * 3 + 1] = SLOT_SENTINEL.1;
        target[slot * 3 + 2] = SLOT_SENTINEL.2;
    }
    let valid_labels: Vec<(f64, f64, f64)> =
        labels.iter().copied().filter(|l| l.2 > 0.0).collect();
    let mut used_slot = [false; 4];
    let mut leftover: Vec<(f64, f64, f64)> = Vec::new();
    for label in &valid_labels {
        let mut best: Option<(usize, f64)> = None;
        for (slot, p) in prelim.iter().enumerate() {
            if used_slot[slot] || p.2 <= 0.0 {
                continue;
            }
            let d = ((label.0 - p.0).powi(2) + (label.1 - p.1).powi(2)).sqrt();
            if d <= ALIGN_GATE && best.map(|(_, bd)| d < bd).unwrap_or(true) {
                best = Some((slot, d));
            }
        }
        match best {
            Some((slot, _)) => {
                used_slot[slot] = true;
                target[slot * 3] = label.0;
                target[slot * 3 + 1] = label.1;
                target[slot * 3 + 2] = label.2;
            }
            None => leftover.push(*label),
        }
    }
    let mut free = (0..4).filter(|s| !used_slot[*s]);
    for label in leftover {
        if let Some(slot) = free.next() {
            target[slot * 3] = label.0;
            target[slot * 3 + 1] = label.1;
            target[slot * 3 + 2] = label.2;
        }
    }
    target
}
