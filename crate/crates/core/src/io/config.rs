//! Run configuration: one flat key/value text file with section-prefixed
//! keys. Unknown keys are rejected; every field has a documented default.

use std::path::{Path, PathBuf};

use crate::backend::{FusionConfig, GraphConfig, LmConfig, RefineConfig};
use crate::detector::TrainingConfig;
use crate::lio::{IekfConfig, ImuNoiseParams};
use crate::orientation::{MadgwickConfig, OrientationEkfConfig};
use crate::preprocess::{CurvatureMode, PreprocessConfig};
use crate::sim::SensorNoise;
use crate::{Error, Result};

/// Pipeline-level knobs that belong to no single module.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct PipelineConfig {
    /// Every k-th scan becomes a pose-graph node.
    pub keyframe_stride: usize,
    /// Timestamp pairing window for evaluation (s).
    pub eval_max_dt: f64,
    /// Landmark fusion stage blends alignment corrections when true.
    pub fusion_enabled: bool,
    /// Scan rate used to derive the sweep duration (Hz).
    pub scan_rate: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            keyframe_stride: 10,
            eval_max_dt: 0.02,
            fusion_enabled: true,
            scan_rate: 10.0,
        }
    }
}

/// Every tunable in one place. Defaults are the documented baseline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub preprocess: PreprocessConfig,
    pub madgwick: MadgwickConfig,
    pub orientation_ekf: OrientationEkfConfig,
    pub imu_noise: ImuNoiseParams,
    pub iekf: IekfConfig,
    /// LiDAR-in-IMU extrinsics as (x, y, yaw); planar rig.
    pub extrinsics: (f64, f64, f64),
    pub training: TrainingConfig,
    pub fusion: FusionConfig,
    pub graph: GraphConfig,
    pub lm: LmConfig,
    pub refine: RefineConfig,
    pub sensor: SensorNoise,
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            preprocess: PreprocessConfig::default(),
            madgwick: MadgwickConfig::default(),
            orientation_ekf: OrientationEkfConfig::default(),
            imu_noise: ImuNoiseParams::default(),
            iekf: IekfConfig::default(),
            extrinsics: (0.0, 0.0, 0.0),
            training: TrainingConfig::default(),
            fusion: FusionConfig::default(),
            graph: GraphConfig::default(),
            lm: LmConfig::default(),
            refine: RefineConfig::default(),
            sensor: SensorNoise::default(),
            pipeline: PipelineConfig::default(),
        }
    }
}

enum Field<'a> {
    F64(&'a mut f64),
    Usize(&'a mut usize),
    U64(&'a mut u64),
    Bool(&'a mut bool),
    Mode(&'a mut CurvatureMode),
}

impl RunConfig {
    /// The schema: key, documentation, and a mutable handle per field.
    fn fields(&mut self) -> Vec<(&'static str, &'static str, Field<'_>)> {
        use Field::*;
        let [gbx, gby, gbz] = &mut self.sensor.gyro_bias;
        let [abx, aby, abz] = &mut self.sensor.accel_bias;
        vec![
            ("seed", "master random seed", U64(&mut self.seed)),
            ("preprocess.voxel_cell", "voxel edge length (m)", F64(&mut self.preprocess.voxel_cell)),
            ("preprocess.outlier_k", "neighbors for outlier removal", Usize(&mut self.preprocess.outlier_k)),
            ("preprocess.outlier_std_mult", "outlier cutoff in std units", F64(&mut self.preprocess.outlier_std_mult)),
            ("preprocess.sigma_t", "curvature threshold", F64(&mut self.preprocess.sigma_t)),
            ("preprocess.curvature_neighborhood", "curvature points per side", Usize(&mut self.preprocess.curvature_neighborhood)),
            ("preprocess.curvature_mode", "norm-of-sum | sum-of-norms", Mode(&mut self.preprocess.curvature_mode)),
            ("madgwick.beta", "gradient gain (0, 1)", F64(&mut self.madgwick.beta)),
            ("orientation_ekf.gyro_noise_density", "rad/s/sqrt(Hz)", F64(&mut self.orientation_ekf.gyro_noise_density)),
            ("orientation_ekf.measurement_noise", "attitude measurement variance (rad^2)", F64(&mut self.orientation_ekf.measurement_noise)),
            ("imu_noise.gyro_noise", "gyro white noise density", F64(&mut self.imu_noise.gyro_noise)),
            ("imu_noise.accel_noise", "accel white noise density", F64(&mut self.imu_noise.accel_noise)),
            ("imu_noise.gyro_bias_walk", "gyro bias random walk density", F64(&mut self.imu_noise.gyro_bias_walk)),
            ("imu_noise.accel_bias_walk", "accel bias random walk density", F64(&mut self.imu_noise.accel_bias_walk)),
            ("iekf.max_iterations", "iterated update cap", Usize(&mut self.iekf.max_iterations)),
            ("iekf.convergence_eps", "step-norm stop threshold", F64(&mut self.iekf.convergence_eps)),
            ("iekf.knn_k", "neighbors per line fit", Usize(&mut self.iekf.knn_k)),
            ("iekf.max_assoc_dist", "association gate (m)", F64(&mut self.iekf.max_assoc_dist)),
            ("iekf.planar_constraint_noise", "pseudo-measurement variance", F64(&mut self.iekf.planar_constraint_noise)),
            ("iekf.measurement_noise", "point-to-line variance (m^2)", F64(&mut self.iekf.measurement_noise)),
            ("iekf.line_quality_max", "eigenvalue-ratio gate", F64(&mut self.iekf.line_quality_max)),
            ("extrinsics.x", "lidar x in imu frame (m)", F64(&mut self.extrinsics.0)),
            ("extrinsics.y", "lidar y in imu frame (m)", F64(&mut self.extrinsics.1)),
            ("extrinsics.yaw", "lidar yaw in imu frame (rad)", F64(&mut self.extrinsics.2)),
            ("training.learning_rate", "SGD learning rate", F64(&mut self.training.learning_rate)),
            ("training.epochs", "training epochs", Usize(&mut self.training.epochs)),
            ("training.batch_size", "mini-batch size", Usize(&mut self.training.batch_size)),
            ("training.window", "detector window length T", Usize(&mut self.training.window)),
            ("training.seed", "training seed", U64(&mut self.training.seed)),
            ("training.validation_fraction", "held-out fraction", F64(&mut self.training.validation_fraction)),
            ("fusion.gate", "landmark association gate (m)", F64(&mut self.fusion.gate)),
            ("fusion.dynamic_threshold", "displacement for dynamic flag (m)", F64(&mut self.fusion.dynamic_threshold)),
            ("fusion.fusion_weight", "odometry-to-alignment blend", F64(&mut self.fusion.fusion_weight)),
            ("graph.odom_sigma_xy", "odometry edge xy std (m)", F64(&mut self.graph.odom_sigma_xy)),
            ("graph.odom_sigma_theta", "odometry edge angle std (rad)", F64(&mut self.graph.odom_sigma_theta)),
            ("graph.revisit_sigma_xy", "revisit edge xy std (m)", F64(&mut self.graph.revisit_sigma_xy)),
            ("graph.revisit_sigma_theta", "revisit edge angle std (rad)", F64(&mut self.graph.revisit_sigma_theta)),
            ("graph.revisit_min_gap", "min node gap for revisit edges", Usize(&mut self.graph.revisit_min_gap)),
            ("graph.revisit_max_per_node", "revisit edge cap per node", Usize(&mut self.graph.revisit_max_per_node)),
            ("lm.lambda_init", "initial damping", F64(&mut self.lm.lambda_init)),
            ("lm.lambda_up", "damping raise factor", F64(&mut self.lm.lambda_up)),
            ("lm.lambda_down", "damping lower factor", F64(&mut self.lm.lambda_down)),
            ("lm.max_iterations", "LM iteration cap", Usize(&mut self.lm.max_iterations)),
            ("lm.cost_tol", "relative cost tolerance", F64(&mut self.lm.cost_tol)),
            ("lm.step_tol", "step-norm tolerance", F64(&mut self.lm.step_tol)),
            ("refine.knn_k", "neighbors per polish line fit", Usize(&mut self.refine.knn_k)),
            ("refine.max_assoc_dist", "polish association gate (m)", F64(&mut self.refine.max_assoc_dist)),
            ("refine.line_quality_max", "polish eigenvalue-ratio gate", F64(&mut self.refine.line_quality_max)),
            ("refine.voxel_cell", "output map voxel (m)", F64(&mut self.refine.voxel_cell)),
            ("refine.iterations", "polish iterations per scan", Usize(&mut self.refine.iterations)),
            ("sensor.range_std", "range noise std (m)", F64(&mut self.sensor.range_std)),
            ("sensor.range_max", "sensor max range (m)", F64(&mut self.sensor.range_max)),
            ("sensor.range_min", "sensor min range (m)", F64(&mut self.sensor.range_min)),
            ("sensor.beam_count", "beams per sweep", Usize(&mut self.sensor.beam_count)),
            ("sensor.gyro_noise_density", "sim gyro noise density", F64(&mut self.sensor.gyro_noise_density)),
            ("sensor.accel_noise_density", "sim accel noise density", F64(&mut self.sensor.accel_noise_density)),
            ("sensor.gyro_bias_x", "sim gyro bias x (rad/s)", F64(gbx)),
            ("sensor.gyro_bias_y", "sim gyro bias y (rad/s)", F64(gby)),
            ("sensor.gyro_bias_z", "sim gyro bias z (rad/s)", F64(gbz)),
            ("sensor.accel_bias_x", "sim accel bias x (m/s^2)", F64(abx)),
            ("sensor.accel_bias_y", "sim accel bias y (m/s^2)", F64(aby)),
            ("sensor.accel_bias_z", "sim accel bias z (m/s^2)", F64(abz)),
            ("sensor.mag_noise", "sim magnetometer noise std", F64(&mut self.sensor.mag_noise)),
            ("pipeline.keyframe_stride", "scans per pose-graph node", Usize(&mut self.pipeline.keyframe_stride)),
            ("pipeline.eval_max_dt", "timestamp pairing window (s)", F64(&mut self.pipeline.eval_max_dt)),
            ("pipeline.fusion_enabled", "blend landmark corrections", Bool(&mut self.pipeline.fusion_enabled)),
            ("pipeline.scan_rate", "scan rate for sweep duration (Hz)", F64(&mut self.pipeline.scan_rate)),
        ]
    }

    /// Parse a config file over the defaults; unknown keys are errors.
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let content = std::fs::read_to_string(path)?;
        for (lineno, raw) in content.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') || line == "format_version: 1" {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = key.trim();
            let value = value.trim();
            cfg.set(key, value).map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        for (name, _, field) in self.fields() {
            if name != key {
                continue;
            }
            let bad = |what: &str| Error::Config(format!("bad {what} for {key}: {value}"));
            match field {
                Field::F64(slot) => *slot = value.parse().map_err(|_| bad("number"))?,
                Field::Usize(slot) => *slot = value.parse().map_err(|_| bad("integer"))?,
                Field::U64(slot) => *slot = value.parse().map_err(|_| bad("integer"))?,
                Field::Bool(slot) => *slot = value.parse().map_err(|_| bad("bool"))?,
                Field::Mode(slot) => {
                    *slot = match value {
                        "norm-of-sum" => CurvatureMode::NormOfSum,
                        "sum-of-norms" => CurvatureMode::SumOfNorms,
                        _ => return Err(bad("curvature mode")),
                    }
                }
            }
            return Ok(());
        }
        Err(Error::Config(format!("unknown key: {key}")))
    }

    /// Render every key with its current value and documentation.
    pub fn render(&self) -> String {
        let mut clone = self.clone();
        let mut out = String::from("format_version: 1\n");
        for (name, doc, field) in clone.fields() {
            let value = match field {
                Field::F64(v) => format!("{v}"),
                Field::Usize(v) => format!("{v}"),
                Field::U64(v) => format!("{v}"),
                Field::Bool(v) => format!("{v}"),
                Field::Mode(v) => match v {
                    CurvatureMode::NormOfSum => "norm-of-sum".into(),
                    CurvatureMode::SumOfNorms => "sum-of-norms".into(),
                },
            };
            out.push_str(&format!("# {doc}\n{name} = {value}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let positive: [(&str, f64); 12] = [
            ("preprocess.voxel_cell", self.preprocess.voxel_cell),
            ("madgwick.beta", self.madgwick.beta),
            ("orientation_ekf.gyro_noise_density", self.orientation_ekf.gyro_noise_density),
            ("orientation_ekf.measurement_noise", self.orientation_ekf.measurement_noise),
            ("imu_noise.gyro_noise", self.imu_noise.gyro_noise),
            ("imu_noise.accel_noise", self.imu_noise.accel_noise),
            ("iekf.measurement_noise", self.iekf.measurement_noise),
            ("iekf.planar_constraint_noise", self.iekf.planar_constraint_noise),
            ("lm.cost_tol", self.lm.cost_tol),
            ("lm.step_tol", self.lm.step_tol),
            ("training.learning_rate", self.training.learning_rate),
            ("pipeline.scan_rate", self.pipeline.scan_rate),
        ];
        for (name, v) in positive {
            if !(v > 0.0) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.madgwick.beta >= 1.0 {
            return Err(Error::Config("madgwick.beta must be < 1".into()));
        }
        if self.preprocess.outlier_k < 1 {
            return Err(Error::Config("preprocess.outlier_k must be >= 1".into()));
        }
        if self.preprocess.curvature_neighborhood < 2 {
            return Err(Error::Config(
                "preprocess.curvature_neighborhood must be >= 2".into(),
            ));
        }
        if self.iekf.max_iterations < 1 {
            return Err(Error::Config("iekf.max_iterations must be >= 1".into()));
        }
        if self.lm.lambda_up <= 1.0 || self.lm.lambda_down <= 1.0 {
            return Err(Error::Config("lm damping factors must be > 1".into()));
        }
        if self.training.window < 1 {
            return Err(Error::Config("training.window must be >= 1".into()));
        }
        if self.pipeline.keyframe_stride < 1 {
            return Err(Error::Config("pipeline.keyframe_stride must be >= 1".into()));
        }
        Ok(())
    }
}

/// Paths of one dataset on disk.
#[derive(Debug, Clone)]
pub struct DatasetBundle {
    pub scan_log: PathBuf,
    pub imu_log: PathBuf,
    pub ground_truth: Option<PathBuf>,
    pub object_labels: Option<PathBuf>,
}

impl DatasetBundle {
    /// Standard file layout inside a dataset directory.
    pub fn from_dir(dir: &Path) -> Self {
        let gt = dir.join("ground_truth.tum");
        let labels = dir.join("labels.jsonl");
        Self {
            scan_log: dir.join("scans.jsonl"),
            imu_log: dir.join("imu.jsonl"),
            ground_truth: gt.exists().then_some(gt),
            object_labels: labels.exists().then_some(labels),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, path) in [("scan log", &self.scan_log), ("imu log", &self.imu_log)] {
            if !path.exists() {
                return Err(Error::Config(format!(
                    "{what} not found: {}",
                    path.display()
                )));
            }
        }
        Ok(())
    }
}
