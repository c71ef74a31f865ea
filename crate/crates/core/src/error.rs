use std::path::PathBuf;

/// Errors surfaced by the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("empty cloud")]
    EmptyCloud,

    #[error("insufficient correspondences: need {needed}, got {got}")]
    InsufficientCorrespondences { needed: usize, got: usize },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("out-of-order timestamp at index {index}: {prev} -> {next}")]
    OutOfOrderTimestamp { index: usize, prev: f64, next: f64 },

    #[error("pose graph is disconnected: node {0} unreachable from node 0")]
    DisconnectedGraph(u64),

    #[error("no timestamp pairs within {max_dt} s")]
    NoTimestampPairs { max_dt: f64 },

    #[error("shape mismatch in {layer}: {detail}")]
    ShapeMismatch { layer: String, detail: String },

    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    TrainingDiverged { epoch: usize, batch: usize },

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("object at ({x:.3}, {y:.3}) r={r:.3} lies outside the corridor")]
    ObjectOutsideEnvironment { x: f64, y: f64, r: f64 },

    #[error("trajectory exits the environment at t={t:.3} s, position ({x:.3}, {y:.3})")]
    TrajectoryExitsEnvironment { t: f64, x: f64, y: f64 },

    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
