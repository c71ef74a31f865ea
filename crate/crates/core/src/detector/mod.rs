//! Learned object-landmark detection: geometric preliminary extraction,
//! a conv/BiLSTM/attention regression network over fused LiDAR+IMU
//! windows, its training loop, and detection metrics.

mod checkpoint;
mod input;
mod metrics;
mod network;
mod tensor;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use input::{
    assemble_input, preliminary_objects, DetectedObject, DetectorInput, DETECTOR_INPUT_DIM,
    SLOT_SENTINEL,
};
pub use metrics::{evaluate_detection, match_detections, DetectionStats};
pub use network::{
    apply_running_stats, attention_weights, forward, loss_and_gradients, loss_only, masked_mse,
    BatchStatsUpdate, Gradients, NetworkConfig, NetworkParams, TRAINABLE_NAMES,
};
pub use tensor::Tensor;
pub use train::{evaluate_loss, train, TrainingConfig, TrainingSample};

use crate::Result;

/// Predicted radii at or below this are reported as empty slots.
pub const RADIUS_FLOOR: f64 = 0.05;

/// Run the network and decode the 12 outputs into four slots; slots with
/// radius at or below the floor come back empty.
pub fn detect(params: &NetworkParams, window: &[DetectorInput]) -> Result<[DetectedObject; 4]> {
    let out = forward(params, window)?;
    let mut slots = [DetectedObject::empty(); 4];
    for (i, slot) in slots.iter_mut().enumerate() {
        let r = out[i * 3 + 2];
        if r > RADIUS_FLOOR {
            *slot = DetectedObject {
                center_x: out[i * 3],
                center_y: out[i * 3 + 1],
                radius: r,
            };
        }
    }
    Ok(slots)
}
