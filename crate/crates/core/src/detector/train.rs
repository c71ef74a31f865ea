//! Mini-batch SGD with momentum over the landmark regression network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::input::DetectorInput;
use super::network::{
    apply_running_stats, loss_and_gradients, loss_only, NetworkConfig, NetworkParams,
};
use super::tensor::Tensor;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Window length T; must match the network config.
    pub window: usize,
    pub seed: u64,
    pub validation_fraction: f64,
    /// Print epoch losses to stderr every this many epochs (0 = silent).
    pub log_every: usize,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            epochs: 40,
            batch_size: 32,
            window: 5,
            seed: 1,
            validation_fraction: 0.2,
            log_every: 0,
        }
    }
}

/// One training sample: a window of inputs and the 12-value target for
/// its final frame (sentinel slots carry radius -1).
pub type TrainingSample = (Vec<DetectorInput>, [f64; 12]);

const MOMENTUM: f64 = 0.9;

/// Per-feature mean/std over every timestep of the training windows.
fn input_statistics(samples: &[&TrainingSample], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = 0usize;
    for (window, _) in samples {
        for row in window {
            for (i, v) in row.iter().enumerate() {
                mean[i] += v;
            }
            count += 1;
        }
    }
    for m in &mut mean {
        *m /= count.max(1) as f64;
    }
    let mut var = vec![0.0; dim];
    for (window, _) in samples {
        for row in window {
            for (i, v) in row.iter().enumerate() {
                var[i] += (v - mean[i]).powi(2);
            }
        }
    }
    let std = var
        .into_iter()
        .map(|v| (v / count.max(1) as f64).sqrt().max(1e-6))
        .collect();
    (mean, std)
}

/// Per-component mean/std over the unmasked target entries.
fn target_statistics(samples: &[&TrainingSample], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let mut mean = vec![0.0; dim];
    let mut count = vec![0usize; dim];
    for (_, target) in samples {
        for slot in 0..4 {
            if target[slot * 3 + 2] < 0.0 {
                continue;
            }
            for j in slot * 3..slot * 3 + 3 {
                mean[j] += target[j];
                count[j] += 1;
            }
        }
    }
    for (m, c) in mean.iter_mut().zip(&count) {
        *m /= (*c).max(1) as f64;
    }
    let mut var = vec![0.0; dim];
    for (_, target) in samples {
        for slot in 0..4 {
            if target[slot * 3 + 2] < 0.0 {
                continue;
            }
            for j in slot * 3..slot * 3 + 3 {
                var[j] += (target[j] - mean[j]).powi(2);
            }
        }
    }
    let std = var
        .iter()
        .zip(&count)
        .map(|(v, c)| (v / (*c).max(1) as f64).sqrt().max(1e-3))
        .collect();
    (mean, std)
}

fn epoch_loss(params: &NetworkParams, samples: &[&TrainingSample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::INFINITY);
    }
    let mut total = 0.0;
    for chunk in samples.chunks(64) {
        let windows: Vec<&[DetectorInput]> = chunk.iter().map(|s| s.0.as_slice()).collect();
        let targets: Vec<[f64; 12]> = chunk.iter().map(|s| s.1).collect();
        total += loss_only(params, &windows, &targets)? * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Train from scratch: Xavier init from the seed, deterministic batch
/// shuffling, SGD + momentum, returning the parameters of the best
/// validation epoch (training loss stands in when no validation split
/// is possible).
pub fn train(
    dataset: &[TrainingSample],
    cfg: &TrainingConfig,
    net_cfg: NetworkConfig,
) -> Result<NetworkParams> {
    if dataset.is_empty() {
        return Err(Error::Config("training dataset is empty".into()));
    }
    if cfg.window != net_cfg.window {
        return Err(Error::Config(format!(
            "training window {} != network window {}",
            cfg.window, net_cfg.window
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut indices: Vec<usize> = (0..dataset.len()).collect();
    indices.shuffle(&mut rng);
    let val_count = ((dataset.len() as f64 * cfg.validation_fraction) as usize)
        .min(dataset.len().saturating_sub(1));
    let (val_idx, train_idx) = indices.split_at(val_count);
    let train_set: Vec<&TrainingSample> = train_idx.iter().map(|&i| &dataset[i]).collect();
    let val_set: Vec<&TrainingSample> = val_idx.iter().map(|&i| &dataset[i]).collect();

    let mut params = NetworkParams::xavier(net_cfg, cfg.seed);
    let (mean, std) = input_statistics(&train_set, net_cfg.input_dim);
    params.input_mean.data = mean;
    params.input_std.data = std;
    let (out_mean, out_std) = target_statistics(&train_set, net_cfg.output_dim);
    params.output_mean.data = out_mean;
    params.output_std.data = out_std;

    let mut velocity: Vec<Tensor> = params
        .trainable()
        .iter()
        .map(|t| Tensor::zeros(&t.dims))
        .collect();

    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        // Step decay keeps late epochs from oscillating.
        let lr = if epoch * 3 >= cfg.epochs * 2 {
            cfg.learning_rate * 0.2
        } else {
            cfg.learning_rate
        };
        order.shuffle(&mut rng);
        for (batch_no, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let windows: Vec<&[DetectorInput]> =
                chunk.iter().map(|&i| train_set[i].0.as_slice()).collect();
            let targets: Vec<[f64; 12]> = chunk.iter().map(|&i| train_set[i].1).collect();
            let (loss, grads, stats) = loss_and_gradients(&params, &windows, &targets)?;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged {
                    epoch,
                    batch: batch_no,
                });
            }
            apply_running_stats(&mut params, &stats);
            for ((tensor, vel), grad) in params
                .trainable_mut()
                .into_iter()
                .zip(velocity.iter_mut())
                .zip(grads.0.iter())
            {
                for i in 0..tensor.len() {
                    vel.data[i] = MOMENTUM * vel.data[i] + grad.data[i];
                    tensor.data[i] -= lr * vel.data[i];
                }
            }
        }

        let score = if val_set.is_empty() {
            epoch_loss(&params, &train_set)?
        } else {
            epoch_loss(&params, &val_set)?
        };
        if cfg.log_every > 0 && (epoch % cfg.log_every == 0 || epoch + 1 == cfg.epochs) {
            eprintln!("epoch {epoch}: val loss {score:.6}");
        }
        if score < best_val {
            best_val = score;
            best = params.clone();
        }
    }
    if cfg.log_every > 0 {
        eprintln!("best val loss {best_val:.6}");
    }
    Ok(best)
}

/// Validation loss of trained parameters on an arbitrary sample set.
pub fn evaluate_loss(params: &NetworkParams, samples: &[TrainingSample]) -> Result<f64> {
    let refs: Vec<&TrainingSample> = samples.iter().collect();
    epoch_loss(params, &refs)
}
