//! Detection scoring: greedy nearest-center matching and
//! precision/recall/F1.

use super::input::DetectedObject;

/// Running counts over any number of frames.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct DetectionStats {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl DetectionStats {
    pub fn accumulate(&mut self, other: &DetectionStats) {
        self.true_positives += other.true_positives;
        self.false_positives += other.false_positives;
        self.false_negatives += other.false_negatives;
    }

    pub fn precision(&self) -> f64 {
        let denom = self.true_positives + self.false_positives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn recall(&self) -> f64 {
        let denom = self.true_positives + self.false_negatives;
        if denom == 0 {
            0.0
        } else {
            self.true_positives as f64 / denom as f64
        }
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

/// Greedy nearest-center matching within `match_dist`: candidate pairs
/// are claimed in ascending distance order, each side at most once.
pub fn match_detections(
    predictions: &[DetectedObject],
    ground_truth: &[(f64, f64, f64)],
    match_dist: f64,
) -> DetectionStats {
    let preds: Vec<&DetectedObject> = predictions.iter().filter(|p| p.is_valid()).collect();
    let truths: Vec<&(f64, f64, f64)> = ground_truth.iter().filter(|g| g.2 > 0.0).collect();

    let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        for (j, g) in truths.iter().enumerate() {
            let d = ((p.center_x - g.0).powi(2) + (p.center_y - g.1).powi(2)).sqrt();
            if d <= match_dist {
                pairs.push((d, i, j));
            }
        }
    }
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut pred_used = vec![false; preds.len()];
    let mut truth_used = vec![false; truths.len()];
    let mut tp = 0usize;
    for (_, i, j) in pairs {
        if !pred_used[i] && !truth_used[j] {
            pred_used[i] = true;
            truth_used[j] = true;
            tp += 1;
        }
    }
    DetectionStats {
        true_positives: tp,
        false_positives: preds.len() - tp,
        false_negatives: truths.len() - tp,
    }
}

/// Precision, recall, F1 over one pool of predictions and truths.
/// With no predictions against a non-empty truth set all three are 0.
pub fn evaluate_detection(
    predictions: &[DetectedObject],
    ground_truth: &[(f64, f64, f64)],
    match_dist: f64,
) -> (f64, f64, f64) {
    let stats = match_detections(predictions, ground_truth, match_dist);
    if predictions.iter().filter(|p| p.is_valid()).count() == 0
        && ground_truth.iter().filter(|g| g.2 > 0.0).count() == 0
    {
        return (1.0, 1.0, 1.0); // vacuous perfection
    }
    (stats.precision(), stats.recall(), stats.f1())
}
