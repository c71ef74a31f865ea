//! Landmark store: association, static/dynamic classification, and the
//! landmark-aided pose correction.

use super::alignment::estimate_alignment;
use crate::geometry::PoseSE2;

/// A tracked world-frame object landmark.
#[derive(Debug, Clone)]
pub struct Landmark {
    pub id: u64,
    /// Running-average center over static observations (world frame).
    pub center: (f64, f64),
    pub radius: f64,
    pub observations: usize,
    pub first_seen: f64,
    pub last_seen: f64,
    /// Max pairwise displacement of observed centers after each observation.
    pub displacement_history: Vec<f64>,
    pub dynamic: bool,
    observed_centers: Vec<(f64, f64)>,
}

/// Landmarks are confirmed after this many observations.
pub const CONFIRM_OBSERVATIONS: usize = 3;

impl Landmark {
    fn new(id: u64, center: (f64, f64), radius: f64, t: f64) -> Self {
        Self {
            id,
            center,
            radius,
            observations: 1,
            first_seen: t,
            last_seen: t,
            displacement_history: vec![0.0],
            dynamic: false,
            observed_centers: vec![center],
        }
    }

    pub fn confirmed(&self) -> bool {
        self.observations >= CONFIRM_OBSERVATIONS
    }

    /// Max pairwise displacement among all observed centers.
    pub fn max_displacement(&self) -> f64 {
        self.displacement_history.last().copied().unwrap_or(0.0)
    }

    fn record(&mut self, center: (f64, f64), radius: f64, t: f64) {
        // Incremental max-pairwise update: only new-vs-old pairs matter.
        let mut max_disp = self.max_displacement();
        for old in &self.observed_centers {
            let d = ((center.0 - old.0).powi(2) + (center.1 - old.1).powi(2)).sqrt();
            max_disp = max_disp.max(d);
        }
        self.observed_centers.push(center);
        self.displacement_history.push(max_disp);
        self.observations += 1;
        self.last_seen = t;
        if !self.dynamic {
            // Static landmarks refine their center and radius by running average.
            let n = self.observations as f64;
            self.center.0 += (center.0 - self.center.0) / n;
            self.center.1 += (center.1 - self.center.1) / n;
            self.radius += (radius - self.radius) / n;
        }
    }
}

/// Dynamic iff the max pairwise displacement of observed centers exceeds
/// the threshold (strict); the flag latches once set. Requires at least
/// [`CONFIRM_OBSERVATIONS`] observations to ever flip.
pub fn classify_dynamic(landmark: &Landmark, threshold: f64) -> bool {
    if landmark.dynamic {
        return true;
    }
    if landmark.observations < CONFIRM_OBSERVATIONS {
        return false;
    }
    landmark.max_displacement() > threshold
}

/// Association outcome for one frame of world-frame detections.
#[derive(Debug, Clone, Default)]
pub struct Association {
    /// (detection index, landmark id) mutual-nearest pairs within the gate.
    pub matches: Vec<(usize, u64)>,
    /// Detection indices that spawned provisional landmarks.
    pub spawned: Vec<usize>,
}

/// Mutual-nearest-neighbor association of detections to landmarks within
/// `gate` meters; unmatched detections are reported for spawning.
pub fn associate(
    detections: &[(f64, f64, f64)],
    landmarks: &[Landmark],
    gate: f64,
) -> Association {
    let mut result = Association::default();
    if detections.is_empty() {
        return result;
    }
    let dist = |d: &(f64, f64, f64), l: &Landmark| -> f64 {
        ((d.0 - l.center.0).powi(2) + (d.1 - l.center.1).powi(2)).sqrt()
    };
    // Nearest landmark per detection and nearest detection per landmark.
    let nearest_lm: Vec<Option<(usize, f64)>> = detections
        .iter()
        .map(|d| {
            landmarks
                .iter()
                .enumerate()
                .map(|(j, l)| (j, dist(d, l)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        })
        .collect();
    let nearest_det: Vec<Option<(usize, f64)>> = landmarks
        .iter()
        .map(|l| {
            detections
                .iter()
                .enumerate()
                .map(|(i, d)| (i, dist(d, l)))
                .min_by(|a, b| a.1.partial_cmp(&b.1).unwrap())
        })
        .collect();

    for (i, nl) in nearest_lm.iter().enumerate() {
        match nl {
            Some((j, d)) if *d <= gate && nearest_det[*j].map(|(bi, _)| bi) == Some(i) => {
                result.matches.push((i, landmarks[*j].id));
            }
            _ => result.spawned.push(i),
        }
    }
    result
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct FusionConfig {
    /// Association gate (m).
    pub gate: f64,
    /// Displacement threshold for dynamic classification (m).
    pub dynamic_threshold: f64,
    /// Blend between odometry (0) and landmark alignment (1).
    pub fusion_weight: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            gate: 0.5,
            dynamic_threshold: 0.5,
            fusion_weight: 0.5,
        }
    }
}

/// Mutable landmark collection shared across the run.
#[derive(Debug, Clone, Default)]
pub struct LandmarkMap {
    pub landmarks: Vec<Landmark>,
    next_id: u64,
}

impl LandmarkMap {
    pub fn get(&self, id: u64) -> Option<&Landmark> {
        self.landmarks.iter().find(|l| l.id == id)
    }

    pub fn static_confirmed(&self) -> impl Iterator<Item = &Landmark> {
        self.landmarks.iter().filter(|l| l.confirmed() && !l.dynamic)
    }

    fn spawn(&mut self, center: (f64, f64), radius: f64, t: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.landmarks.push(Landmark::new(id, center, radius, t));
        id
    }

    fn record(&mut self, id: u64, center: (f64, f64), radius: f64, t: f64, threshold: f64) {
        if let Some(l) = self.landmarks.iter_mut().find(|l| l.id == id) {
            l.record(center, radius, t);
            l.dynamic = classify_dynamic(l, threshold);
        }
    }
}

/// Outcome of one fusion step.
#[derive(Debug, Clone)]
pub struct FusionResult {
    pub pose: PoseSE2,
    /// Static confirmed landmark ids matched this frame, with the
    /// sensor-frame detection center that hit each.
    pub matched_static: Vec<(u64, (f64, f64))>,
    pub alignment_applied: bool,
}

/// Landmark-aided pose correction.
///
/// Detections arrive in the sensor frame; the odometry pose transforms
/// them to the world for association. With at least two static confirmed
/// matches the sensor-frame centers are rigidly aligned onto the stored
/// landmark centers, which yields a corrected sensor pose; the output
/// interpolates between odometry and that correction. The map is then
/// updated with the fused pose.
pub fn fuse_step(
    odom_pose: &PoseSE2,
    detections: &[(f64, f64, f64)],
    map: &mut LandmarkMap,
    cfg: &FusionConfig,
    timestamp: f64,
) -> FusionResult {
    let valid: Vec<(usize, (f64, f64, f64))> = detections
        .iter()
        .enumerate()
        .filter(|(_, d)| d.2 > 0.0)
        .map(|(i, d)| (i, *d))
        .collect();
    let world_dets: Vec<(f64, f64, f64)> = valid
        .iter()
        .map(|(_, d)| {
            let w = odom_pose.transform((d.0, d.1));
            (w.0, w.1, d.2)
        })
        .collect();

    let assoc = associate(&world_dets, &map.landmarks, cfg.gate);

    // Pairs eligible for alignment: matched to static confirmed landmarks.
    let mut align_pairs: Vec<((f64, f64), (f64, f64))> = Vec::new();
    let mut matched_static = Vec::new();
    for (det_idx, lm_id) in &assoc.matches {
        if let Some(lm) = map.get(*lm_id) {
            if lm.confirmed() && !lm.dynamic {
                let sensor = (valid[*det_idx].1 .0, valid[*det_idx].1 .1);
                align_pairs.push((sensor, lm.center));
                matched_static.push((*lm_id, sensor));
            }
        }
    }

    let mut pose = *odom_pose;
    let mut alignment_applied = false;
    if align_pairs.len() >= 2 {
        if let Ok(alignment) = estimate_alignment(&align_pairs) {
            if !alignment.translation_only {
                pose = odom_pose.interpolate(&alignment.pose, cfg.fusion_weight);
                alignment_applied = true;
            }
        }
    }

    // Record observations with the fused pose.
    for (det_idx, lm_id) in &assoc.matches {
        let d = valid[*det_idx].1;
        let w = pose.transform((d.0, d.1));
        map.record(*lm_id, w, d.2, timestamp, cfg.dynamic_threshold);
    }
    for det_idx in &assoc.spawned {
        let d = valid[*det_idx].1;
        let w = pose.transform((d.0, d.1));
        map.spawn(w, d.2, timestamp);
    }

    FusionResult {
        pose,
        matched_static,
        alignment_applied,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn landmark_at(id: u64, x: f64, y: f64, obs: usize) -> Landmark {
        let mut l = Landmark::new(id, (x, y), 0.3, 0.0);
        for k in 1..obs {
            l.record((x, y), 0.3, k as f64);
        }
        l
    }

    #[test]
    fn exact_detection_matches() {
        let lms = vec![landmark_at(7, 2.0, 3.0, 3)];
        let out = associate(&[(2.0, 3.0, 0.3)], &lms, 0.5);
        assert_eq!(out.matches, vec![(0, 7)]);
        assert!(out.spawned.is_empty());
    }

    #[test]
    fn far_detection_spawns() {
        let lms = vec![landmark_at(7, 2.0, 3.0, 3)];
        let out = associate(&[(12.0, 3.0, 0.3)], &lms, 0.5);
        assert!(out.matches.is_empty());
        assert_eq!(out.spawned, vec![0]);
    }

    #[test]
    fn mutual_nearest_resolves_ties() {
        // Two detections near one landmark: only the closer one matches.
        let lms = vec![landmark_at(1, 0.0, 0.0, 3)];
        let dets = vec![(0.10, 0.0, 0.3), (-0.12, 0.0, 0.3)];
        let out = associate(&dets, &lms, 0.5);
        assert_eq!(out.matches, vec![(0, 1)]);
        assert_eq!(out.spawned, vec![1]);
    }

    #[test]
    fn jittering_landmark_stays_static() {
        let mut l = Landmark::new(0, (5.0, 5.0), 0.3, 0.0);
        for k in 1..10 {
            let jitter = 0.05 * ((k % 3) as f64 - 1.0);
            l.record((5.0 + jitter, 5.0), 0.3, k as f64);
        }
        assert!(!classify_dynamic(&l, 0.5));
    }

    #[test]
    fn drifting_landmark_turns_dynamic() {
        let mut l = Landmark::new(0, (5.0, 5.0), 0.3, 0.0);
        for k in 1..6 {
            l.record((5.0 + 0.25 * k as f64, 5.0), 0.3, k as f64);
        }
        assert!(classify_dynamic(&l, 0.5));
    }

    #[test]
    fn exactly_threshold_displacement_is_static() {
        let mut l = Landmark::new(0, (0.0, 0.0), 0.3, 0.0);
        l.record((0.5, 0.0), 0.3, 1.0);
        l.record((0.25, 0.0), 0.3, 2.0);
        assert_relative_eq!(l.max_displacement(), 0.5);
        assert!(!classify_dynamic(&l, 0.5));
    }

    #[test]
    fn dynamic_flag_latches() {
        let mut l = Landmark::new(0, (0.0, 0.0), 0.3, 0.0);
        l.record((1.0, 0.0), 0.3, 1.0);
        l.record((2.0, 0.0), 0.3, 2.0);
        l.dynamic = classify_dynamic(&l, 0.5);
        assert!(l.dynamic);
        // Many stationary observations later it stays dynamic.
        for k in 3..20 {
            l.record((2.0, 0.0), 0.3, k as f64);
        }
        assert!(classify_dynamic(&l, 0.5));
    }

    #[test]
    fn no_detections_returns_odometry_pose() {
        let mut map = LandmarkMap::default();
        let odom = PoseSE2::new(1.0, 2.0, 0.3);
        let out = fuse_step(&odom, &[], &mut map, &FusionConfig::default(), 0.0);
        assert_eq!(out.pose, odom);
        assert!(!out.alignment_applied);
    }

    #[test]
    fn full_weight_returns_alignment_pose() {
        // Confirmed static landmarks at known positions; odometry is off
        // by a small offset, detections are perfect in the true frame.
        let mut map = LandmarkMap::default();
        let truth = PoseSE2::new(3.0, 1.0, 0.2);
        let lm_world = [(5.0, 2.0, 0.3), (4.0, -1.0, 0.3), (7.0, 0.5, 0.3)];
        for (x, y, r) in lm_world {
            let id = map.spawn((x, y), r, 0.0);
            map.record(id, (x, y), r, 1.0, 0.5);
            map.record(id, (x, y), r, 2.0, 0.5);
        }
        let inv = truth.inverse();
        let dets: Vec<(f64, f64, f64)> = lm_world
            .iter()
            .map(|(x, y, r)| {
                let s = inv.transform((*x, *y));
                (s.0, s.1, *r)
            })
            .collect();
        let odom = PoseSE2::new(3.1, 0.9, 0.25);
        let cfg = FusionConfig {
            fusion_weight: 1.0,
            ..FusionConfig::default()
        };
        let out = fuse_step(&odom, &dets, &mut map, &cfg, 3.0);
        assert!(out.alignment_applied);
        assert_relative_eq!(out.pose.x, truth.x, epsilon = 1e-9);
        assert_relative_eq!(out.pose.y, truth.y, epsilon = 1e-9);
        assert_relative_eq!(out.pose.theta, truth.theta, epsilon = 1e-9);
    }

    #[test]
    fn zero_weight_is_identity_on_odometry() {
        let mut map = LandmarkMap::default();
        for (x, y) in [(5.0, 2.0), (4.0, -1.0)] {
            let id = map.spawn((x, y), 0.3, 0.0);
            map.record(id, (x, y), 0.3, 1.0, 0.5);
            map.record(id, (x, y), 0.3, 2.0, 0.5);
        }
        let odom = PoseSE2::new(0.1, -0.2, 0.05);
        let dets = vec![(4.9, 2.1, 0.3), (3.9, -0.9, 0.3)];
        let cfg = FusionConfig {
            fusion_weight: 0.0,
            ..FusionConfig::default()
        };
        let out = fuse_step(&odom, &dets, &mut map, &cfg, 3.0);
        assert_eq!(out.pose, odom);
    }
}
