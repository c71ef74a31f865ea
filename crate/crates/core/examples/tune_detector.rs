use slam2d_core::backend::LandmarkMap;
use slam2d_core::detector::{detect, evaluate_loss, train, DetectionStats, match_detections, NetworkConfig, TrainingConfig};
use slam2d_core::io::{build_training_windows, simulate_to_dir, RunConfig};
use slam2d_core::sim::{build_corridor, SensorNoise, SimObject, TrajectorySpec};
use std::path::Path;

fn traj(wps: Vec<(f64, f64)>, speed: f64) -> TrajectorySpec {
    TrajectorySpec { waypoints: wps, speed, scan_rate: 10.0, imu_rate: 100.0, hold_time: 0.0 }
}

fn main() {
    let _ = LandmarkMap::default();
    let tmp = std::env::temp_dir().join("tune_detector");
    let mut dirs: Vec<std::path::PathBuf> = Vec::new();

    // Scene 1: wide room, four objects visible most of the time.
    let env1 = build_corridor(16.0, 12.0, vec![
        SimObject::pillar(5.0, 4.0, 0.3),
        SimObject::pillar(11.0, 4.5, 0.45),
        SimObject::pillar(5.5, 8.5, 0.2),
        SimObject::pillar(10.5, 8.0, 0.35),
    ]).unwrap();
    let t1 = traj(vec![(2.0, 2.0), (14.0, 2.5), (13.5, 10.0), (2.5, 9.5), (2.0, 2.0)], 0.5);

    // Scene 2: corridor with scattered pillars, one or two in range.
    let env2 = build_corridor(50.0, 5.0, vec![
        SimObject::pillar(9.0, 1.0, 0.25),
        SimObject::pillar(21.0, 4.0, 0.4),
        SimObject::pillar(33.0, 1.2, 0.3),
        SimObject::pillar(44.0, 3.8, 0.5),
    ]).unwrap();
    let t2 = traj(vec![(1.0, 2.5), (49.0, 2.5)], 0.45);

    // Scene 3: mid-density, radii spread, slight weave.
    let env3 = build_corridor(30.0, 8.0, vec![
        SimObject::pillar(6.0, 2.0, 0.35),
        SimObject::pillar(12.0, 6.0, 0.25),
        SimObject::pillar(18.0, 2.5, 0.45),
        SimObject::pillar(24.0, 5.5, 0.3),
        SimObject::pillar(15.0, 6.8, 0.2),
    ]).unwrap();
    let t3 = traj(vec![(1.5, 4.0), (10.0, 3.0), (20.0, 5.0), (28.5, 4.0)], 0.5);

    let scenes: Vec<(&str, _, _, u64)> = vec![
        ("room", env1, t1, 101),
        ("corr", env2, t2, 202),
        ("mid", env3, t3, 303),
    ];
    let cfg = RunConfig::default();
    let mut samples = Vec::new();
    for (name, env, t, seed) in &scenes {
        let dir = tmp.join(name);
        simulate_to_dir(env, t, &SensorNoise::default(), *seed, &dir).unwrap();
        let mut s = build_training_windows(&cfg, &dir).unwrap();
        println!("{name}: {} windows", s.len());
        samples.append(&mut s);
        dirs.push(dir);
    }
    // Drop windows whose every slot is masked.
    samples.retain(|(_, t)| (0..4).any(|s| t[s * 3 + 2] > 0.0));
    println!("total labeled windows: {}", samples.len());

    let tcfg = TrainingConfig {
        learning_rate: std::env::var("LR").map(|v| v.parse().unwrap()).unwrap_or(0.02),
        epochs: std::env::var("EPOCHS").map(|v| v.parse().unwrap()).unwrap_or(30),
        batch_size: 32,
        window: 5,
        seed: 7,
        validation_fraction: 0.15,
        log_every: 2,
    };
    {
        use slam2d_core::detector::{loss_and_gradients, NetworkParams, TRAINABLE_NAMES};
        let probe = NetworkParams::xavier(NetworkConfig::default(), 7);
        let ws: Vec<&[slam2d_core::detector::DetectorInput]> =
            samples.iter().take(32).map(|s| s.0.as_slice()).collect();
        let ts: Vec<[f64; 12]> = samples.iter().take(32).map(|s| s.1).collect();
        let (l0, g, _) = loss_and_gradients(&probe, &ws, &ts).unwrap();
        eprintln!("init loss {l0:.3}");
        for (n, t) in TRAINABLE_NAMES.iter().zip(&g.0) {
            let norm = t.data.iter().map(|x| x * x).sum::<f64>().sqrt();
            eprintln!("  grad {n}: {norm:.3e}");
        }
    }
    let t0 = std::time::Instant::now();
    let params = train(&samples, &tcfg, NetworkConfig::default()).unwrap();
    println!("trained in {:.1} s, train-set loss {:.4}", t0.elapsed().as_secs_f64(),
             evaluate_loss(&params, &samples).unwrap());
    {
        // Eval-mode (running statistics) MSE over the first 200 samples.
        use slam2d_core::detector::forward;
        let mut mse = 0.0;
        let mut count = 0usize;
        for (w, t) in samples.iter().take(200) {
            let out = forward(&params, w).unwrap();
            for slot in 0..4 {
                if t[slot * 3 + 2] > 0.0 {
                    for j in slot * 3..slot * 3 + 3 {
                        mse += (out[j] - t[j]).powi(2);
                        count += 1;
                    }
                }
            }
        }
        println!("eval-mode train MSE: {:.4}", mse / count as f64);
    }

    // Held-out evaluation: corridor-A-like with different pillars/seed.
    let env_h = build_corridor(45.0, 4.0, vec![
        SimObject::pillar(8.0, 0.9, 0.3),
        SimObject::pillar(19.0, 3.1, 0.35),
        SimObject::pillar(30.0, 0.8, 0.25),
        SimObject::pillar(40.0, 3.2, 0.4),
    ]).unwrap();
    let t_h = traj(vec![(0.5, 2.0), (44.5, 2.0)], 0.4);
    let dir_h = tmp.join("heldout");
    simulate_to_dir(&env_h, &t_h, &SensorNoise::default(), 999, &dir_h).unwrap();
    let held = build_training_windows(&cfg, &dir_h).unwrap();
    let labels = slam2d_core::io::formats::read_object_frames(Path::new(&dir_h.join("labels.jsonl"))).unwrap();

    // Geometric baseline: use the last frame's preliminary objects directly.
    {
        use slam2d_core::detector::DetectedObject;
        let prelim_frames = slam2d_core::io::formats::read_object_frames(Path::new(&dir_h.join("prelim_probe.jsonl"))).ok();
        let _ = prelim_frames;
        let mut base = DetectionStats::default();
        for (i, (window, _)) in held.iter().enumerate() {
            let frame = i + 4;
            // Slots 4..16 of the last input row are the preliminary objects.
            let row = window.last().unwrap();
            let dets: Vec<DetectedObject> = (0..4)
                .map(|s| DetectedObject { center_x: row[4 + s * 3], center_y: row[5 + s * 3], radius: row[6 + s * 3] })
                .collect();
            let truth: Vec<(f64, f64, f64)> = labels[frame].1.iter().copied().filter(|o| o.2 > 0.0).collect();
            base.accumulate(&match_detections(&dets, &truth, 0.5));
        }
        println!("prelim baseline: precision {:.4} recall {:.4} (tp {} fp {} fn {})",
                 base.precision(), base.recall(), base.true_positives, base.false_positives, base.false_negatives);
    }
    let mut stats = DetectionStats::default();
    let window_t = 5usize;
    for (i, (window, _)) in held.iter().enumerate() {
        let frame = i + window_t - 1;
        let dets = detect(&params, window).unwrap();
        let truth: Vec<(f64, f64, f64)> = labels[frame].1.iter().copied().filter(|o| o.2 > 0.0).collect();
        stats.accumulate(&match_detections(&dets, &truth, 0.5));
    }
    println!(
        "held-out: precision {:.4} recall {:.4} f1 {:.4} (tp {} fp {} fn {})",
        stats.precision(), stats.recall(), stats.f1(),
        stats.true_positives, stats.false_positives, stats.false_negatives
    );
}
