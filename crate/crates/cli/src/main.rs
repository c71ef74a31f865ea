//! Command-line driver for the slam2d toolkit.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use slam2d_core::backend::{graph_cost, load_pose_graph, optimize, save_pose_graph};
use slam2d_core::detector::{evaluate_loss, save_checkpoint, train, NetworkConfig};
use slam2d_core::eval::{ape, ate};
use slam2d_core::io::{
    build_training_windows, run_pipeline, simulate_to_dir, DatasetBundle, RunConfig, Stage,
};
use slam2d_core::io::formats::read_trajectory;
use slam2d_core::sim::preset_by_name;

#[derive(Parser)]
#[command(name = "slam2d", version, about = "2D LiDAR-inertial SLAM toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a scene preset.
    Simulate {
        /// Scene preset: corridor-A or corridor-B.
        #[arg(long, default_value = "corridor-A")]
        preset: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the SLAM pipeline over a dataset directory.
    Slam {
        /// Dataset directory (scans.jsonl, imu.jsonl, ...).
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated stage list or "all".
        #[arg(long, default_value = "all")]
        stages: String,
        /// Trained detector checkpoint; geometric fallback when absent.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train the landmark detector on one or more dataset directories.
    TrainDetector {
        /// Dataset directories with labels.jsonl.
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Checkpoint file to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run only detection over a dataset, writing detections.jsonl.
    Detect {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare an estimated trajectory against a reference.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long = "ref")]
        reference: PathBuf,
    },
    /// Optimize a pose graph file and report the cost change.
    GraphOpt {
        #[arg(long)]
        graph: PathBuf,
        /// Optimized graph output; defaults to <graph>.optimized.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
}

fn load_config(path: &Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig, slam2d_core::Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::from_file(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.training.seed = s;
    }
    Ok(cfg)
}

fn run() -> Result<(), String> {
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            preset,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(&config, Some(seed)).map_err(|e| e.to_string())?;
            let scene = preset_by_name(&preset)
                .ok_or_else(|| format!("unknown preset: {preset} (try corridor-A, corridor-B)"))?;
            let sim = simulate_to_dir(&scene.environment, &scene.trajectory, &cfg.sensor, seed, &out)
                .map_err(|e| e.to_string())?;
            println!(
                "simulated {}: {} scans, {} imu samples -> {}",
                scene.name,
                sim.scans.len(),
                sim.imu.len(),
                out.display()
            );
            Ok(())
        }
        Command::Slam {
            data,
            config,
            seed,
            out,
            stages,
            checkpoint,
        } => {
            let cfg = load_config(&config, seed).map_err(|e| e.to_string())?;
            let stages = Stage::parse_list(&stages).map_err(|e| e.to_string())?;
            let bundle = DatasetBundle::from_dir(&data);
            let summary = run_pipeline(&cfg, &bundle, &stages, &out, checkpoint.as_deref())
                .map_err(|e| e.to_string())?;
            println!(
                "ran stages [{}] over {} scans (detector: {})",
                summary.ran.join(", "),
                summary.scans,
                summary.detector_source
            );
            if let Some(ms) = summary.mean_frame_ms {
                println!("mean per-frame time: {ms:.2} ms");
            }
            if let Some(r) = summary.ate {
                println!(
                    "ATE  min {:.4}  max {:.4}  mean {:.4}  median {:.4}  rmse {:.4}  std {:.4}",
                    r.min, r.max, r.mean, r.median, r.rmse, r.std
                );
            }
            if let Some(r) = summary.ape {
                println!(
                    "APE  min {:.4}  max {:.4}  mean {:.4}  median {:.4}  rmse {:.4}  std {:.4}",
                    r.min, r.max, r.mean, r.median, r.rmse, r.std
                );
            }
            Ok(())
        }
        Command::TrainDetector {
            data,
            config,
            seed,
            out,
        } => {
            let cfg = load_config(&config, seed).map_err(|e| e.to_string())?;
            let mut samples = Vec::new();
            for dir in &data {
                let mut s = build_training_windows(&cfg, dir).map_err(|e| e.to_string())?;
                samples.append(&mut s);
            }
            println!("training on {} windows", samples.len());
            let net_cfg = NetworkConfig {
                window: cfg.training.window,
                ..NetworkConfig::default()
            };
            let params = train(&samples, &cfg.training, net_cfg).map_err(|e| e.to_string())?;
            let loss = evaluate_loss(&params, &samples).map_err(|e| e.to_string())?;
            save_checkpoint(&params, &out).map_err(|e| e.to_string())?;
            println!("training done, loss {loss:.6}; checkpoint -> {}", out.display());
            Ok(())
        }
        Command::Detect {
            data,
            checkpoint,
            config,
            out,
        } => {
            let cfg = load_config(&config, None).map_err(|e| e.to_string())?;
            let bundle = DatasetBundle::from_dir(&data);
            let summary = run_pipeline(&cfg, &bundle, &[Stage::Detect], &out, Some(&checkpoint))
                .map_err(|e| e.to_string())?;
            println!(
                "detections written for {} scans -> {}",
                summary.scans,
                out.join("detections.jsonl").display()
            );
            Ok(())
        }
        Command::Eval { est, reference } => {
            let est_traj = read_trajectory(&est).map_err(|e| e.to_string())?;
            let ref_traj = read_trajectory(&reference).map_err(|e| e.to_string())?;
            let ate_r = ate(&est_traj, &ref_traj).map_err(|e| e.to_string())?;
            let ape_r = ape(&est_traj, &ref_traj).map_err(|e| e.to_string())?;
            println!("metric  min  max  mean  median  rmse  std");
            for (name, r) in [("ATE", ate_r), ("APE", ape_r)] {
                println!(
                    "{name}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}  {:.4}",
                    r.min, r.max, r.mean, r.median, r.rmse, r.std
                );
            }
            Ok(())
        }
        Command::GraphOpt { graph, out, config } => {
            let cfg = load_config(&config, None).map_err(|e| e.to_string())?;
            let g = load_pose_graph(&graph).map_err(|e| e.to_string())?;
            let result = optimize(&g, &cfg.lm).map_err(|e| e.to_string())?;
            println!(
                "cost: {:.6e} -> {:.6e} in {} iterations (converged: {})",
                result.initial_cost, result.final_cost, result.iterations, result.converged
            );
            let out = out.unwrap_or_else(|| graph.with_extension("optimized"));
            let mut optimized = g.clone();
            for (node, pose) in optimized.nodes.iter_mut().zip(&result.poses) {
                node.pose = *pose;
            }
            save_pose_graph(&optimized, &out).map_err(|e| e.to_string())?;
            let index: std::collections::HashMap<u64, usize> = optimized
                .nodes
                .iter()
                .enumerate()
                .map(|(i, n)| (n.id, i))
                .collect();
            debug_assert!(graph_cost(&optimized, &result.poses, &index) <= result.initial_cost);
            println!("optimized graph -> {}", out.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(message) => {
            eprintln!("error: {message}");
            ExitCode::FAILURE
        }
    }
}
