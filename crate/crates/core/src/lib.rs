//! 2D LiDAR-inertial SLAM toolkit.
//!
//! The pipeline runs scan preprocessing, a tightly coupled LiDAR-inertial
//! iterated EKF, a learned object-landmark detector, landmark-aided pose
//! fusion, and SE(2) pose-graph optimization. A deterministic corridor
//! simulator and trajectory/detection metrics close the loop for testing.

pub mod backend;
pub mod detector;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod lio;
pub mod orientation;
pub mod preprocess;
pub mod sim;

mod error;

pub use error::{Error, Result};
pub use geometry::{ErrorState, NavState, PoseSE2, PoseSE3};
pub use orientation::ImuSample;
pub use preprocess::{FeatureSet, LaserScan, PointCloud2};
