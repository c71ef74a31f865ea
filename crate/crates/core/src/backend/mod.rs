//! SLAM backend: landmark association and fusion, pose-graph
//! construction and Levenberg-Marquardt optimization, and the global map
//! refinement pass.

mod alignment;
mod graph;
mod landmark;
mod optimize;
mod refine;

pub use alignment::{alignment_residual, estimate_alignment, Alignment2D};
pub use graph::{
    build_pose_graph, load_pose_graph, save_pose_graph, GraphConfig, PoseEdge, PoseGraph, PoseNode,
};
pub use landmark::{
    associate, classify_dynamic, fuse_step, Association, FusionConfig, FusionResult, Landmark,
    LandmarkMap, CONFIRM_OBSERVATIONS,
};
pub use optimize::{graph_cost, optimize, LmConfig, OptimizeResult};
pub use refine::{refine_global_map, RefineConfig, RefineResult};
