//! Shared rigid-motion and manifold math: SO(3) exponential/logarithm,
//! SE(2)/SE(3) poses, and the boxplus/boxminus tangent-space operators
//! used by the filters and the pose graph.
//!
//! Conventions, fixed project-wide: Hamilton quaternions canonicalized to
//! w >= 0, rotation matrices map body to world, angles in radians.

mod nav;
mod pose;
mod so3;

pub use nav::{boxplus, boxminus, ErrorState, NavState, ERROR_STATE_DIM};
pub use pose::{transform_point, PoseSE2, PoseSE3};
pub use so3::{canonicalize_quaternion, skew, so3_exp, so3_log, so3_right_jacobian_inv};
