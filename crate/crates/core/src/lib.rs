//! Trajectory generation for quadrotors with a global yaw parameterization.
//!
//! Yaw is represented by an unnormalized planar virtual variable whose
//! normalization yields the heading vector, which removes the angle-wrapping
//! discontinuity of branch-valued yaw. The crate provides the piecewise
//! polynomial substrate, the virtual-variable mapping, convex yaw planners
//! with two branch-angle baselines, differentiable perception and dynamics
//! penalties, a joint position+yaw nonlinear optimizer, a receding-horizon
//! target-tracking simulation, and a randomized planner benchmark.

pub mod splines;
pub mod yawparam;
pub mod yawqp;
pub mod penalties;
pub mod lbfgs;
pub mod traversal;
pub mod tracksim;
pub mod bench;

pub use splines::{solve_min_control, BoundaryState, MinControlSystem, PiecewisePoly, SplineError};
