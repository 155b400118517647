//! Lie-group primitives for SO(3)/SE(3) and SO(2)/SE(2).
//!
//! Everything here is a pure value type or a pure function; all maps carry
//! singularity-safe small-angle branches with the switch at 1e-6 rad.

pub mod pose3;
pub mod se2;
pub mod so3;

pub use pose3::Pose3;
pub use se2::{Pose2, Twist2};
