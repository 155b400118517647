//! Sliding-window visual-inertial odometry for wheeled robots that
//! calibrates a velocity-control kinematic motion model online, plus the
//! simulator and evaluation tooling needed to exercise it end to end.

pub mod geometry;
pub mod motion;
pub mod pipeline;
pub mod plane;
pub mod config;
pub mod estimator;
pub mod metrics;
pub mod observability;
pub mod predict;
pub mod preint;
pub mod sim;
