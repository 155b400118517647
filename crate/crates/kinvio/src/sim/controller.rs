//! Low-level controller response and ground-truth trajectory generation.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{se2, Pose2, Twist2};
use crate::motion::ControlCommand;

/// Response of the low-level velocity controller: a deadtime buffer, a
/// gain, a first-order lag and a symmetric per-step acceleration clamp,
/// applied independently to the linear and angular channels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControllerModel {
    pub deadtime: f64,
    pub accel_limit_lin: f64,
    pub accel_limit_ang: f64,
    pub lag_time_constant: f64,
    pub gain_lin: f64,
    pub gain_ang: f64,
}

impl ControllerModel {
    /// Pass-through controller: no delay, no shaping.
    pub fn identity() -> Self {
        Self {
            deadtime: 0.0,
            accel_limit_lin: f64::INFINITY,
            accel_limit_ang: f64::INFINITY,
            lag_time_constant: 0.0,
            gain_lin: 1.0,
            gain_ang: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let ok = self.deadtime >= 0.0
            && self.accel_limit_lin >= 0.0
            && self.accel_limit_ang >= 0.0
            && self.lag_time_constant >= 0.0
            && self.gain_lin > 0.0
            && self.gain_lin < 2.0
            && self.gain_ang > 0.0
            && self.gain_ang < 2.0;
        if ok {
            Ok(())
        } else {
            Err(SimError::InvalidController)
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("command script timestamps are not monotone at index {0}")]
    NonMonotoneScript(usize),
    #[error("controller parameters out of range")]
    InvalidController,
    #[error("simulation step must be positive and at most 1e-3 s, got {0}")]
    BadStep(f64),
}

/// Commanded twist active at time `t` (zero-order hold, zero before the
/// first command). A nanosecond slack keeps grid times that are equal to a
/// command time up to rounding on the "active" side of the boundary.
pub fn command_at(script: &[ControlCommand], t: f64) -> Twist2 {
    let idx = script.partition_point(|c| c.t <= t + 1e-9);
    if idx == 0 {
        Twist2::zero()
    } else {
        let c = &script[idx - 1];
        Twist2::new(c.v, c.omega)
    }
}

/// Dense ground truth on a fixed grid: poses at the grid times and the
/// executed twist active on each grid interval.
#[derive(Debug, Clone)]
pub struct GroundTruth2d {
    pub dt: f64,
    /// Poses at t_k = k dt, length n+1.
    pub poses: Vec<Pose2>,
    /// Twist active on [t_k, t_{k+1}), length n.
    pub twists: Vec<Twist2>,
}

/// Integrate the commanded script through the controller model. The robot
/// starts at rest at the identity pose; the pose advances by the SE(2)
/// exponential of the executed twist on every grid interval, which makes
/// the stored trajectory exactly consistent with the stored twists.
pub fn simulate_ground_truth(
    script: &[ControlCommand],
    controller: &ControllerModel,
    dt: f64,
    duration: f64,
) -> Result<GroundTruth2d, SimError> {
    if !(dt > 0.0 && dt <= 1e-3 + 1e-12) {
        return Err(SimError::BadStep(dt));
    }
    controller.validate()?;
    for (k, pair) in script.windows(2).enumerate() {
        if pair[1].t <= pair[0].t {
            return Err(SimError::NonMonotoneScript(k + 1));
        }
    }

    let n = (duration / dt).round() as usize;
    let mut poses = Vec::with_capacity(n + 1);
    let mut twists = Vec::with_capacity(n);
    poses.push(Pose2::identity());
    let mut v = 0.0f64;
    let mut w = 0.0f64;
    let alpha = if controller.lag_time_constant > 0.0 {
        1.0 - (-dt / controller.lag_time_constant).exp()
    } else {
        1.0
    };
    for k in 0..n {
        let t = k as f64 * dt;
        let cmd = command_at(script, t - controller.deadtime);
        let target_v = controller.gain_lin * cmd.v;
        let target_w = controller.gain_ang * cmd.omega;
        let mut dv = (target_v - v) * alpha;
        let mut dw = (target_w - w) * alpha;
        if controller.accel_limit_lin.is_finite() {
            let lim = controller.accel_limit_lin * dt;
            dv = dv.clamp(-lim, lim);
        }
        if controller.accel_limit_ang.is_finite() {
            let lim = controller.accel_limit_ang * dt;
            dw = dw.clamp(-lim, lim);
        }
        v += dv;
        w += dw;
        let twist = Twist2::new(v, w);
        let last = *poses.last().unwrap();
        poses.push(last.compose(&se2::exp(&twist, dt)));
        twists.push(twist);
    }
    Ok(GroundTruth2d { dt, poses, twists })
}
