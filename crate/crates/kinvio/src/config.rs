//! Configuration file format shared by the simulator and the estimator.

use serde::{Deserialize, Serialize};

use crate::motion::RbfParams;
use crate::sim::SimConfig;

/// How the motion factor turns the command window into an effective
/// control.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightingMode {
    /// RBF weighting with online-calibrated parameters.
    Rbf,
    /// RBF weighting with the initial parameters, not optimized.
    RbfFrozen,
    /// Unweighted average of the command window.
    Avg,
    /// Latest command before the earlier frame of the pair.
    Raw,
}

impl WeightingMode {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "rbf" => Some(Self::Rbf),
            "rbf-frozen" => Some(Self::RbfFrozen),
            "avg" => Some(Self::Avg),
            "raw" => Some(Self::Raw),
            _ => None,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Rbf => "rbf",
            Self::RbfFrozen => "rbf-frozen",
            Self::Avg => "avg",
            Self::Raw => "raw",
        }
    }
}

/// Lateral-row handling of the motion residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LateralMode {
    /// Keep the lateral row as a heavily down-weighted soft constraint.
    Soft,
    /// Drop the lateral row (2-row residual).
    Strict,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct MotionSigmas {
    /// Twist-residual 1-sigma (m/s, m/s, rad/s).
    pub lin: f64,
    pub lat: f64,
    pub ang: f64,
}

impl Default for MotionSigmas {
    fn default() -> Self {
        Self {
            lin: 0.02,
            lat: 0.005,
            ang: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct PriorSigmas {
    pub first_pose_trans: f64,
    pub first_pose_rot_deg: f64,
    pub velocity: f64,
    pub bias_acc: f64,
    pub bias_gyro: f64,
    pub extr_trans: f64,
    pub extr_rot_deg: f64,
    pub plane_angle_deg: f64,
    pub rbf_mu: f64,
    pub rbf_sigma: f64,
    pub rbf_scale: f64,
}

impl Default for PriorSigmas {
    fn default() -> Self {
        Self {
            first_pose_trans: 1e-4,
            first_pose_rot_deg: 0.02,
            velocity: 1e-3,
            bias_acc: 0.05,
            bias_gyro: 0.01,
            extr_trans: 0.005,
            extr_rot_deg: 0.5,
            plane_angle_deg: 1.0,
            rbf_mu: 0.1,
            rbf_sigma: 0.3,
            rbf_scale: 0.3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    pub num_frames: usize,
    pub num_keyframes: usize,
    pub keyframe_interval: u64,
    pub command_window: usize,
    pub mode: WeightingMode,
    pub motion_factors: bool,
    pub plane_factor: bool,
    pub forward_residual: bool,
    pub lateral_mode: LateralMode,
    pub rbf_prior: bool,
    pub rbf_init: RbfParams,
    pub motion_sigma: MotionSigmas,
    pub extr_walk_sigma_trans: f64,
    pub extr_walk_sigma_rot_deg: f64,
    pub plane_sigma_angle_deg: f64,
    pub plane_sigma_dist: f64,
    pub huber_px: f64,
    /// Assumed pixel noise is the dataset value floored at this.
    pub pixel_sigma_floor: f64,
    /// Budget of new landmarks hosted per keyframe (lowest ids first,
    /// deterministic).
    pub max_new_landmarks_per_keyframe: usize,
    pub priors: PriorSigmas,
    pub max_iterations: usize,
    pub lm_lambda_init: f64,
    pub rel_decrease_tol: f64,
    pub step_tol: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            num_frames: 3,
            num_keyframes: 7,
            keyframe_interval: 4,
            command_window: 3,
            mode: WeightingMode::Rbf,
            motion_factors: true,
            plane_factor: true,
            forward_residual: false,
            lateral_mode: LateralMode::Soft,
            rbf_prior: true,
            rbf_init: RbfParams::default(),
            motion_sigma: MotionSigmas::default(),
            extr_walk_sigma_trans: 0.001,
            extr_walk_sigma_rot_deg: 0.1,
            plane_sigma_angle_deg: 0.5,
            plane_sigma_dist: 0.005,
            huber_px: 1.5,
            pixel_sigma_floor: 0.5,
            max_new_landmarks_per_keyframe: 28,
            priors: PriorSigmas::default(),
            max_iterations: 50,
            lm_lambda_init: 1e-4,
            rel_decrease_tol: 1e-8,
            step_tol: 1e-8,
        }
    }
}

/// Top-level config file: `[sim]` and `[estimator]` sections, both
/// optional with full defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub sim: SimConfig,
    pub estimator: EstimatorConfig,
}

impl Config {
    pub fn from_str(s: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(s)
    }

    pub fn to_string_pretty(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
