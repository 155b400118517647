//! Forward motion prediction from calibrated effective controls, and the
//! prediction-error study across weighting modes and horizons.

use thiserror::Error;

use crate::config::WeightingMode;
use crate::geometry::{se2, Pose2, Pose3, Twist2};
use crate::motion::{self, CommandWindow, ControlCommand, RbfParams};
use crate::sim::Dataset;

#[derive(Debug, Error)]
pub enum PredictError {
    #[error("no command at or before t = {0}")]
    NoCommandCoverage(f64),
    #[error("ground truth does not cover t = {0}")]
    NoGroundTruth(f64),
}

/// Effective control at prediction time `t` for a weighting mode.
fn control_for(
    commands: &[ControlCommand],
    t: f64,
    window_size: usize,
    mode: WeightingMode,
    params: &RbfParams,
    init_params: &RbfParams,
) -> Option<Twist2> {
    match mode {
        WeightingMode::Raw => {
            let idx = commands.partition_point(|c| c.t <= t + 1e-9);
            if idx == 0 {
                None
            } else {
                Some(Twist2::new(commands[idx - 1].v, commands[idx - 1].omega))
            }
        }
        _ => {
            let window = CommandWindow::build(commands, t, window_size)?;
            Some(match mode {
                WeightingMode::Rbf => motion::effective_control(&window, params),
                WeightingMode::RbfFrozen => motion::effective_control(&window, init_params),
                WeightingMode::Avg => motion::window_average(&window),
                WeightingMode::Raw => unreachable!(),
            })
        }
    }
}

/// Predict the base pose over `horizon` seconds from `start`, advancing by
/// the SE(2) exponential of the effective control at each step. The
/// command window is shifted along the prediction with the step.
#[allow(clippy::too_many_arguments)]
pub fn predict(
    start: Pose2,
    t_start: f64,
    commands: &[ControlCommand],
    window_size: usize,
    mode: WeightingMode,
    params: &RbfParams,
    horizon: f64,
    step: f64,
) -> Result<Vec<(f64, Pose2)>, PredictError> {
    let n = (horizon / step).round() as usize;
    let mut out = Vec::with_capacity(n + 1);
    let mut pose = start;
    out.push((t_start, pose));
    let init = RbfParams::default();
    for k in 0..n {
        let t = t_start + k as f64 * step;
        let xi = control_for(commands, t, window_size, mode, params, &init)
            .ok_or(PredictError::NoCommandCoverage(t))?;
        pose = pose.compose(&se2::exp(&xi, step));
        out.push((t_start + (k + 1) as f64 * step, pose));
    }
    Ok(out)
}

/// Planar base pose of a ground-truth sensor pose.
pub fn gt_base_pose2(dataset: &Dataset, sensor_pose: &Pose3) -> Pose2 {
    let plane = dataset.meta.plane.pose();
    let extr = dataset.meta.extr_true.pose();
    let base_in_plane = plane
        .inverse()
        .compose(sensor_pose)
        .compose(&extr.inverse());
    let yaw = crate::geometry::so3::log(&base_in_plane.rot).z;
    Pose2::new(yaw, base_in_plane.trans.x, base_in_plane.trans.y)
}

/// One row of the prediction error study.
#[derive(Debug, Clone)]
pub struct PredictionErrorRow {
    pub mode: WeightingMode,
    pub horizon: f64,
    pub translation_rmse: f64,
    pub heading_rmse_deg: f64,
    pub samples: usize,
    /// Per-start endpoint translation errors (for medians).
    pub translation_errors: Vec<f64>,
}

/// Per-horizon endpoint errors of predictions started at every suitable
/// frame, for each weighting mode.
pub fn prediction_error_study(
    dataset: &Dataset,
    params: &RbfParams,
    horizons: &[f64],
    modes: &[WeightingMode],
) -> Result<Vec<PredictionErrorRow>, PredictError> {
    let step = 1.0 / dataset.meta.rig.control_rate as f64;
    let mut rows = Vec::new();
    for &mode in modes {
        for &h in horizons {
            let mut errs_t = Vec::new();
            let mut errs_r = Vec::new();
            for frame in &dataset.frames {
                let t_end = frame.t + h;
                if t_end > dataset.meta.duration + 1e-9 {
                    break;
                }
                let Some(gt0) = dataset.gt_at(frame.t) else {
                    continue;
                };
                let Some(gt1) = dataset.gt_at(t_end) else {
                    continue;
                };
                if CommandWindow::build(&dataset.commands, frame.t, 1).is_none() {
                    continue;
                }
                let start = gt_base_pose2(dataset, &gt0.pose);
                let traj = predict(
                    start,
                    frame.t,
                    &dataset.commands,
                    3,
                    mode,
                    params,
                    h,
                    step,
                )?;
                let end = traj.last().unwrap().1;
                let gt_end = gt_base_pose2(dataset, &gt1.pose);
                errs_t.push((end.trans - gt_end.trans).norm());
                errs_r.push(se2::wrap_angle(end.angle - gt_end.angle).abs());
            }
            let n = errs_t.len().max(1) as f64;
            let rmse_t = (errs_t.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
            let rmse_r = (errs_r.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
            rows.push(PredictionErrorRow {
                mode,
                horizon: h,
                translation_rmse: rmse_t,
                heading_rmse_deg: rmse_r.to_degrees(),
                samples: errs_t.len(),
                translation_errors: errs_t,
            });
        }
    }
    Ok(rows)
}

/// Median of a sample list.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
