//! Numeric observability checks of the RBF calibration block: Jacobian
//! structure, rank of the stacked observability blocks under different
//! excitation, and the identifiability role of the Gaussian priors.

use nalgebra::{DMatrix, Matrix3, Vector3};

use crate::config::EstimatorConfig;
use crate::estimator::{run_sequence, RbfDiag, RunOptions};
use crate::motion::{self, CommandWindow, RbfParams};
use crate::sim::Dataset;

/// Relative SVD threshold for numeric rank decisions.
pub const RANK_THRESHOLD: f64 = 1e-10;

/// One channel's observability row (s-entry, A, B): the s-entry is
/// -vbar/s, A and B are the negated kernel-mean and kernel-width
/// derivatives of the effective control.
pub fn rbf_jacobian_block(window: &CommandWindow, params: &RbfParams) -> (Vector3<f64>, Vector3<f64>) {
    let xi = motion::effective_control(window, params);
    let jac = motion::effective_control_jacobian(window, params);
    // Columns of jac are (mu_lin, sigma_lin, s_lin, mu_ang, sigma_ang,
    // s_ang); the observability rows carry the residual sign convention.
    let lin = Vector3::new(-xi.v / params.s_lin, -jac[(0, 0)], -jac[(0, 1)]);
    let ang = Vector3::new(-xi.omega / params.s_ang, -jac[(1, 3)], -jac[(1, 4)]);
    (lin, ang)
}

/// Diagonal observability block of one channel: diag(-vbar/s, A, B).
pub fn m_rbf(block: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::from_diagonal(block)
}

/// Numeric rank of the stacked per-frame observability blocks of one
/// channel.
pub fn rank_of_stacked_blocks(blocks: &[Vector3<f64>]) -> usize {
    if blocks.is_empty() {
        return 0;
    }
    let mut stacked = DMatrix::zeros(3 * blocks.len(), 3);
    for (k, b) in blocks.iter().enumerate() {
        stacked
            .view_mut((3 * k, 0), (3, 3))
            .copy_from(&m_rbf(b));
    }
    let svd = nalgebra::SVD::new(stacked, false, false);
    let max_sv = svd.singular_values.max();
    if max_sv <= 0.0 {
        return 0;
    }
    svd.singular_values
        .iter()
        .filter(|s| **s > RANK_THRESHOLD * max_sv)
        .count()
}

/// Smallest and largest singular values of the stack (diagnostics).
pub fn singular_values_of_stack(blocks: &[Vector3<f64>]) -> (f64, f64) {
    if blocks.is_empty() {
        return (0.0, 0.0);
    }
    let mut stacked = DMatrix::zeros(3 * blocks.len(), 3);
    for (k, b) in blocks.iter().enumerate() {
        stacked.view_mut((3 * k, 0), (3, 3)).copy_from(&m_rbf(b));
    }
    let svd = nalgebra::SVD::new(stacked, false, false);
    (svd.singular_values.min(), svd.singular_values.max())
}

/// Motion regime of a command window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    Stationary,
    ConstantVelocity,
    Varying,
}

pub fn classify_window(window: &CommandWindow) -> Regime {
    let eps = 1e-9;
    let vs: Vec<f64> = window.commands.iter().map(|c| c.v).collect();
    let ws: Vec<f64> = window.commands.iter().map(|c| c.omega).collect();
    let all_zero = vs.iter().chain(ws.iter()).all(|x| x.abs() < eps);
    if all_zero {
        return Regime::Stationary;
    }
    let spread = |x: &[f64]| {
        x.iter().cloned().fold(f64::MIN, f64::max) - x.iter().cloned().fold(f64::MAX, f64::min)
    };
    if spread(&vs) < eps && spread(&ws) < eps {
        Regime::ConstantVelocity
    } else {
        Regime::Varying
    }
}

/// One contiguous segment of frames sharing a motion regime.
#[derive(Debug, Clone)]
pub struct SegmentReport {
    pub regime: Regime,
    pub first_frame: u64,
    pub last_frame: u64,
    pub rank_lin: usize,
    pub rank_ang: usize,
    pub min_sv_lin: f64,
    pub min_sv_ang: f64,
}

/// Segment a dataset by window regime and compute the per-segment ranks of
/// the stacked observability blocks at the given parameters.
pub fn rank_report(dataset: &Dataset, params: &RbfParams, window_size: usize) -> Vec<SegmentReport> {
    let mut segments: Vec<(Regime, Vec<(u64, Vector3<f64>, Vector3<f64>)>)> = Vec::new();
    for frame in &dataset.frames {
        let Some(window) = CommandWindow::build(&dataset.commands, frame.t, window_size) else {
            continue;
        };
        let regime = classify_window(&window);
        let (lin, ang) = rbf_jacobian_block(&window, params);
        match segments.last_mut() {
            Some((r, rows)) if *r == regime => rows.push((frame.id, lin, ang)),
            _ => segments.push((regime, vec![(frame.id, lin, ang)])),
        }
    }
    segments
        .into_iter()
        .map(|(regime, rows)| {
            let lin: Vec<Vector3<f64>> = rows.iter().map(|r| r.1).collect();
            let ang: Vec<Vector3<f64>> = rows.iter().map(|r| r.2).collect();
            let (min_lin, _) = singular_values_of_stack(&lin);
            let (min_ang, _) = singular_values_of_stack(&ang);
            SegmentReport {
                regime,
                first_frame: rows.first().unwrap().0,
                last_frame: rows.last().unwrap().0,
                rank_lin: rank_of_stacked_blocks(&lin),
                rank_ang: rank_of_stacked_blocks(&ang),
                min_sv_lin: min_lin,
                min_sv_ang: min_ang,
            }
        })
        .collect()
}

/// Identifiability trace of one estimator run.
#[derive(Debug, Clone)]
pub struct IdentifiabilityReport {
    pub with_prior: bool,
    pub frames: Vec<RbfDiag>,
    /// Frames whose conditioned RBF Hessian is singular at the relative
    /// eigenvalue threshold.
    pub singular_frames: Vec<u64>,
}

/// Run the estimator with and without the RBF prior and report the
/// conditioning of the reduced RBF Hessian per frame.
pub fn prior_identifiability_check(
    dataset: &Dataset,
    base_cfg: &EstimatorConfig,
) -> Result<(IdentifiabilityReport, IdentifiabilityReport), crate::estimator::EstimatorError> {
    let mut reports = Vec::new();
    for with_prior in [true, false] {
        let mut cfg = base_cfg.clone();
        cfg.rbf_prior = with_prior;
        let result = run_sequence(
            dataset,
            &cfg,
            RunOptions {
                collect_rbf_diagnostics: true,
            },
        )?;
        let singular_frames = result
            .diagnostics
            .iter()
            .filter(|d| is_singular(d))
            .map(|d| d.frame)
            .collect();
        reports.push(IdentifiabilityReport {
            with_prior,
            frames: result.diagnostics,
            singular_frames,
        });
    }
    let without = reports.pop().unwrap();
    let with = reports.pop().unwrap();
    Ok((with, without))
}

/// Relative eigenvalue test of a per-frame diagnostic.
pub fn is_singular(d: &RbfDiag) -> bool {
    let rel = |min: f64, max: f64| min <= 1e-12 * max.max(1.0);
    rel(d.min_eig_lin, d.max_eig_lin) || rel(d.min_eig_ang, d.max_eig_ang)
}
