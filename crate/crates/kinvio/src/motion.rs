//! Velocity-control kinematic motion model: RBF-weighted effective
//! controls over a command window, the twist estimated from relative base
//! poses, and the motion/extrinsic residuals with analytic Jacobians.

use nalgebra::{Matrix2, Matrix3, SMatrix, Vector3, Vector6};
use serde::{Deserialize, Serialize};

use crate::geometry::{se2, so3, Pose2, Pose3, Twist2};

/// Lower bound on the kernel widths; the weighting is singular at zero.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// RBF kernel calibration: per channel a time offset `mu` (s), width
/// `sigma` (s) and scale `s`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RbfParams {
    pub mu_lin: f64,
    pub sigma_lin: f64,
    pub s_lin: f64,
    pub mu_ang: f64,
    pub sigma_ang: f64,
    pub s_ang: f64,
}

impl Default for RbfParams {
    fn default() -> Self {
        Self {
            mu_lin: 0.0,
            sigma_lin: 0.5,
            s_lin: 1.0,
            mu_ang: 0.0,
            sigma_ang: 0.5,
            s_ang: 1.0,
        }
    }
}

impl RbfParams {
    /// Coordinates in the order (mu_lin, sigma_lin, s_lin, mu_ang,
    /// sigma_ang, s_ang) used by every Jacobian in this module.
    pub fn vector(&self) -> Vector6<f64> {
        Vector6::new(
            self.mu_lin,
            self.sigma_lin,
            self.s_lin,
            self.mu_ang,
            self.sigma_ang,
            self.s_ang,
        )
    }

    pub fn from_vector(v: &Vector6<f64>) -> Self {
        Self {
            mu_lin: v[0],
            sigma_lin: v[1].max(SIGMA_FLOOR),
            s_lin: v[2],
            mu_ang: v[3],
            sigma_ang: v[4].max(SIGMA_FLOOR),
            s_ang: v[5],
        }
    }

    pub fn clamped(&self) -> Self {
        let mut p = *self;
        p.sigma_lin = p.sigma_lin.max(SIGMA_FLOOR);
        p.sigma_ang = p.sigma_ang.max(SIGMA_FLOOR);
        p
    }
}

/// Timestamped (v, omega) command from the control stream.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControlCommand {
    pub t: f64,
    pub v: f64,
    pub omega: f64,
}

/// The N most recent commands at or before the query time.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandWindow {
    pub query_time: f64,
    /// Oldest first; length equals the configured window size.
    pub commands: Vec<ControlCommand>,
}

impl CommandWindow {
    /// Build the window from a time-ordered command stream. At the start
    /// of a sequence the window is padded by repeating the earliest
    /// command. Returns `None` when no command precedes `t`. A nanosecond
    /// slack keeps command times equal to `t` up to rounding inside the
    /// window.
    pub fn build(stream: &[ControlCommand], t: f64, n: usize) -> Option<CommandWindow> {
        let end = stream.partition_point(|c| c.t <= t + 1e-9);
        if end == 0 || n == 0 {
            return None;
        }
        let start = end.saturating_sub(n);
        let mut commands: Vec<ControlCommand> = stream[start..end].to_vec();
        while commands.len() < n {
            commands.insert(0, commands[0]);
        }
        Some(CommandWindow {
            query_time: t,
            commands,
        })
    }

    fn dtaus(&self) -> Vec<f64> {
        self.commands
            .iter()
            .map(|c| self.query_time - c.t)
            .collect()
    }
}

/// One channel of the RBF aggregation. The weighted mean is computed in a
/// centered form so constant windows reproduce the command exactly.
fn channel(values: &[f64], dtaus: &[f64], mu: f64, sigma: f64, s: f64) -> f64 {
    let sigma = sigma.max(SIGMA_FLOOR);
    // Shift exponents by their maximum so at least one weight is 1 even at
    // extreme widths; the shift cancels in the normalized average.
    let e_max = dtaus
        .iter()
        .map(|dt| -(dt - mu) * (dt - mu) / (2.0 * sigma * sigma))
        .fold(f64::NEG_INFINITY, f64::max);
    let v0 = values[0];
    let mut sum_w = 0.0;
    let mut sum_wd = 0.0;
    for (v, dt) in values.iter().zip(dtaus) {
        let z = dt - mu;
        let w = (-z * z / (2.0 * sigma * sigma) - e_max).exp();
        sum_w += w;
        sum_wd += w * (v - v0);
    }
    s * (v0 + sum_wd / sum_w)
}

/// Derivatives of one channel w.r.t. (mu, sigma, s).
fn channel_jacobian(values: &[f64], dtaus: &[f64], mu: f64, sigma: f64, s: f64) -> Vector3<f64> {
    let sigma = sigma.max(SIGMA_FLOOR);
    let e_max = dtaus
        .iter()
        .map(|dt| -(dt - mu) * (dt - mu) / (2.0 * sigma * sigma))
        .fold(f64::NEG_INFINITY, f64::max);
    let v0 = values[0];
    let mut sum_w = 0.0;
    let mut sum_wd = 0.0;
    for (v, dt) in values.iter().zip(dtaus) {
        let z = dt - mu;
        let w = (-z * z / (2.0 * sigma * sigma) - e_max).exp();
        sum_w += w;
        sum_wd += w * (v - v0);
    }
    let mean = v0 + sum_wd / sum_w;
    let mut d_mu = 0.0;
    let mut d_sigma = 0.0;
    for (v, dt) in values.iter().zip(dtaus) {
        let z = dt - mu;
        let w = (-z * z / (2.0 * sigma * sigma) - e_max).exp();
        let g = z / (sigma * sigma);
        let h = z * z / (sigma * sigma * sigma);
        d_mu += w * g * (v - mean);
        d_sigma += w * h * (v - mean);
    }
    Vector3::new(s * d_mu / sum_w, s * d_sigma / sum_w, mean)
}

/// RBF-weighted, scaled effective control of a command window.
pub fn effective_control(window: &CommandWindow, params: &RbfParams) -> Twist2 {
    let dtaus = window.dtaus();
    let vs: Vec<f64> = window.commands.iter().map(|c| c.v).collect();
    let ws: Vec<f64> = window.commands.iter().map(|c| c.omega).collect();
    Twist2::new(
        channel(&vs, &dtaus, params.mu_lin, params.sigma_lin, params.s_lin),
        channel(&ws, &dtaus, params.mu_ang, params.sigma_ang, params.s_ang),
    )
}

/// Plain average of the window commands (the `avg` weighting mode).
pub fn window_average(window: &CommandWindow) -> Twist2 {
    let n = window.commands.len() as f64;
    Twist2::new(
        window.commands.iter().map(|c| c.v).sum::<f64>() / n,
        window.commands.iter().map(|c| c.omega).sum::<f64>() / n,
    )
}

/// 2x6 Jacobian of the effective control w.r.t. the parameter vector.
/// Cross-channel blocks are exactly zero.
pub fn effective_control_jacobian(window: &CommandWindow, params: &RbfParams) -> SMatrix<f64, 2, 6> {
    let dtaus = window.dtaus();
    let vs: Vec<f64> = window.commands.iter().map(|c| c.v).collect();
    let ws: Vec<f64> = window.commands.iter().map(|c| c.omega).collect();
    let lin = channel_jacobian(&vs, &dtaus, params.mu_lin, params.sigma_lin, params.s_lin);
    let ang = channel_jacobian(&ws, &dtaus, params.mu_ang, params.sigma_ang, params.s_ang);
    let mut j = SMatrix::<f64, 2, 6>::zeros();
    j[(0, 0)] = lin[0];
    j[(0, 1)] = lin[1];
    j[(0, 2)] = lin[2];
    j[(1, 3)] = ang[0];
    j[(1, 4)] = ang[1];
    j[(1, 5)] = ang[2];
    j
}

/// Sensor poses and extrinsics of a frame pair entering a motion factor.
#[derive(Debug, Clone, Copy)]
pub struct MotionPoses {
    /// World pose of the sensor at the earlier frame.
    pub pose_i: Pose3,
    /// World pose of the sensor at the later frame.
    pub pose_j: Pose3,
    /// Sensor-to-base extrinsic at the earlier frame.
    pub extr_i: Pose3,
    /// Sensor-to-base extrinsic at the later frame.
    pub extr_j: Pose3,
}

/// Relative planar base motion (dx, dy, dtheta) between two frames and its
/// Jacobians w.r.t. the four pose variables (split retraction).
struct PlanarMotion {
    pose2: Pose2,
    d_pose_i: SMatrix<f64, 3, 6>,
    d_pose_j: SMatrix<f64, 3, 6>,
    d_extr_i: SMatrix<f64, 3, 6>,
    d_extr_j: SMatrix<f64, 3, 6>,
}

/// Relative pose of the base frame between the two frames.
pub fn relative_base_pose(p: &MotionPoses) -> Pose3 {
    p.extr_i
        .compose(&p.pose_i.inverse())
        .compose(&p.pose_j)
        .compose(&p.extr_j.inverse())
}

fn planar_motion(p: &MotionPoses, with_jacobians: bool) -> PlanarMotion {
    let a = p.extr_i.compose(&p.pose_i.inverse());
    let b = p.pose_j.compose(&p.extr_j.inverse());
    let rel = a.compose(&b);
    let phi = so3::log(&rel.rot);
    let pose2 = Pose2::new(phi.z, rel.trans.x, rel.trans.y);

    let mut out = PlanarMotion {
        pose2,
        d_pose_i: SMatrix::zeros(),
        d_pose_j: SMatrix::zeros(),
        d_extr_i: SMatrix::zeros(),
        d_extr_j: SMatrix::zeros(),
    };
    if !with_jacobians {
        return out;
    }

    let r_a = a.rotation_matrix();
    let r_ei = p.extr_i.rotation_matrix();
    let r_ej = p.extr_j.rotation_matrix();
    let r_i = p.pose_i.rotation_matrix();
    let r_j = p.pose_j.rotation_matrix();
    let jr_inv = so3::right_jacobian_inv(&phi);
    let jl_inv = so3::left_jacobian_inv(&phi);
    let e3 = Vector3::<f64>::z();

    // Row 2 is dtheta = e3^T dphi; rows 0..1 are the translation entries.
    let fill = |target: &mut SMatrix<f64, 3, 6>,
                    dt_dtrans: Matrix3<f64>,
                    dt_drot: Matrix3<f64>,
                    dphi_drot: Matrix3<f64>| {
        target
            .fixed_view_mut::<2, 3>(0, 0)
            .copy_from(&dt_dtrans.fixed_view::<2, 3>(0, 0));
        target
            .fixed_view_mut::<2, 3>(0, 3)
            .copy_from(&dt_drot.fixed_view::<2, 3>(0, 0));
        let row: nalgebra::Matrix1x3<f64> = e3.transpose() * dphi_drot;
        target.fixed_view_mut::<1, 3>(2, 3).copy_from(&row);
    };

    let t_b = b.trans;
    let t_i = p.pose_i.trans;

    fill(
        &mut out.d_pose_i,
        -r_a,
        r_ei * so3::hat(&(r_i.transpose() * (t_b - t_i))),
        -jl_inv * r_ei,
    );
    fill(
        &mut out.d_pose_j,
        r_a,
        r_a * r_j * so3::hat(&(r_ej.transpose() * p.extr_j.trans)),
        jr_inv * r_ej,
    );
    fill(
        &mut out.d_extr_i,
        Matrix3::identity(),
        -r_ei * so3::hat(&(r_i.transpose() * (t_b - t_i))),
        jl_inv * r_ei,
    );
    fill(
        &mut out.d_extr_j,
        -rel.rotation_matrix(),
        -r_a * r_j * so3::hat(&(r_ej.transpose() * p.extr_j.trans)),
        -jr_inv * r_ej,
    );
    out
}

/// Twist (vx, vy, omega) of the base between two frames, recovered from
/// the sensor poses and extrinsics. Invariant to any time-constant
/// extrinsic.
pub fn estimated_twist(p: &MotionPoses, dt: f64) -> Vector3<f64> {
    assert!(dt > 0.0, "estimated_twist needs dt > 0");
    let m = planar_motion(p, false);
    se2::log(&m.pose2) / dt
}

/// Jacobian blocks of the motion residuals.
pub struct MotionJacobians {
    pub d_pose_i: SMatrix<f64, 3, 6>,
    pub d_pose_j: SMatrix<f64, 3, 6>,
    pub d_extr_i: SMatrix<f64, 3, 6>,
    pub d_extr_j: SMatrix<f64, 3, 6>,
    pub d_rbf: SMatrix<f64, 3, 6>,
}

/// Inverse motion residual: `log_se2(P_rel) - dt * xi_bar` with rows
/// (x, y-lateral, theta). Zero when the relative base pose equals the
/// exponential of the effective control.
pub fn inverse_residual(
    p: &MotionPoses,
    dt: f64,
    window: &CommandWindow,
    params: &RbfParams,
) -> Vector3<f64> {
    let m = planar_motion(p, false);
    let xi = effective_control(window, params);
    se2::log(&m.pose2) - xi.full() * dt
}

pub fn inverse_residual_jacobians(
    p: &MotionPoses,
    dt: f64,
    window: &CommandWindow,
    params: &RbfParams,
) -> MotionJacobians {
    let m = planar_motion(p, true);
    let j_log = se2::log_jacobian_wrt_entries(&m.pose2);
    let j_xi = effective_control_jacobian(window, params);
    let mut d_rbf = SMatrix::<f64, 3, 6>::zeros();
    d_rbf.fixed_view_mut::<1, 6>(0, 0).copy_from(&(-dt * j_xi.row(0)));
    d_rbf.fixed_view_mut::<1, 6>(2, 0).copy_from(&(-dt * j_xi.row(1)));
    MotionJacobians {
        d_pose_i: j_log * m.d_pose_i,
        d_pose_j: j_log * m.d_pose_j,
        d_extr_i: j_log * m.d_extr_i,
        d_extr_j: j_log * m.d_extr_j,
        d_rbf,
    }
}

/// Forward motion residual: relative base pose minus the exponential of the
/// effective control, rows (x, y, theta). Shares its root set with the
/// inverse residual.
pub fn forward_residual(
    p: &MotionPoses,
    dt: f64,
    window: &CommandWindow,
    params: &RbfParams,
) -> Vector3<f64> {
    let m = planar_motion(p, false);
    let xi = effective_control(window, params);
    let predicted = se2::exp(&xi, dt);
    Vector3::new(
        m.pose2.trans.x - predicted.trans.x,
        m.pose2.trans.y - predicted.trans.y,
        se2::wrap_angle(m.pose2.angle - xi.omega * dt),
    )
}

pub fn forward_residual_jacobians(
    p: &MotionPoses,
    dt: f64,
    window: &CommandWindow,
    params: &RbfParams,
) -> MotionJacobians {
    let m = planar_motion(p, true);
    let xi = effective_control(window, params);
    let j_xi = effective_control_jacobian(window, params);
    // d(exp translation)/d(v, omega), then chain into the parameters.
    let j_exp: Matrix2<f64> = se2::exp_translation_jacobian(&xi, dt);
    let mut d_rbf = SMatrix::<f64, 3, 6>::zeros();
    let d_trans = -j_exp * j_xi;
    d_rbf.fixed_view_mut::<2, 6>(0, 0).copy_from(&d_trans);
    d_rbf.fixed_view_mut::<1, 6>(2, 0).copy_from(&(-dt * j_xi.row(1)));
    MotionJacobians {
        d_pose_i: m.d_pose_i,
        d_pose_j: m.d_pose_j,
        d_extr_i: m.d_extr_i,
        d_extr_j: m.d_extr_j,
        d_rbf,
    }
}

/// Random-walk residual between two adjacent extrinsic estimates: the
/// SE(3) log of the relative pose, ordered (translation, rotation).
pub fn extrinsic_residual(extr_i: &Pose3, extr_j: &Pose3) -> Vector6<f64> {
    crate::geometry::pose3::log(&extr_i.inverse().compose(extr_j))
}

pub fn extrinsic_residual_jacobians(
    extr_i: &Pose3,
    extr_j: &Pose3,
) -> (SMatrix<f64, 6, 6>, SMatrix<f64, 6, 6>) {
    let m = extr_i.inverse().compose(extr_j);
    let phi = so3::log(&m.rot);
    let t_m = m.trans;
    let jl_inv = so3::left_jacobian_inv(&phi);
    let jr_inv = so3::right_jacobian_inv(&phi);
    let g = so3::d_left_jacobian_inv_times(&phi, &t_m);
    let r_a_t = extr_i.rotation_matrix().transpose();

    let mut d_i = SMatrix::<f64, 6, 6>::zeros();
    d_i.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-jl_inv * r_a_t));
    d_i.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(jl_inv * so3::hat(&t_m) - g * jl_inv));
    d_i.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-jl_inv));

    let mut d_j = SMatrix::<f64, 6, 6>::zeros();
    d_j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jl_inv * r_a_t));
    d_j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(g * jr_inv));
    d_j.fixed_view_mut::<3, 3>(3, 3).copy_from(&jr_inv);
    (d_i, d_j)
}

/// Planar projection (dx, dy, dtheta) of the relative base pose.
pub fn relative_base_pose2(p: &MotionPoses, _dt: f64) -> Pose2 {
    planar_motion(p, false).pose2
}
