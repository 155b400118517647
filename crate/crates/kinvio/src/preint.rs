//! On-manifold IMU preintegration between image frames.
//!
//! High-rate gyro/accel samples are folded into relative-motion
//! pseudo-measurements (delta rotation, velocity, position) with a 9x9
//! covariance and first-order bias Jacobians, so the estimator can correct
//! for small bias changes without re-integrating.

use nalgebra::{Matrix3, SMatrix, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{so3, Pose3};

pub type Vector9 = SMatrix<f64, 9, 1>;
pub type Matrix9 = SMatrix<f64, 9, 9>;

/// Accelerometer and gyroscope biases.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImuBias {
    pub acc: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

impl ImuBias {
    pub fn zero() -> Self {
        Self {
            acc: Vector3::zeros(),
            gyro: Vector3::zeros(),
        }
    }

    /// Stacked (acc, gyro) coordinates.
    pub fn vector(&self) -> SMatrix<f64, 6, 1> {
        let mut v = SMatrix::<f64, 6, 1>::zeros();
        v.fixed_rows_mut::<3>(0).copy_from(&self.acc);
        v.fixed_rows_mut::<3>(3).copy_from(&self.gyro);
        v
    }
}

/// Continuous-time IMU noise densities and bias random-walk densities,
/// in SI units (m/s^2/sqrt(Hz) etc.).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ImuNoiseSpec {
    pub accel_noise_density: f64,
    pub gyro_noise_density: f64,
    pub accel_bias_walk: f64,
    pub gyro_bias_walk: f64,
}

impl Default for ImuNoiseSpec {
    fn default() -> Self {
        // Consumer-grade class.
        Self {
            accel_noise_density: 2e-3,
            gyro_noise_density: 1.7e-4,
            accel_bias_walk: 1e-4,
            gyro_bias_walk: 1e-5,
        }
    }
}

/// One IMU sample: specific force and angular rate in the sensor frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub t: f64,
    pub accel: Vector3<f64>,
    pub gyro: Vector3<f64>,
}

/// Pose and velocity of the sensor frame in the world, as constrained by
/// the inertial residuals.
#[derive(Debug, Clone, Copy)]
pub struct NavState {
    pub pose: Pose3,
    pub vel: Vector3<f64>,
}

#[derive(Debug, Error)]
pub enum PreintError {
    #[error("empty IMU sample set")]
    Empty,
    #[error("non-monotone IMU timestamps at index {0}")]
    NonMonotone(usize),
    #[error("IMU stream does not cover [{0}, {1}]")]
    MissingCoverage(f64, f64),
}

/// Preintegrated IMU pseudo-measurement over one frame interval.
#[derive(Debug, Clone)]
pub struct PreintegratedImu {
    pub delta_rot: UnitQuaternion<f64>,
    pub delta_p: Vector3<f64>,
    pub delta_v: Vector3<f64>,
    pub dt: f64,
    /// Covariance of (dtheta, dp, dv).
    pub cov: Matrix9,
    /// Bias linearization point used during integration.
    pub bias_lin: ImuBias,
    pub dr_dbg: Matrix3<f64>,
    pub dp_dba: Matrix3<f64>,
    pub dp_dbg: Matrix3<f64>,
    pub dv_dba: Matrix3<f64>,
    pub dv_dbg: Matrix3<f64>,
}

/// Midpoint-rule preintegration of `samples` (time-ordered, already
/// interpolated to the frame boundaries) around the bias linearization
/// point `bias`.
pub fn integrate(
    samples: &[ImuSample],
    bias: &ImuBias,
    noise: &ImuNoiseSpec,
) -> Result<PreintegratedImu, PreintError> {
    if samples.len() < 2 {
        return Err(PreintError::Empty);
    }
    let mut delta_rot = UnitQuaternion::identity();
    let mut delta_p = Vector3::zeros();
    let mut delta_v = Vector3::zeros();
    let mut cov = Matrix9::zeros();
    let mut dr_dbg = Matrix3::zeros();
    let mut dp_dba = Matrix3::zeros();
    let mut dp_dbg = Matrix3::zeros();
    let mut dv_dba = Matrix3::zeros();
    let mut dv_dbg = Matrix3::zeros();
    let mut total_dt = 0.0;

    for (k, pair) in samples.windows(2).enumerate() {
        let (s0, s1) = (&pair[0], &pair[1]);
        let dt = s1.t - s0.t;
        if dt < 0.0 {
            return Err(PreintError::NonMonotone(k + 1));
        }
        if dt == 0.0 {
            continue;
        }
        let w_mid = 0.5 * (s0.gyro + s1.gyro) - bias.gyro;
        let a0 = s0.accel - bias.acc;
        let a1 = s1.accel - bias.acc;

        let phi = w_mid * dt;
        let r_inc = so3::exp(&phi);
        let rot_next = delta_rot * r_inc;
        let dr_mat = delta_rot.to_rotation_matrix().into_inner();
        let dr_next_mat = rot_next.to_rotation_matrix().into_inner();
        let r_inc_mat = r_inc.to_rotation_matrix().into_inner();
        let a_w = 0.5 * (dr_mat * a0 + dr_next_mat * a1);

        // First-order covariance propagation, state order (theta, p, v).
        let jr = so3::right_jacobian(&phi);
        let m = -0.5 * (dr_mat * so3::hat(&a0) + dr_next_mat * so3::hat(&a1) * r_inc_mat.transpose());
        let mut f = Matrix9::identity();
        f.fixed_view_mut::<3, 3>(0, 0).copy_from(&r_inc_mat.transpose());
        f.fixed_view_mut::<3, 3>(3, 0).copy_from(&(0.5 * m * dt * dt));
        f.fixed_view_mut::<3, 3>(3, 6)
            .copy_from(&(Matrix3::identity() * dt));
        f.fixed_view_mut::<3, 3>(6, 0).copy_from(&(m * dt));

        let dr_mid = (delta_rot * so3::exp(&(phi * 0.5)))
            .to_rotation_matrix()
            .into_inner();
        let mut g = SMatrix::<f64, 9, 6>::zeros();
        g.fixed_view_mut::<3, 3>(0, 0).copy_from(&(jr * dt));
        g.fixed_view_mut::<3, 3>(3, 3).copy_from(&(0.5 * dr_mid * dt * dt));
        g.fixed_view_mut::<3, 3>(6, 3).copy_from(&(dr_mid * dt));
        let mut q = SMatrix::<f64, 6, 6>::zeros();
        let sg2 = noise.gyro_noise_density * noise.gyro_noise_density / dt;
        let sa2 = noise.accel_noise_density * noise.accel_noise_density / dt;
        for i in 0..3 {
            q[(i, i)] = sg2;
            q[(i + 3, i + 3)] = sa2;
        }
        cov = f * cov * f.transpose() + g * q * g.transpose();
        cov = 0.5 * (cov + cov.transpose());

        // Exact first-order derivatives of this discrete map w.r.t. the
        // bias linearization point.
        let dr_dbg_next = r_inc_mat.transpose() * dr_dbg - jr * dt;
        let da_dbg = -0.5 * (dr_mat * so3::hat(&a0) * dr_dbg + dr_next_mat * so3::hat(&a1) * dr_dbg_next);
        let da_dba = -0.5 * (dr_mat + dr_next_mat);
        dp_dbg += dv_dbg * dt + 0.5 * da_dbg * dt * dt;
        dp_dba += dv_dba * dt + 0.5 * da_dba * dt * dt;
        dv_dbg += da_dbg * dt;
        dv_dba += da_dba * dt;
        dr_dbg = dr_dbg_next;

        delta_p += delta_v * dt + 0.5 * a_w * dt * dt;
        delta_v += a_w * dt;
        delta_rot = rot_next;
        total_dt += dt;
    }

    Ok(PreintegratedImu {
        delta_rot,
        delta_p,
        delta_v,
        dt: total_dt,
        cov,
        bias_lin: *bias,
        dr_dbg,
        dp_dba,
        dp_dbg,
        dv_dba,
        dv_dbg,
    })
}

/// Slice an IMU stream to `[t0, t1]`, linearly interpolating boundary
/// samples to the frame times.
pub fn slice_interpolated(
    stream: &[ImuSample],
    t0: f64,
    t1: f64,
) -> Result<Vec<ImuSample>, PreintError> {
    if stream.is_empty() || stream[0].t > t0 + 1e-9 || stream[stream.len() - 1].t < t1 - 1e-9 {
        return Err(PreintError::MissingCoverage(t0, t1));
    }
    let lerp = |t: f64| -> ImuSample {
        let idx = stream.partition_point(|s| s.t <= t);
        if idx == 0 {
            return stream[0];
        }
        if idx >= stream.len() {
            return stream[stream.len() - 1];
        }
        let (a, b) = (&stream[idx - 1], &stream[idx]);
        let w = if b.t > a.t { (t - a.t) / (b.t - a.t) } else { 0.0 };
        ImuSample {
            t,
            accel: a.accel * (1.0 - w) + b.accel * w,
            gyro: a.gyro * (1.0 - w) + b.gyro * w,
        }
    };
    let mut out = vec![lerp(t0)];
    for s in stream {
        if s.t > t0 + 1e-12 && s.t < t1 - 1e-12 {
            out.push(*s);
        }
    }
    out.push(lerp(t1));
    Ok(out)
}

impl PreintegratedImu {
    /// Pseudo-measurements corrected to first order for a bias estimate
    /// that moved away from the linearization point.
    pub fn corrected(&self, bias: &ImuBias) -> (UnitQuaternion<f64>, Vector3<f64>, Vector3<f64>) {
        let dbg = bias.gyro - self.bias_lin.gyro;
        let dba = bias.acc - self.bias_lin.acc;
        let rot = self.delta_rot * so3::exp(&(self.dr_dbg * dbg));
        let p = self.delta_p + self.dp_dbg * dbg + self.dp_dba * dba;
        let v = self.delta_v + self.dv_dbg * dbg + self.dv_dba * dba;
        (rot, p, v)
    }

    /// Propagate a state across the interval using the pseudo-measurements.
    pub fn predict(&self, state: &NavState, bias: &ImuBias, gravity: &Vector3<f64>) -> NavState {
        let (dr, dp, dv) = self.corrected(bias);
        let r_i = state.pose.rot;
        NavState {
            pose: Pose3::new(
                r_i * dr,
                state.pose.trans + state.vel * self.dt + 0.5 * gravity * self.dt * self.dt + r_i * dp,
            ),
            vel: state.vel + gravity * self.dt + r_i * dv,
        }
    }
}

/// Inertial residual (r_dR, r_dp, r_dv): zero when the two states are
/// consistent with the preintegrated motion under the given gravity.
pub fn inertial_residuals(
    pre: &PreintegratedImu,
    state_i: &NavState,
    state_j: &NavState,
    bias_i: &ImuBias,
    gravity: &Vector3<f64>,
) -> Vector9 {
    let (dr, dp, dv) = pre.corrected(bias_i);
    let dt = pre.dt;
    let r_i_t = state_i.pose.rot.inverse();
    let r_drot = so3::log(&(dr * state_j.pose.rot.inverse() * state_i.pose.rot));
    let r_dp = r_i_t
        * (state_j.pose.trans - state_i.pose.trans - state_i.vel * dt - 0.5 * gravity * dt * dt)
        - dp;
    let r_dv = r_i_t * (state_j.vel - state_i.vel - gravity * dt) - dv;
    let mut r = Vector9::zeros();
    r.fixed_rows_mut::<3>(0).copy_from(&r_drot);
    r.fixed_rows_mut::<3>(3).copy_from(&r_dp);
    r.fixed_rows_mut::<3>(6).copy_from(&r_dv);
    r
}

/// Analytic Jacobian blocks of [`inertial_residuals`]. Pose perturbations
/// follow [`Pose3::retract`]; the bias block stacks (acc, gyro).
pub struct InertialJacobians {
    pub d_pose_i: SMatrix<f64, 9, 6>,
    pub d_pose_j: SMatrix<f64, 9, 6>,
    pub d_vel_i: SMatrix<f64, 9, 3>,
    pub d_vel_j: SMatrix<f64, 9, 3>,
    pub d_bias_i: SMatrix<f64, 9, 6>,
}

pub fn residual_jacobians(
    pre: &PreintegratedImu,
    state_i: &NavState,
    state_j: &NavState,
    bias_i: &ImuBias,
    gravity: &Vector3<f64>,
) -> InertialJacobians {
    let (dr_tilde, dp_tilde, dv_tilde) = pre.corrected(bias_i);
    let dt = pre.dt;
    let r_i = state_i.pose.rotation_matrix();
    let r_i_t = r_i.transpose();
    let dr_mat = dr_tilde.to_rotation_matrix().into_inner();
    let r_drot = so3::log(&(dr_tilde * state_j.pose.rot.inverse() * state_i.pose.rot));
    let u_p = state_j.pose.trans
        - state_i.pose.trans
        - state_i.vel * dt
        - 0.5 * gravity * dt * dt;
    let u_v = state_j.vel - state_i.vel - gravity * dt;

    let mut d_pose_i = SMatrix::<f64, 9, 6>::zeros();
    let mut d_pose_j = SMatrix::<f64, 9, 6>::zeros();
    let mut d_vel_i = SMatrix::<f64, 9, 3>::zeros();
    let mut d_vel_j = SMatrix::<f64, 9, 3>::zeros();
    let mut d_bias_i = SMatrix::<f64, 9, 6>::zeros();

    // Rotation rows.
    let jr_inv = so3::right_jacobian_inv(&r_drot);
    let jl_inv = so3::left_jacobian_inv(&r_drot);
    d_pose_i.fixed_view_mut::<3, 3>(0, 3).copy_from(&jr_inv);
    d_pose_j
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-jl_inv * dr_mat));
    let dbg_corr = pre.dr_dbg * (bias_i.gyro - pre.bias_lin.gyro);
    let k = r_i_t * state_j.pose.rotation_matrix();
    let rot_bias = jr_inv * k * so3::right_jacobian(&dbg_corr) * pre.dr_dbg;
    d_bias_i.fixed_view_mut::<3, 3>(0, 3).copy_from(&rot_bias);

    // Position rows.
    d_pose_i
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-r_i_t));
    d_pose_i
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&so3::hat(&(r_i_t * u_p)));
    d_pose_j.fixed_view_mut::<3, 3>(3, 0).copy_from(&r_i_t);
    d_vel_i
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-r_i_t * dt));
    d_bias_i
        .fixed_view_mut::<3, 3>(3, 0)
        .copy_from(&(-pre.dp_dba));
    d_bias_i
        .fixed_view_mut::<3, 3>(3, 3)
        .copy_from(&(-pre.dp_dbg));

    // Velocity rows.
    d_pose_i
        .fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&so3::hat(&(r_i_t * u_v)));
    d_vel_i.fixed_view_mut::<3, 3>(6, 0).copy_from(&(-r_i_t));
    d_vel_j.fixed_view_mut::<3, 3>(6, 0).copy_from(&r_i_t);
    d_bias_i
        .fixed_view_mut::<3, 3>(6, 0)
        .copy_from(&(-pre.dv_dba));
    d_bias_i
        .fixed_view_mut::<3, 3>(6, 3)
        .copy_from(&(-pre.dv_dbg));

    let _ = (dp_tilde, dv_tilde);
    InertialJacobians {
        d_pose_i,
        d_pose_j,
        d_vel_i,
        d_vel_j,
        d_bias_i,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const GRAVITY: Vector3<f64> = Vector3::new(0.0, 0.0, -9.81);

    fn constant_samples(accel: Vector3<f64>, gyro: Vector3<f64>, dt: f64, n: usize) -> Vec<ImuSample> {
        (0..=n)
            .map(|k| ImuSample {
                t: dt * k as f64 / n as f64,
                accel,
                gyro,
            })
            .collect()
    }

    #[test]
    fn zero_input_gives_identity_deltas() {
        let samples = constant_samples(Vector3::zeros(), Vector3::zeros(), 1.3, 100);
        let pre = integrate(&samples, &ImuBias::zero(), &ImuNoiseSpec::default()).unwrap();
        assert!(so3::log(&pre.delta_rot).norm() < 1e-15);
        assert!(pre.delta_v.norm() < 1e-15);
        assert!(pre.delta_p.norm() < 1e-15);
        assert_relative_eq!(pre.dt, 1.3, epsilon = 1e-12);
    }

    #[test]
    fn constant_rate_rotation_oracle() {
        // Constant 1 rad/s yaw for pi/2 seconds -> 90 degree yaw.
        let samples = constant_samples(
            Vector3::zeros(),
            Vector3::new(0.0, 0.0, 1.0),
            std::f64::consts::FRAC_PI_2,
            200,
        );
        let pre = integrate(&samples, &ImuBias::zero(), &ImuNoiseSpec::default()).unwrap();
        let expected = so3::exp(&Vector3::new(0.0, 0.0, std::f64::consts::FRAC_PI_2));
        assert!((pre.delta_rot.inverse() * expected).angle() < 1e-9);
    }

    #[test]
    fn constant_accel_kinematics_oracle() {
        // a = (1,0,0) in a non-rotating frame for 2 s: dv = a t = 2,
        // dp = a t^2 / 2 = 2.
        let samples = constant_samples(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), 2.0, 400);
        let pre = integrate(&samples, &ImuBias::zero(), &ImuNoiseSpec::default()).unwrap();
        assert_relative_eq!(pre.delta_v.x, 2.0, epsilon = 1e-9);
        assert_relative_eq!(pre.delta_p.x, 2.0, epsilon = 1e-9);
        assert!(pre.delta_v.yz().norm() < 1e-12);
    }

    #[test]
    fn rejects_empty_and_non_monotone() {
        assert!(matches!(
            integrate(&[], &ImuBias::zero(), &ImuNoiseSpec::default()),
            Err(PreintError::Empty)
        ));
        let mut samples = constant_samples(Vector3::zeros(), Vector3::zeros(), 1.0, 10);
        samples[5].t = samples[3].t - 0.01;
        assert!(matches!(
            integrate(&samples, &ImuBias::zero(), &ImuNoiseSpec::default()),
            Err(PreintError::NonMonotone(_))
        ));
    }

    fn random_samples(rng: &mut ChaCha8Rng, n: usize, dt: f64) -> Vec<ImuSample> {
        // Smooth sinusoid mixtures keep the stream integrable.
        let coeffs: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        (0..=n)
            .map(|k| {
                let t = dt * k as f64 / n as f64;
                ImuSample {
                    t,
                    accel: Vector3::new(
                        coeffs[0] + coeffs[1] * (2.0 * t).sin(),
                        coeffs[2] + coeffs[3] * (3.0 * t).cos(),
                        coeffs[4] + coeffs[5] * (1.5 * t).sin(),
                    ),
                    gyro: Vector3::new(
                        0.5 * coeffs[6] + 0.3 * coeffs[7] * (2.5 * t).sin(),
                        0.5 * coeffs[8] + 0.3 * coeffs[9] * (1.7 * t).cos(),
                        0.5 * coeffs[10] + 0.3 * coeffs[11] * (2.2 * t).sin(),
                    ),
                }
            })
            .collect()
    }

    fn random_state(rng: &mut ChaCha8Rng) -> NavState {
        NavState {
            pose: Pose3::from_rotation_vector(
                &Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                ),
                Vector3::new(
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(-2.0..2.0),
                ),
            ),
            vel: Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ),
        }
    }

    #[test]
    fn self_consistent_states_give_zero_residual() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..20 {
            let samples = random_samples(&mut rng, 100, 0.5);
            let bias = ImuBias::zero();
            let pre = integrate(&samples, &bias, &ImuNoiseSpec::default()).unwrap();
            let state_i = random_state(&mut rng);
            let state_j = pre.predict(&state_i, &bias, &GRAVITY);
            let r = inertial_residuals(&pre, &state_i, &state_j, &bias, &GRAVITY);
            assert!(r.norm() < 1e-9, "residual {r:?}");
        }
    }

    #[test]
    fn position_and_velocity_rows_are_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let samples = random_samples(&mut rng, 100, 0.4);
        let bias = ImuBias::zero();
        let pre = integrate(&samples, &bias, &ImuNoiseSpec::default()).unwrap();
        let state_i = random_state(&mut rng);
        let mut state_j = pre.predict(&state_i, &bias, &GRAVITY);
        let r0 = inertial_residuals(&pre, &state_i, &state_j, &bias, &GRAVITY);

        let delta = Vector3::new(0.2, 0.0, 0.0);
        state_j.pose.trans += delta;
        let r1 = inertial_residuals(&pre, &state_i, &state_j, &bias, &GRAVITY);
        let expected = state_i.pose.rotation_matrix().transpose() * delta;
        assert!((r1.fixed_rows::<3>(3) - r0.fixed_rows::<3>(3) - expected).norm() < 1e-12);

        state_j.pose.trans -= delta;
        state_j.vel += delta;
        let r2 = inertial_residuals(&pre, &state_i, &state_j, &bias, &GRAVITY);
        assert!((r2.fixed_rows::<3>(6) - r0.fixed_rows::<3>(6) - expected).norm() < 1e-12);
    }

    /// Central finite differences of the residual under retraction of each
    /// argument; the independent oracle for the analytic blocks.
    fn fd_check(pre: &PreintegratedImu, si: &NavState, sj: &NavState, bias: &ImuBias) {
        let jac = residual_jacobians(pre, si, sj, bias, &GRAVITY);
        let h = 1e-6;
        let tol = 1e-4;
        let check = |fd: &SMatrix<f64, 9, 1>, col: nalgebra::SMatrixView<f64, 9, 1>| {
            let scale = 1.0f64.max(fd.amax());
            assert!((fd - col).amax() / scale < tol, "fd={fd:?}\ncol={col:?}");
        };
        for k in 0..6 {
            let mut d = nalgebra::Vector6::zeros();
            d[k] = h;
            let rp = inertial_residuals(
                pre,
                &NavState { pose: si.pose.retract(&d), vel: si.vel },
                sj,
                bias,
                &GRAVITY,
            );
            d[k] = -h;
            let rm = inertial_residuals(
                pre,
                &NavState { pose: si.pose.retract(&d), vel: si.vel },
                sj,
                bias,
                &GRAVITY,
            );
            let fd = (rp - rm) / (2.0 * h);
            check(&fd, jac.d_pose_i.column(k).into());

            d[k] = h;
            let rp = inertial_residuals(
                pre,
                si,
                &NavState { pose: sj.pose.retract(&d), vel: sj.vel },
                bias,
                &GRAVITY,
            );
            d[k] = -h;
            let rm = inertial_residuals(
                pre,
                si,
                &NavState { pose: sj.pose.retract(&d), vel: sj.vel },
                bias,
                &GRAVITY,
            );
            let fd = (rp - rm) / (2.0 * h);
            check(&fd, jac.d_pose_j.column(k).into());

            let mut b = *bias;
            let mut bv = b.vector();
            bv[k] += h;
            b.acc = bv.fixed_rows::<3>(0).into();
            b.gyro = bv.fixed_rows::<3>(3).into();
            let rp = inertial_residuals(pre, si, sj, &b, &GRAVITY);
            bv[k] -= 2.0 * h;
            b.acc = bv.fixed_rows::<3>(0).into();
            b.gyro = bv.fixed_rows::<3>(3).into();
            let rm = inertial_residuals(pre, si, sj, &b, &GRAVITY);
            let fd = (rp - rm) / (2.0 * h);
            check(&fd, jac.d_bias_i.column(k).into());
        }
        for k in 0..3 {
            let mut d = Vector3::zeros();
            d[k] = h;
            let rp = inertial_residuals(
                pre,
                &NavState { pose: si.pose, vel: si.vel + d },
                sj,
                bias,
                &GRAVITY,
            );
            let rm = inertial_residuals(
                pre,
                &NavState { pose: si.pose, vel: si.vel - d },
                sj,
                bias,
                &GRAVITY,
            );
            let fd = (rp - rm) / (2.0 * h);
            check(&fd, jac.d_vel_i.column(k).into());

            let rp = inertial_residuals(
                pre,
                si,
                &NavState { pose: sj.pose, vel: sj.vel + d },
                bias,
                &GRAVITY,
            );
            let rm = inertial_residuals(
                pre,
                si,
                &NavState { pose: sj.pose, vel: sj.vel - d },
                bias,
                &GRAVITY,
            );
            let fd = (rp - rm) / (2.0 * h);
            check(&fd, jac.d_vel_j.column(k).into());
        }
    }

    #[test]
    fn jacobians_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        for _ in 0..3 {
            let samples = random_samples(&mut rng, 80, 0.3);
            let bias = ImuBias {
                acc: Vector3::new(0.01, -0.02, 0.015),
                gyro: Vector3::new(0.002, 0.001, -0.003),
            };
            let pre = integrate(&samples, &bias, &ImuNoiseSpec::default()).unwrap();
            let si = random_state(&mut rng);
            let sj = random_state(&mut rng);
            // Evaluate at a bias different from the linearization point so
            // the first-order correction terms are exercised too.
            let bias_eval = ImuBias {
                acc: bias.acc + Vector3::new(2e-4, -1e-4, 3e-4),
                gyro: bias.gyro + Vector3::new(-1e-4, 2e-4, 1e-4),
            };
            fd_check(&pre, &si, &sj, &bias_eval);
        }
    }

    #[test]
    fn velocity_jacobian_is_rotation_transpose() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let samples = random_samples(&mut rng, 50, 0.2);
        let pre = integrate(&samples, &ImuBias::zero(), &ImuNoiseSpec::default()).unwrap();
        let si = random_state(&mut rng);
        let sj = random_state(&mut rng);
        let jac = residual_jacobians(&pre, &si, &sj, &ImuBias::zero(), &GRAVITY);
        let expect = si.pose.rotation_matrix().transpose();
        assert!((jac.d_vel_j.fixed_view::<3, 3>(6, 0) - expect).norm() < 1e-12);
    }

    #[test]
    fn bias_correction_is_second_order() {
        // Halving the bias step must quarter the correction error.
        let mut rng = ChaCha8Rng::seed_from_u64(47);
        let samples = random_samples(&mut rng, 120, 0.5);
        let bias0 = ImuBias::zero();
        let pre = integrate(&samples, &bias0, &ImuNoiseSpec::default()).unwrap();

        let err = |scale: f64| -> f64 {
            let db = ImuBias {
                acc: Vector3::new(8e-4, -6e-4, 4e-4) * scale,
                gyro: Vector3::new(-5e-4, 7e-4, 3e-4) * scale,
            };
            let re = integrate(&samples, &db, &ImuNoiseSpec::default()).unwrap();
            let (cr, cp, cv) = pre.corrected(&db);
            let e_r = so3::log(&(re.delta_rot.inverse() * cr)).norm();
            let e_p = (re.delta_p - cp).norm();
            let e_v = (re.delta_v - cv).norm();
            e_r + e_p + e_v
        };
        let e1 = err(1.0);
        let e_half = err(0.5);
        assert!(e1 > 0.0);
        assert!(
            e_half < 0.3 * e1,
            "halving did not shrink quadratically: {e1} -> {e_half}"
        );
    }

    #[test]
    fn covariance_is_psd_and_trace_grows() {
        let mut rng = ChaCha8Rng::seed_from_u64(53);
        let samples = random_samples(&mut rng, 200, 1.0);
        let mut last_trace = 0.0;
        for n in [50, 100, 150, 200] {
            let pre = integrate(&samples[..=n], &ImuBias::zero(), &ImuNoiseSpec::default()).unwrap();
            let eig = nalgebra::SymmetricEigen::new(pre.cov);
            assert!(eig.eigenvalues.min() > -1e-18);
            let trace = pre.cov.trace();
            assert!(trace > last_trace);
            last_trace = trace;
        }
    }

    #[test]
    fn slice_interpolates_boundaries() {
        let samples = constant_samples(Vector3::new(1.0, 0.0, 0.0), Vector3::zeros(), 1.0, 10);
        let sliced = slice_interpolated(&samples, 0.05, 0.95).unwrap();
        assert_relative_eq!(sliced[0].t, 0.05);
        assert_relative_eq!(sliced.last().unwrap().t, 0.95);
        assert!(slice_interpolated(&samples, -0.5, 0.9).is_err());
    }
}
