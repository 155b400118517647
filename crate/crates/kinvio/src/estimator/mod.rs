//! Sliding-window nonlinear least squares over frames, keyframes,
//! landmarks and the global calibration variables, with Levenberg-
//! Marquardt, per-iteration landmark Schur elimination, and Schur-
//! complement marginalization of old states.

pub mod factors;
pub mod linear;

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use nalgebra::{DVector, SMatrix, Vector3, Vector6};
use thiserror::Error;

use crate::config::{EstimatorConfig, LateralMode, WeightingMode};
use crate::geometry::{Pose3, Twist2};
use crate::motion::{self, CommandWindow, ControlCommand, RbfParams};
use crate::plane::PlaneParams;
use crate::preint::{self, ImuBias, ImuNoiseSpec, ImuSample};
use crate::sim::{command_at, Dataset};

use factors::{ControlSource, EvalContext, Factor};
use linear::{assemble, marginalize, solve_damped, total_energy, Layout, MargPrior};

/// Key of one optimization variable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKey {
    FramePose(u64),
    FrameVel(u64),
    FrameBias(u64),
    FrameExtr(u64),
    Rbf,
    Plane,
    Landmark(u64),
}

impl VarKey {
    pub fn dim(&self) -> usize {
        match self {
            VarKey::FramePose(_) | VarKey::FrameExtr(_) => 6,
            VarKey::FrameVel(_) => 3,
            VarKey::FrameBias(_) => 6,
            VarKey::Rbf => 6,
            VarKey::Plane => 3,
            VarKey::Landmark(_) => 3,
        }
    }
}

/// Current value of a variable, used for prior linearization points and
/// snapshots.
#[derive(Debug, Clone)]
pub enum StateValue {
    Pose(Pose3),
    Vec3(Vector3<f64>),
    Bias(ImuBias),
    Rbf(RbfParams),
    Plane(PlaneParams),
    Landmark(Vector3<f64>),
}

/// Per-frame estimate.
#[derive(Debug, Clone, Copy)]
pub struct FrameState {
    pub t: f64,
    /// Sensor pose in the world frame.
    pub pose: Pose3,
    pub vel: Vector3<f64>,
    pub bias: ImuBias,
    /// Sensor-to-base extrinsic.
    pub extr: Pose3,
}

/// Hosted landmark: bearing chart coordinates and inverse distance in the
/// host keyframe.
#[derive(Debug, Clone, Copy)]
pub struct LandmarkState {
    pub host: u64,
    pub u: f64,
    pub v: f64,
    pub d: f64,
}

/// The mutable state bundle; cloned for LM accept/reject.
#[derive(Debug, Clone)]
pub struct WindowStates {
    pub frames: BTreeMap<u64, FrameState>,
    pub landmarks: BTreeMap<u64, LandmarkState>,
    pub rbf: RbfParams,
    pub plane: PlaneParams,
}

impl WindowStates {
    pub fn get(&self, var: VarKey) -> StateValue {
        match var {
            VarKey::FramePose(id) => StateValue::Pose(self.frames[&id].pose),
            VarKey::FrameVel(id) => StateValue::Vec3(self.frames[&id].vel),
            VarKey::FrameBias(id) => StateValue::Bias(self.frames[&id].bias),
            VarKey::FrameExtr(id) => StateValue::Pose(self.frames[&id].extr),
            VarKey::Rbf => StateValue::Rbf(self.rbf),
            VarKey::Plane => StateValue::Plane(self.plane),
            VarKey::Landmark(id) => {
                let l = &self.landmarks[&id];
                StateValue::Landmark(Vector3::new(l.u, l.v, l.d))
            }
        }
    }

    /// Chart coordinates of the current value around `reference`.
    pub fn local(&self, var: VarKey, reference: &StateValue) -> DVector<f64> {
        match (var, reference) {
            (VarKey::FramePose(id), StateValue::Pose(r)) => {
                DVector::from_column_slice(r.local(&self.frames[&id].pose).as_slice())
            }
            (VarKey::FrameExtr(id), StateValue::Pose(r)) => {
                DVector::from_column_slice(r.local(&self.frames[&id].extr).as_slice())
            }
            (VarKey::FrameVel(id), StateValue::Vec3(r)) => {
                DVector::from_column_slice((self.frames[&id].vel - r).as_slice())
            }
            (VarKey::FrameBias(id), StateValue::Bias(r)) => {
                DVector::from_column_slice((self.frames[&id].bias.vector() - r.vector()).as_slice())
            }
            (VarKey::Rbf, StateValue::Rbf(r)) => {
                DVector::from_column_slice((self.rbf.vector() - r.vector()).as_slice())
            }
            (VarKey::Plane, StateValue::Plane(r)) => {
                DVector::from_column_slice(r.local(&self.plane).as_slice())
            }
            (VarKey::Landmark(id), StateValue::Landmark(r)) => {
                let l = &self.landmarks[&id];
                DVector::from_column_slice((Vector3::new(l.u, l.v, l.d) - r).as_slice())
            }
            _ => panic!("variable/reference type mismatch"),
        }
    }

    pub fn retract(&mut self, var: VarKey, delta: &[f64]) {
        match var {
            VarKey::FramePose(id) => {
                let f = self.frames.get_mut(&id).unwrap();
                f.pose = f.pose.retract(&Vector6::from_column_slice(delta));
            }
            VarKey::FrameExtr(id) => {
                let f = self.frames.get_mut(&id).unwrap();
                f.extr = f.extr.retract(&Vector6::from_column_slice(delta));
            }
            VarKey::FrameVel(id) => {
                self.frames.get_mut(&id).unwrap().vel += Vector3::from_column_slice(delta);
            }
            VarKey::FrameBias(id) => {
                let f = self.frames.get_mut(&id).unwrap();
                f.bias.acc += Vector3::new(delta[0], delta[1], delta[2]);
                f.bias.gyro += Vector3::new(delta[3], delta[4], delta[5]);
            }
            VarKey::Rbf => {
                let v = self.rbf.vector() + Vector6::from_column_slice(delta);
                self.rbf = RbfParams::from_vector(&v);
            }
            VarKey::Plane => {
                self.plane = self.plane.retract(&Vector3::from_column_slice(delta));
            }
            VarKey::Landmark(id) => {
                let l = self.landmarks.get_mut(&id).unwrap();
                l.u += delta[0];
                l.v += delta[1];
                l.d = (l.d + delta[2]).max(0.0);
            }
        }
    }
}

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(transparent)]
    Solve(#[from] linear::SolveError),
    #[error(transparent)]
    Preint(#[from] preint::PreintError),
    #[error("estimator needs at least one frame")]
    NoFrames,
}

/// One output row of the trajectory estimate.
#[derive(Debug, Clone, Copy)]
pub struct TrajectoryRow {
    pub id: u64,
    pub t: f64,
    pub pose: Pose3,
    pub vel: Vector3<f64>,
    pub bias: ImuBias,
    pub extr: Pose3,
}

/// Per-frame effective-control log entry.
#[derive(Debug, Clone, Copy)]
pub struct TwistRow {
    pub frame: u64,
    pub t: f64,
    pub twist: Twist2,
}

/// Per-frame observability diagnostics of the RBF block.
#[derive(Debug, Clone, Copy)]
pub struct RbfDiag {
    pub frame: u64,
    pub min_eig_lin: f64,
    pub max_eig_lin: f64,
    pub min_eig_ang: f64,
    pub max_eig_ang: f64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OptimizeStats {
    pub iterations: usize,
    pub accepted_steps: usize,
    pub final_energy: f64,
}

/// Result of a full sequence run.
pub struct EstimationResult {
    pub trajectory: Vec<TrajectoryRow>,
    pub rbf: RbfParams,
    pub plane: PlaneParams,
    pub effective_twists: Vec<TwistRow>,
    pub diagnostics: Vec<RbfDiag>,
    pub motion_disabled: bool,
}

/// Extra knobs for diagnostics-gathering runs.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunOptions {
    pub collect_rbf_diagnostics: bool,
}

pub struct SlidingWindow {
    pub cfg: EstimatorConfig,
    ctx: EvalContext,
    commands: Vec<ControlCommand>,
    imu: Vec<ImuSample>,
    pub states: WindowStates,
    frames: VecDeque<u64>,
    keyframes: VecDeque<u64>,
    kf_designate: BTreeSet<u64>,
    factors: Vec<Factor>,
    prior: Option<MargPrior>,
    globals_frozen: bool,
    frozen_rbf: RbfParams,
    frozen_plane: PlaneParams,
    motion_enabled: bool,
    init_rbf: RbfParams,
    trajectory: Vec<TrajectoryRow>,
    twist_log: Vec<TwistRow>,
    diagnostics: Vec<RbfDiag>,
    options: RunOptions,
}

impl SlidingWindow {
    pub fn new(dataset: &Dataset, cfg: EstimatorConfig, options: RunOptions) -> Self {
        let meta = &dataset.meta;
        // Assumed noise: the dataset's values floored at consumer-grade
        // defaults, so zero-noise datasets keep finite weights.
        let floor = ImuNoiseSpec::default();
        let noise = ImuNoiseSpec {
            accel_noise_density: meta.imu_noise.accel_noise_density.max(floor.accel_noise_density),
            gyro_noise_density: meta.imu_noise.gyro_noise_density.max(floor.gyro_noise_density),
            accel_bias_walk: meta.imu_noise.accel_bias_walk.max(floor.accel_bias_walk),
            gyro_bias_walk: meta.imu_noise.gyro_bias_walk.max(floor.gyro_bias_walk),
        };
        let sigma_px = meta.pixel_sigma.max(cfg.pixel_sigma_floor);
        let extr_rot_w = 1.0 / cfg.extr_walk_sigma_rot_deg.to_radians();
        let extr_trans_w = 1.0 / cfg.extr_walk_sigma_trans;
        let plane_angle_w = 1.0 / cfg.plane_sigma_angle_deg.to_radians();
        let ctx = EvalContext {
            fx: meta.rig.fx,
            fy: meta.rig.fy,
            cx: meta.rig.cx,
            cy: meta.rig.cy,
            baseline: meta.rig.baseline,
            sigma_px,
            huber_px: cfg.huber_px,
            gravity: meta.gravity_vector(),
            noise,
            motion_sigma: Vector3::new(
                cfg.motion_sigma.lin,
                cfg.motion_sigma.lat,
                cfg.motion_sigma.ang,
            ),
            lateral_strict: cfg.lateral_mode == LateralMode::Strict,
            extr_walk_sqrt_info: Vector6::new(
                extr_trans_w,
                extr_trans_w,
                extr_trans_w,
                extr_rot_w,
                extr_rot_w,
                extr_rot_w,
            ),
            plane_sqrt_info: Vector3::new(plane_angle_w, plane_angle_w, 1.0 / cfg.plane_sigma_dist),
        };
        let motion_enabled = cfg.motion_factors && !dataset.commands.is_empty();
        let init_rbf = cfg.rbf_init.clamped();
        Self {
            cfg,
            ctx,
            commands: dataset.commands.clone(),
            imu: dataset.imu.clone(),
            states: WindowStates {
                frames: BTreeMap::new(),
                landmarks: BTreeMap::new(),
                rbf: init_rbf,
                plane: PlaneParams::identity(),
            },
            frames: VecDeque::new(),
            keyframes: VecDeque::new(),
            kf_designate: BTreeSet::new(),
            factors: Vec::new(),
            prior: None,
            globals_frozen: false,
            frozen_rbf: init_rbf,
            frozen_plane: PlaneParams::identity(),
            motion_enabled,
            init_rbf,
            trajectory: Vec::new(),
            twist_log: Vec::new(),
            diagnostics: Vec::new(),
            options,
        }
    }

    fn rbf_is_state(&self) -> bool {
        self.motion_enabled && self.cfg.mode == WeightingMode::Rbf
    }

    fn plane_is_state(&self) -> bool {
        self.cfg.plane_factor
    }

    /// Active non-landmark variables of the current window.
    fn layout(&self) -> Layout {
        let mut vars: Vec<VarKey> = Vec::new();
        for &id in &self.frames {
            vars.push(VarKey::FramePose(id));
            vars.push(VarKey::FrameVel(id));
            vars.push(VarKey::FrameBias(id));
            vars.push(VarKey::FrameExtr(id));
        }
        for &id in &self.keyframes {
            vars.push(VarKey::FramePose(id));
        }
        if self.rbf_is_state() {
            vars.push(VarKey::Rbf);
        }
        if self.plane_is_state() {
            vars.push(VarKey::Plane);
        }
        Layout::new(vars)
    }

    fn control_source(&self) -> ControlSource {
        match self.cfg.mode {
            WeightingMode::Rbf => ControlSource::Rbf,
            WeightingMode::RbfFrozen => ControlSource::RbfFixed(self.init_rbf),
            WeightingMode::Avg => ControlSource::Avg,
            WeightingMode::Raw => ControlSource::Raw(Twist2::zero()), // replaced per factor
        }
    }

    /// Initialize the first frame: attitude from the accelerometer average
    /// over the initial stationary second, plane from the initial base
    /// pose, priors on everything the gauge or the data cannot pin down.
    fn initialize_first_frame(&mut self, dataset: &Dataset, frame: &crate::sim::FrameInfo) {
        let window_end = 1.0_f64.min(dataset.meta.duration);
        let mut acc = Vector3::zeros();
        let mut count = 0;
        for s in self.imu.iter().take_while(|s| s.t <= window_end) {
            acc += s.accel;
            count += 1;
        }
        if count > 0 {
            acc /= count as f64;
        } else {
            acc = Vector3::z() * 9.81;
        }
        let up = acc.normalize();
        let rot = nalgebra::UnitQuaternion::rotation_between(&up, &Vector3::z())
            .unwrap_or_else(nalgebra::UnitQuaternion::identity);

        let extr0 = dataset.meta.extr_cad.pose();
        let pose0 = Pose3::new(rot, Vector3::zeros());
        self.states.frames.insert(
            frame.id,
            FrameState {
                t: frame.t,
                pose: pose0,
                vel: Vector3::zeros(),
                bias: ImuBias::zero(),
                extr: extr0,
            },
        );
        self.frames.push_back(frame.id);

        let base0 = pose0.compose(&extr0.inverse());
        self.states.plane = PlaneParams::from_base_pose(&base0);

        let p = &self.cfg.priors;
        let rot_w = 1.0 / p.first_pose_rot_deg.to_radians();
        let pose_sqrt = DVector::from_column_slice(&[
            1.0 / p.first_pose_trans,
            1.0 / p.first_pose_trans,
            1.0 / p.first_pose_trans,
            rot_w,
            rot_w,
            rot_w,
        ]);
        self.factors.push(Factor::Prior {
            var: VarKey::FramePose(frame.id),
            mean: StateValue::Pose(pose0),
            sqrt_info: pose_sqrt,
        });
        self.factors.push(Factor::Prior {
            var: VarKey::FrameVel(frame.id),
            mean: StateValue::Vec3(Vector3::zeros()),
            sqrt_info: DVector::from_element(3, 1.0 / p.velocity),
        });
        self.factors.push(Factor::Prior {
            var: VarKey::FrameBias(frame.id),
            mean: StateValue::Bias(ImuBias::zero()),
            sqrt_info: DVector::from_column_slice(&[
                1.0 / p.bias_acc,
                1.0 / p.bias_acc,
                1.0 / p.bias_acc,
                1.0 / p.bias_gyro,
                1.0 / p.bias_gyro,
                1.0 / p.bias_gyro,
            ]),
        });
        let extr_rot_w = 1.0 / p.extr_rot_deg.to_radians();
        self.factors.push(Factor::Prior {
            var: VarKey::FrameExtr(frame.id),
            mean: StateValue::Pose(extr0),
            sqrt_info: DVector::from_column_slice(&[
                1.0 / p.extr_trans,
                1.0 / p.extr_trans,
                1.0 / p.extr_trans,
                extr_rot_w,
                extr_rot_w,
                extr_rot_w,
            ]),
        });
        if self.plane_is_state() {
            let w = 1.0 / p.plane_angle_deg.to_radians();
            self.factors.push(Factor::Prior {
                var: VarKey::Plane,
                mean: StateValue::Plane(self.states.plane),
                sqrt_info: DVector::from_column_slice(&[w, w, 0.0]),
            });
        }
        if self.rbf_is_state() && self.cfg.rbf_prior {
            self.factors.push(Factor::Prior {
                var: VarKey::Rbf,
                mean: StateValue::Rbf(self.init_rbf),
                sqrt_info: DVector::from_column_slice(&[
                    1.0 / p.rbf_mu,
                    1.0 / p.rbf_sigma,
                    1.0 / p.rbf_scale,
                    1.0 / p.rbf_mu,
                    1.0 / p.rbf_sigma,
                    1.0 / p.rbf_scale,
                ]),
            });
        }
    }

    /// Create hosted landmarks for stereo-paired observations of a new
    /// keyframe.
    fn create_landmarks(&mut self, dataset: &Dataset, frame_id: u64) {
        let mut left: BTreeMap<u64, nalgebra::Vector2<f64>> = BTreeMap::new();
        let mut right: BTreeMap<u64, nalgebra::Vector2<f64>> = BTreeMap::new();
        for o in dataset.obs_for_frame(frame_id) {
            if self.states.landmarks.contains_key(&o.landmark) {
                continue;
            }
            if o.cam == 0 {
                left.insert(o.landmark, o.px);
            } else {
                right.insert(o.landmark, o.px);
            }
        }
        let mut created = 0usize;
        for (lid, px_l) in left {
            if created >= self.cfg.max_new_landmarks_per_keyframe {
                break;
            }
            let Some(px_r) = right.get(&lid) else {
                continue;
            };
            created += 1;
            let dir = Vector3::new(
                (px_l.x - self.ctx.cx) / self.ctx.fx,
                (px_l.y - self.ctx.cy) / self.ctx.fy,
                1.0,
            );
            let disparity = (px_l.x - px_r.x).max(1e-3);
            let depth = self.ctx.fx * self.ctx.baseline / disparity;
            let range = (dir * depth).norm();
            let b = dir.normalize();
            let (u, v) = factors::bearing_inverse(&b);
            self.states.landmarks.insert(
                lid,
                LandmarkState {
                    host: frame_id,
                    u,
                    v,
                    d: 1.0 / range.max(1e-3),
                },
            );
        }
    }

    /// Feed the next frame: state propagation, factor creation,
    /// optimization and window maintenance.
    pub fn add_frame(
        &mut self,
        dataset: &Dataset,
        frame: &crate::sim::FrameInfo,
    ) -> Result<OptimizeStats, EstimatorError> {
        let id = frame.id;
        let is_first = self.frames.is_empty() && self.keyframes.is_empty();
        if is_first {
            self.initialize_first_frame(dataset, frame);
        } else {
            let prev = *self.frames.back().ok_or(EstimatorError::NoFrames)?;
            let prev_state = self.states.frames[&prev];
            let samples = preint::slice_interpolated(&self.imu, prev_state.t, frame.t)?;
            let pre = preint::integrate(&samples, &prev_state.bias, &self.ctx.noise)?;

            // Whitener from the propagated covariance.
            let mut cov = pre.cov;
            for i in 0..9 {
                cov[(i, i)] += 1e-16;
            }
            let chol = nalgebra::Cholesky::new(cov).expect("preintegration covariance PSD");
            let sqrt_info: SMatrix<f64, 9, 9> = chol
                .l()
                .try_inverse()
                .expect("cholesky factor invertible");

            let nav = pre.predict(
                &preint::NavState {
                    pose: prev_state.pose,
                    vel: prev_state.vel,
                },
                &prev_state.bias,
                &self.ctx.gravity,
            );
            self.states.frames.insert(
                id,
                FrameState {
                    t: frame.t,
                    pose: nav.pose,
                    vel: nav.vel,
                    bias: prev_state.bias,
                    extr: prev_state.extr,
                },
            );
            self.frames.push_back(id);

            self.factors.push(Factor::Inertial {
                i: prev,
                j: id,
                pre,
                sqrt_info,
            });
            if self.motion_enabled {
                if let Some(window) =
                    CommandWindow::build(&self.commands, frame.t, self.cfg.command_window)
                {
                    let control = match self.cfg.mode {
                        WeightingMode::Raw => {
                            ControlSource::Raw(command_at(&self.commands, prev_state.t))
                        }
                        _ => self.control_source(),
                    };
                    self.factors.push(Factor::Motion {
                        i: prev,
                        j: id,
                        dt: frame.t - prev_state.t,
                        window,
                        control,
                        forward: self.cfg.forward_residual,
                    });
                }
            }
            self.factors.push(Factor::ExtrWalk { i: prev, j: id });
        }

        if self.plane_is_state() {
            self.factors.push(Factor::Plane { frame: id });
        }

        if frame.id % self.cfg.keyframe_interval == 0 {
            self.kf_designate.insert(id);
            self.create_landmarks(dataset, id);
        }
        for o in dataset.obs_for_frame(id) {
            if let Some(lm) = self.states.landmarks.get(&o.landmark) {
                self.factors.push(Factor::Visual {
                    target: id,
                    host: lm.host,
                    landmark: o.landmark,
                    cam: o.cam,
                    z: o.px,
                });
            }
        }

        let stats = self.optimize()?;
        self.log_effective_twist(id, frame.t);
        if self.options.collect_rbf_diagnostics && self.rbf_is_state() {
            self.collect_diagnostics(id);
        }
        self.maintain_window()?;
        Ok(stats)
    }

    fn log_effective_twist(&mut self, id: u64, t: f64) {
        if !self.motion_enabled {
            return;
        }
        let Some(window) = CommandWindow::build(&self.commands, t, self.cfg.command_window) else {
            return;
        };
        let twist = match self.cfg.mode {
            WeightingMode::Rbf => motion::effective_control(&window, &self.states.rbf),
            WeightingMode::RbfFrozen => motion::effective_control(&window, &self.init_rbf),
            WeightingMode::Avg => motion::window_average(&window),
            WeightingMode::Raw => {
                // Raw uses the last command before the previous frame.
                let prev_t = self
                    .states
                    .frames
                    .values()
                    .filter(|f| f.t < t)
                    .map(|f| f.t)
                    .fold(f64::NEG_INFINITY, f64::max);
                if prev_t.is_finite() {
                    command_at(&self.commands, prev_t)
                } else {
                    return;
                }
            }
        };
        self.twist_log.push(TwistRow {
            frame: id,
            t,
            twist,
        });
    }

    /// Levenberg-Marquardt with per-iteration landmark elimination.
    pub fn optimize(&mut self) -> Result<OptimizeStats, EstimatorError> {
        let timing = std::env::var("KINVIO_TIMING").is_ok();
        let layout = self.layout();
        let mut lambda = self.cfg.lm_lambda_init;
        let t0 = std::time::Instant::now();
        let mut energy = total_energy(&self.factors, self.prior.as_ref(), &self.states, &self.ctx);
        let mut t_energy = t0.elapsed();
        let mut t_assemble = std::time::Duration::ZERO;
        let mut t_solve = std::time::Duration::ZERO;
        let mut stats = OptimizeStats {
            final_energy: energy,
            ..Default::default()
        };

        for _ in 0..self.cfg.max_iterations {
            stats.iterations += 1;
            let ta = std::time::Instant::now();
            let asm = assemble(
                &self.factors,
                self.prior.as_ref(),
                &self.states,
                &self.ctx,
                &layout,
            );
            t_assemble += ta.elapsed();
            if asm.gradient_norm() < 1e-8 {
                break;
            }
            let mut accepted = false;
            let mut step_norm = 0.0;
            let mut attempts = 0;
            while lambda < 1e12 && attempts < 24 {
                attempts += 1;
                let ts = std::time::Instant::now();
                let maybe_step = solve_damped(&asm, lambda);
                t_solve += ts.elapsed();
                let Some(step) = maybe_step else {
                    lambda *= 2.0;
                    continue;
                };
                if step.norm < self.cfg.step_tol {
                    // The damped step collapsed to numerical noise.
                    break;
                }
                let mut candidate = self.states.clone();
                let mut off = 0;
                for var in &layout.order {
                    candidate.retract(*var, step.delta_p.rows(off, var.dim()).as_slice());
                    off += var.dim();
                }
                for (lid, dl) in &step.delta_lm {
                    candidate.retract(VarKey::Landmark(*lid), dl.as_slice());
                }
                let te = std::time::Instant::now();
                let e_new = total_energy(&self.factors, self.prior.as_ref(), &candidate, &self.ctx);
                t_energy += te.elapsed();
                if e_new.is_finite() && e_new <= energy {
                    assert!(e_new <= energy, "energy must not increase on accepted steps");
                    self.states = candidate;
                    let improvement = energy - e_new;
                    energy = e_new;
                    lambda = (lambda * 0.5).max(1e-12);
                    accepted = true;
                    stats.accepted_steps += 1;
                    step_norm = step.norm;
                    let rel = improvement / energy.abs().max(1e-12);
                    if rel < self.cfg.rel_decrease_tol || energy < 1e-16 {
                        stats.final_energy = energy;
                        if timing {
                            eprintln!("optimize: iters={} (rel-converged) energy={energy:.6e}", stats.iterations);
                        }
                        return Ok(stats);
                    }
                    break;
                }
                lambda *= 2.0;
            }
            if !accepted {
                // No downhill step found at any damping: converged.
                break;
            }
            if step_norm < self.cfg.step_tol {
                break;
            }
        }
        if timing {
            eprintln!(
                "optimize: iters={} accepted={} lambda={lambda:.2e} energy={energy:.6e} assemble={t_assemble:?} solve={t_solve:?} energy_t={t_energy:?}",
                stats.iterations, stats.accepted_steps
            );
        }
        stats.final_energy = energy;
        Ok(stats)
    }

    /// Enforce the window sizes by promotion and marginalization.
    fn maintain_window(&mut self) -> Result<(), EstimatorError> {
        while self.frames.len() > self.cfg.num_frames {
            let id = self.frames.pop_front().unwrap();
            if self.kf_designate.contains(&id) {
                self.promote_frame(id);
                self.keyframes.push_back(id);
            } else {
                self.marginalize_frame_full(id);
            }
        }
        while self.keyframes.len() > self.cfg.num_keyframes {
            let id = self.keyframes.pop_front().unwrap();
            self.marginalize_keyframe(id);
        }
        self.cleanup_landmarks();
        Ok(())
    }

    fn freeze_globals_if_needed(&mut self) {
        if !self.globals_frozen {
            self.frozen_rbf = self.states.rbf;
            self.frozen_plane = self.states.plane;
            self.globals_frozen = true;
        }
    }

    /// Run one marginalization event: absorbed factors are removed from
    /// the graph and folded into the prior, then `kill` is eliminated.
    fn marginalize_event(&mut self, kill: BTreeSet<VarKey>, absorbed_idx: Vec<usize>) {
        // Move local prior variables to their current linearization points;
        // globals stay at their frozen points.
        if let Some(prior) = &mut self.prior {
            let locals: BTreeSet<VarKey> = prior
                .order
                .iter()
                .copied()
                .filter(|v| !matches!(v, VarKey::Rbf | VarKey::Plane))
                .collect();
            prior.shift_to(&self.states, &locals);
        }
        self.freeze_globals_if_needed();

        let mut absorbed = Vec::new();
        let mut keep = Vec::new();
        let absorbed_set: BTreeSet<usize> = absorbed_idx.into_iter().collect();
        for (i, f) in self.factors.drain(..).enumerate() {
            if absorbed_set.contains(&i) {
                absorbed.push(f);
            } else {
                keep.push(f);
            }
        }
        self.factors = keep;

        // Absorbed factors are linearized at the current local states but
        // at the frozen global linearization points, matching the prior's
        // stored references for the globals.
        let mut marg_states = self.states.clone();
        marg_states.rbf = self.frozen_rbf;
        marg_states.plane = self.frozen_plane;

        self.prior = marginalize(
            self.prior.as_ref(),
            &absorbed,
            &kill,
            &marg_states,
            &self.ctx,
        );

        // Drop killed states.
        for var in kill {
            match var {
                VarKey::Landmark(id) => {
                    self.states.landmarks.remove(&id);
                }
                VarKey::FramePose(id) => {
                    // Pose removal retires the whole frame state.
                    self.states.frames.remove(&id);
                }
                _ => {}
            }
        }
    }

    fn record_trajectory(&mut self, id: u64) {
        let f = &self.states.frames[&id];
        self.trajectory.push(TrajectoryRow {
            id,
            t: f.t,
            pose: f.pose,
            vel: f.vel,
            bias: f.bias,
            extr: f.extr,
        });
    }

    /// Oldest frame leaves the window entirely: drop its visual factors,
    /// absorb everything else touching it.
    fn marginalize_frame_full(&mut self, id: u64) {
        self.record_trajectory(id);
        let kill: BTreeSet<VarKey> = [
            VarKey::FramePose(id),
            VarKey::FrameVel(id),
            VarKey::FrameBias(id),
            VarKey::FrameExtr(id),
        ]
        .into();
        // Visual factors targeting the dying pose are dropped, not
        // absorbed, so the prior never couples to live landmarks.
        self.factors
            .retain(|f| !matches!(f, Factor::Visual { target, .. } if *target == id));
        let absorbed: Vec<usize> = self
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.touches(&kill))
            .map(|(i, _)| i)
            .collect();
        self.marginalize_event(kill, absorbed);
    }

    /// Oldest frame becomes a keyframe: velocity, bias and extrinsic are
    /// marginalized, the pose stays.
    fn promote_frame(&mut self, id: u64) {
        let kill: BTreeSet<VarKey> = [
            VarKey::FrameVel(id),
            VarKey::FrameBias(id),
            VarKey::FrameExtr(id),
        ]
        .into();
        let absorbed: Vec<usize> = self
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.touches(&kill))
            .map(|(i, _)| i)
            .collect();
        self.marginalize_event(kill, absorbed);
    }

    /// Oldest keyframe leaves: its hosted landmarks are marginalized with
    /// it; visual factors of other landmarks that target it are dropped.
    fn marginalize_keyframe(&mut self, id: u64) {
        self.record_trajectory(id);
        let hosted: Vec<u64> = self
            .states
            .landmarks
            .iter()
            .filter(|(_, l)| l.host == id)
            .map(|(lid, _)| *lid)
            .collect();
        let mut kill: BTreeSet<VarKey> = hosted.iter().map(|l| VarKey::Landmark(*l)).collect();
        kill.insert(VarKey::FramePose(id));

        let hosted_set: BTreeSet<u64> = hosted.into_iter().collect();
        // Keep absorption landmark-clean: only factors whose landmark dies
        // may enter the prior.
        self.factors.retain(|f| match f {
            Factor::Visual {
                target, landmark, ..
            } => !(*target == id && !hosted_set.contains(landmark)),
            _ => true,
        });
        let absorbed: Vec<usize> = self
            .factors
            .iter()
            .enumerate()
            .filter(|(_, f)| f.touches(&kill))
            .map(|(i, _)| i)
            .collect();
        self.marginalize_event(kill, absorbed);
    }

    /// Landmarks need two observations in-window to stay.
    fn cleanup_landmarks(&mut self) {
        let mut counts: BTreeMap<u64, usize> = BTreeMap::new();
        for f in &self.factors {
            if let Factor::Visual { landmark, .. } = f {
                *counts.entry(*landmark).or_insert(0) += 1;
            }
        }
        let dead: Vec<u64> = self
            .states
            .landmarks
            .keys()
            .filter(|lid| counts.get(lid).copied().unwrap_or(0) < 2)
            .copied()
            .collect();
        if dead.is_empty() {
            return;
        }
        let dead_set: BTreeSet<u64> = dead.iter().copied().collect();
        self.factors.retain(|f| {
            !matches!(f, Factor::Visual { landmark, .. } if dead_set.contains(landmark))
        });
        for lid in dead {
            self.states.landmarks.remove(&lid);
        }
    }

    /// Reduced Hessian over the RBF block with everything else eliminated.
    fn collect_diagnostics(&mut self, frame: u64) {
        let layout = self.layout();
        let asm = assemble(
            &self.factors,
            self.prior.as_ref(),
            &self.states,
            &self.ctx,
            &layout,
        );
        let Some(h_red) = linear::reduced_hessian(&asm) else {
            return;
        };
        let Some(&rbf_off) = layout.offsets.get(&VarKey::Rbf) else {
            return;
        };
        // Schur-eliminate all non-RBF coordinates.
        let n = h_red.nrows();
        let idx_rbf: Vec<usize> = (rbf_off..rbf_off + 6).collect();
        let idx_other: Vec<usize> = (0..n).filter(|i| !idx_rbf.contains(i)).collect();
        let take = |rows: &[usize], cols: &[usize]| {
            nalgebra::DMatrix::from_fn(rows.len(), cols.len(), |r, c| h_red[(rows[r], cols[c])])
        };
        let h_rr = take(&idx_rbf, &idx_rbf);
        let h_ro = take(&idx_rbf, &idx_other);
        let h_oo = take(&idx_other, &idx_other);
        let eig_oo = nalgebra::SymmetricEigen::new(h_oo);
        let max_ev = eig_oo.eigenvalues.amax().max(1e-300);
        let mut inv = eig_oo.eigenvalues.clone();
        for v in inv.iter_mut() {
            *v = if *v > 1e-12 * max_ev { 1.0 / *v } else { 0.0 };
        }
        let h_oo_inv =
            &eig_oo.eigenvectors * nalgebra::DMatrix::from_diagonal(&inv) * eig_oo.eigenvectors.transpose();
        let h_cond = h_rr - &h_ro * h_oo_inv * h_ro.transpose();

        let channel = |rows: [usize; 3]| {
            let m = nalgebra::Matrix3::from_fn(|r, c| h_cond[(rows[r], rows[c])]);
            let eig = nalgebra::SymmetricEigen::new(m);
            (eig.eigenvalues.min(), eig.eigenvalues.max())
        };
        // Parameter order (mu, sigma, s) per channel.
        let (min_lin, max_lin) = channel([0, 1, 2]);
        let (min_ang, max_ang) = channel([3, 4, 5]);
        self.diagnostics.push(RbfDiag {
            frame,
            min_eig_lin: min_lin,
            max_eig_lin: max_lin,
            min_eig_ang: min_ang,
            max_eig_ang: max_ang,
        });
    }

    /// Flush remaining window states into the trajectory and return the
    /// result.
    pub fn finish(mut self) -> EstimationResult {
        let remaining: Vec<u64> = self
            .keyframes
            .iter()
            .chain(self.frames.iter())
            .copied()
            .collect();
        for id in remaining {
            self.record_trajectory(id);
        }
        self.trajectory.sort_by_key(|r| r.id);
        EstimationResult {
            trajectory: self.trajectory,
            rbf: self.states.rbf,
            plane: self.states.plane,
            effective_twists: self.twist_log,
            diagnostics: self.diagnostics,
            motion_disabled: !self.motion_enabled,
        }
    }
}

/// Stream a whole dataset through the sliding window.
pub fn run_sequence(
    dataset: &Dataset,
    cfg: &EstimatorConfig,
    options: RunOptions,
) -> Result<EstimationResult, EstimatorError> {
    let mut window = SlidingWindow::new(dataset, cfg.clone(), options);
    for frame in &dataset.frames {
        window.add_frame(dataset, frame)?;
    }
    Ok(window.finish())
}
