//! Command implementations behind the CLI: simulate, estimate, predict,
//! evaluate and obscheck, each reading and writing plain structured text.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use thiserror::Error;

use crate::config::{Config, WeightingMode};
use crate::estimator::{run_sequence, EstimationResult, RunOptions};
use crate::geometry::{Pose3, Twist2};
use crate::metrics;
use crate::motion::RbfParams;
use crate::observability;
use crate::plane::PlaneParams;
use crate::predict;
use crate::sim::{self, Dataset};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Dataset(#[from] sim::DatasetError),
    #[error(transparent)]
    Sim(#[from] sim::SimError),
    #[error(transparent)]
    Estimator(#[from] crate::estimator::EstimatorError),
    #[error(transparent)]
    Predict(#[from] predict::PredictError),
    #[error("config error: {0}")]
    Config(String),
    #[error("{file}:{line}: unknown record tag `{tag}`")]
    UnknownTag {
        file: String,
        line: usize,
        tag: String,
    },
    #[error("{file}:{line}: malformed record")]
    Malformed { file: String, line: usize },
    #[error("bad argument: {0}")]
    BadArg(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn load_config(path: Option<&Path>) -> Result<Config, PipelineError> {
    match path {
        None => Ok(Config::default()),
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(io_err(p))?;
            Config::from_str(&raw).map_err(|e| PipelineError::Config(e.to_string()))
        }
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:.17e}")
}

/// `simulate --config <file> --out <dir> --seed <n>`
pub fn cmd_simulate(config: Option<&Path>, out: &Path, seed: u64) -> Result<(), PipelineError> {
    let cfg = load_config(config)?;
    let ds = sim::simulate_dataset(&cfg.sim, seed)?;
    sim::write_dataset(out, &ds)?;
    println!(
        "simulate: wrote {} frames, {} imu samples, {} commands, {} landmarks to {}",
        ds.frames.len(),
        ds.imu.len(),
        ds.commands.len(),
        ds.landmarks.len(),
        out.display()
    );
    Ok(())
}

/// Written per estimate run.
pub struct EstimateFiles {
    pub trajectory: String,
    pub calibration: String,
}

pub fn render_estimate(result: &EstimationResult, times: &[(u64, f64)]) -> EstimateFiles {
    let _ = times;
    let mut traj = String::new();
    for row in &result.trajectory {
        let q = row.pose.rot.quaternion();
        let eq = row.extr.rot.quaternion();
        writeln!(
            traj,
            "est {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            fmt_f(row.t),
            fmt_f(row.pose.trans.x),
            fmt_f(row.pose.trans.y),
            fmt_f(row.pose.trans.z),
            fmt_f(q.w),
            fmt_f(q.i),
            fmt_f(q.j),
            fmt_f(q.k),
            fmt_f(row.vel.x),
            fmt_f(row.vel.y),
            fmt_f(row.vel.z),
            fmt_f(row.bias.acc.x),
            fmt_f(row.bias.acc.y),
            fmt_f(row.bias.acc.z),
            fmt_f(row.bias.gyro.x),
            fmt_f(row.bias.gyro.y),
            fmt_f(row.bias.gyro.z),
            fmt_f(row.extr.trans.x),
            fmt_f(row.extr.trans.y),
            fmt_f(row.extr.trans.z),
            fmt_f(eq.w),
            fmt_f(eq.i),
            fmt_f(eq.j),
            fmt_f(eq.k)
        )
        .unwrap();
    }
    let mut calib = String::new();
    let r = &result.rbf;
    writeln!(
        calib,
        "rbf {} {} {} {} {} {}",
        fmt_f(r.mu_lin),
        fmt_f(r.sigma_lin),
        fmt_f(r.s_lin),
        fmt_f(r.mu_ang),
        fmt_f(r.sigma_ang),
        fmt_f(r.s_ang)
    )
    .unwrap();
    let pq = result.plane.q.quaternion();
    writeln!(
        calib,
        "plane {} {} {} {} {}",
        fmt_f(pq.w),
        fmt_f(pq.i),
        fmt_f(pq.j),
        fmt_f(pq.k),
        fmt_f(result.plane.d)
    )
    .unwrap();
    for tw in &result.effective_twists {
        writeln!(
            calib,
            "twist {} {} {} {}",
            tw.frame,
            fmt_f(tw.t),
            fmt_f(tw.twist.v),
            fmt_f(tw.twist.omega)
        )
        .unwrap();
    }
    EstimateFiles {
        trajectory: traj,
        calibration: calib,
    }
}

/// CLI flag overrides applied on top of the config file.
#[derive(Debug, Clone, Copy, Default)]
pub struct EstimateOverrides {
    pub mode: Option<WeightingMode>,
    pub no_motion: bool,
    pub no_plane: bool,
    pub forward_residual: bool,
}

/// `estimate --dataset <dir> --config <file> [--mode ..] [--no-motion]
/// [--no-plane] [--forward-residual] --out <dir>`
pub fn cmd_estimate(
    dataset_dir: &Path,
    config: Option<&Path>,
    overrides: EstimateOverrides,
    out: &Path,
) -> Result<(), PipelineError> {
    let ds = sim::read_dataset(dataset_dir)?;
    let mut cfg = load_config(config)?.estimator;
    if let Some(mode) = overrides.mode {
        cfg.mode = mode;
    }
    if overrides.no_motion {
        cfg.motion_factors = false;
    }
    if overrides.no_plane {
        cfg.plane_factor = false;
    }
    if overrides.forward_residual {
        cfg.forward_residual = true;
    }
    let result = run_sequence(&ds, &cfg, RunOptions::default())?;
    if result.motion_disabled && cfg.motion_factors {
        eprintln!("estimate: empty command stream, motion factors disabled");
    }
    let files = render_estimate(&result, &[]);
    std::fs::create_dir_all(out).map_err(io_err(out))?;
    let traj_path = out.join("trajectory");
    std::fs::write(&traj_path, files.trajectory).map_err(io_err(&traj_path))?;
    let calib_path = out.join("calibration");
    std::fs::write(&calib_path, files.calibration).map_err(io_err(&calib_path))?;
    println!(
        "estimate: {} frames, mode {}, rbf = ({:.4}, {:.4}, {:.4} | {:.4}, {:.4}, {:.4})",
        result.trajectory.len(),
        cfg.mode.name(),
        result.rbf.mu_lin,
        result.rbf.sigma_lin,
        result.rbf.s_lin,
        result.rbf.mu_ang,
        result.rbf.sigma_ang,
        result.rbf.s_ang
    );
    Ok(())
}

/// Parsed estimate output.
pub struct EstimateOutput {
    pub rows: Vec<(f64, Pose3, Vector3<f64>)>,
    pub rbf: RbfParams,
    pub plane: PlaneParams,
    pub twists: Vec<(u64, f64, Twist2)>,
}

pub fn read_estimate(dir: &Path) -> Result<EstimateOutput, PipelineError> {
    let traj_path = dir.join("trajectory");
    let raw = std::fs::read_to_string(&traj_path).map_err(io_err(&traj_path))?;
    let mut rows = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != "est" {
            return Err(PipelineError::UnknownTag {
                file: "trajectory".into(),
                line: idx + 1,
                tag: fields[0].into(),
            });
        }
        let f: Vec<f64> = fields[1..]
            .iter()
            .map(|s| s.parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| PipelineError::Malformed {
                file: "trajectory".into(),
                line: idx + 1,
            })?;
        if f.len() != 24 {
            return Err(PipelineError::Malformed {
                file: "trajectory".into(),
                line: idx + 1,
            });
        }
        let pose = Pose3::new(
            UnitQuaternion::new_unchecked(Quaternion::new(f[4], f[5], f[6], f[7])),
            Vector3::new(f[1], f[2], f[3]),
        );
        rows.push((f[0], pose, Vector3::new(f[8], f[9], f[10])));
    }

    let calib_path = dir.join("calibration");
    let raw = std::fs::read_to_string(&calib_path).map_err(io_err(&calib_path))?;
    let (rbf, plane, twists) = parse_calibration(&raw)?;
    Ok(EstimateOutput {
        rows,
        rbf,
        plane,
        twists,
    })
}

pub fn parse_calibration(
    raw: &str,
) -> Result<(RbfParams, PlaneParams, Vec<(u64, f64, Twist2)>), PipelineError> {
    let mut rbf = RbfParams::default();
    let mut plane = PlaneParams::identity();
    let mut twists = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let parse_f = |s: &str| -> Result<f64, PipelineError> {
            s.parse().map_err(|_| PipelineError::Malformed {
                file: "calibration".into(),
                line: idx + 1,
            })
        };
        match fields[0] {
            "rbf" => {
                rbf = RbfParams {
                    mu_lin: parse_f(fields[1])?,
                    sigma_lin: parse_f(fields[2])?,
                    s_lin: parse_f(fields[3])?,
                    mu_ang: parse_f(fields[4])?,
                    sigma_ang: parse_f(fields[5])?,
                    s_ang: parse_f(fields[6])?,
                };
            }
            "plane" => {
                plane = PlaneParams {
                    q: UnitQuaternion::new_unchecked(Quaternion::new(
                        parse_f(fields[1])?,
                        parse_f(fields[2])?,
                        parse_f(fields[3])?,
                        parse_f(fields[4])?,
                    )),
                    d: parse_f(fields[5])?,
                };
            }
            "twist" => {
                let frame: u64 = fields[1].parse().map_err(|_| PipelineError::Malformed {
                    file: "calibration".into(),
                    line: idx + 1,
                })?;
                twists.push((
                    frame,
                    parse_f(fields[2])?,
                    Twist2::new(parse_f(fields[3])?, parse_f(fields[4])?),
                ));
            }
            tag => {
                return Err(PipelineError::UnknownTag {
                    file: "calibration".into(),
                    line: idx + 1,
                    tag: tag.into(),
                })
            }
        }
    }
    Ok((rbf, plane, twists))
}

/// `predict --dataset <dir> --calib <file> --horizons a,b,c --out <file>`
pub fn cmd_predict(
    dataset_dir: &Path,
    calib: &Path,
    horizons: &[f64],
    out: &Path,
) -> Result<(), PipelineError> {
    let ds = sim::read_dataset(dataset_dir)?;
    let raw = std::fs::read_to_string(calib).map_err(io_err(calib))?;
    let (rbf, _, _) = parse_calibration(&raw)?;
    let modes = [
        WeightingMode::Rbf,
        WeightingMode::RbfFrozen,
        WeightingMode::Avg,
        WeightingMode::Raw,
    ];
    let rows = predict::prediction_error_study(&ds, &rbf, horizons, &modes)?;
    let mut s = String::new();
    for r in &rows {
        writeln!(
            s,
            "pred {} {} {} {} {}",
            r.mode.name(),
            fmt_f(r.horizon),
            fmt_f(r.translation_rmse),
            fmt_f(r.heading_rmse_deg),
            r.samples
        )
        .unwrap();
    }
    std::fs::write(out, s).map_err(io_err(out))?;
    for r in &rows {
        println!(
            "predict: mode={:10} horizon={:5.2}s transl RMSE={:.4} m heading RMSE={:.3} deg (n={})",
            r.mode.name(),
            r.horizon,
            r.translation_rmse,
            r.heading_rmse_deg,
            r.samples
        );
    }
    Ok(())
}

/// Metric summary of one estimate against its dataset.
pub struct EvaluationSummary {
    pub ate_transl: f64,
    pub ate_rot_deg: f64,
    pub rpe_transl: f64,
    pub rpe_rot_deg: f64,
    pub rpe_per_fraction: Vec<(f64, f64, f64)>,
    pub vel_lin: f64,
    pub vel_ang_deg: f64,
}

pub fn evaluate(ds: &Dataset, est: &EstimateOutput) -> Result<EvaluationSummary, PipelineError> {
    let mut est_poses = Vec::new();
    let mut gt_poses = Vec::new();
    for (t, pose, _) in &est.rows {
        if let Some(gt) = ds.gt_at(*t) {
            est_poses.push(*pose);
            gt_poses.push(gt.pose);
        }
    }
    if est_poses.is_empty() {
        return Err(PipelineError::BadArg(
            "no overlapping timestamps between estimate and ground truth".into(),
        ));
    }
    let (ate_t, ate_r) = metrics::ate(&est_poses, &gt_poses);
    let (rpe_t, rpe_r) = metrics::rpe(&est_poses, &gt_poses);
    let per_fraction = metrics::rpe_per_fraction(&est_poses, &gt_poses);

    let mut est_tw = Vec::new();
    let mut gt_tw = Vec::new();
    for (_, t, tw) in &est.twists {
        if let Some(gt) = ds.gt_at(*t) {
            est_tw.push(*tw);
            gt_tw.push(gt.twist);
        }
    }
    let (vel_lin, vel_ang) = if est_tw.is_empty() {
        (0.0, 0.0)
    } else {
        metrics::velocity_rmse(&est_tw, &gt_tw)
    };
    Ok(EvaluationSummary {
        ate_transl: ate_t,
        ate_rot_deg: ate_r,
        rpe_transl: rpe_t,
        rpe_rot_deg: rpe_r,
        rpe_per_fraction: per_fraction,
        vel_lin,
        vel_ang_deg: vel_ang,
    })
}

/// `evaluate --estimate <dir> --dataset <dir> --out <file>`
pub fn cmd_evaluate(
    estimate_dir: &Path,
    dataset_dir: &Path,
    out: &Path,
) -> Result<(), PipelineError> {
    let ds = sim::read_dataset(dataset_dir)?;
    let est = read_estimate(estimate_dir)?;
    let summary = evaluate(&ds, &est)?;
    let mut s = String::new();
    writeln!(s, "ate_transl_m {}", fmt_f(summary.ate_transl)).unwrap();
    writeln!(s, "ate_rot_deg {}", fmt_f(summary.ate_rot_deg)).unwrap();
    writeln!(s, "rpe_transl_m {}", fmt_f(summary.rpe_transl)).unwrap();
    writeln!(s, "rpe_rot_deg {}", fmt_f(summary.rpe_rot_deg)).unwrap();
    for (frac, t, r) in &summary.rpe_per_fraction {
        writeln!(s, "rpe_fraction {} {} {}", frac, fmt_f(*t), fmt_f(*r)).unwrap();
    }
    writeln!(s, "vel_lin_mps {}", fmt_f(summary.vel_lin)).unwrap();
    writeln!(s, "vel_ang_degps {}", fmt_f(summary.vel_ang_deg)).unwrap();
    std::fs::write(out, &s).map_err(io_err(out))?;
    println!(
        "evaluate: ATE {:.4} m / {:.3} deg, RPE {:.4} m / {:.3} deg, vel {:.4} m/s / {:.3} deg/s",
        summary.ate_transl,
        summary.ate_rot_deg,
        summary.rpe_transl,
        summary.rpe_rot_deg,
        summary.vel_lin,
        summary.vel_ang_deg
    );
    Ok(())
}

/// `obscheck --dataset <dir> --calib <file> --out <file>`
pub fn cmd_obscheck(
    dataset_dir: &Path,
    calib: Option<&Path>,
    config: Option<&Path>,
    out: &Path,
) -> Result<(), PipelineError> {
    let ds = sim::read_dataset(dataset_dir)?;
    let rbf = match calib {
        Some(p) => {
            let raw = std::fs::read_to_string(p).map_err(io_err(p))?;
            parse_calibration(&raw)?.0
        }
        None => RbfParams::default(),
    };
    let cfg = load_config(config)?.estimator;

    let mut s = String::new();
    let segments = observability::rank_report(&ds, &rbf, cfg.command_window);
    for seg in &segments {
        writeln!(
            s,
            "segment {:?} {} {} rank_lin {} rank_ang {} min_sv_lin {} min_sv_ang {}",
            seg.regime,
            seg.first_frame,
            seg.last_frame,
            seg.rank_lin,
            seg.rank_ang,
            fmt_f(seg.min_sv_lin),
            fmt_f(seg.min_sv_ang)
        )
        .unwrap();
    }

    let (with, without) = observability::prior_identifiability_check(&ds, &cfg)?;
    for rep in [&with, &without] {
        writeln!(
            s,
            "identifiability prior={} singular_frames={} of {}",
            rep.with_prior,
            rep.singular_frames.len(),
            rep.frames.len()
        )
        .unwrap();
        for d in &rep.frames {
            writeln!(
                s,
                "eig prior={} frame {} lin {} {} ang {} {}",
                rep.with_prior,
                d.frame,
                fmt_f(d.min_eig_lin),
                fmt_f(d.max_eig_lin),
                fmt_f(d.min_eig_ang),
                fmt_f(d.max_eig_ang)
            )
            .unwrap();
        }
    }
    std::fs::write(out, &s).map_err(io_err(out))?;
    for seg in &segments {
        println!(
            "obscheck: frames {}..{} {:?}: rank lin {} ang {}",
            seg.first_frame, seg.last_frame, seg.regime, seg.rank_lin, seg.rank_ang
        );
    }
    println!(
        "obscheck: singular frames with prior: {} / without prior: {}",
        with.singular_frames.len(),
        without.singular_frames.len()
    );
    Ok(())
}
