//! Differential-drive simulator: command scripts through a low-level
//! controller model, planar ground truth lifted into SE(3), synthetic IMU
//! and stereo landmark observations, and dataset serialization.

pub mod controller;
pub mod dataset;
pub mod script;
pub mod synth;

pub use controller::{command_at, simulate_ground_truth, ControllerModel, SimError};
pub use dataset::{
    read_dataset, write_dataset, Dataset, DatasetError, DatasetMeta, FrameInfo, GtRecord,
    PoseRecord,
};
pub use script::{build_preset, from_segments, ScriptPreset, ScriptSegment};
pub use synth::{
    default_extrinsic, generate_landmarks, lift_plane_pose, lift_trajectory, project,
    synthesize_imu, synthesize_observations, Observation, PlanePoseSpec, SensorRig,
};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::Pose3;
use crate::preint::{ImuBias, ImuNoiseSpec};

fn default_kf_interval() -> u32 {
    4
}
fn default_landmark_count() -> usize {
    450
}
fn default_min_landmarks() -> usize {
    8
}
fn default_gravity() -> [f64; 3] {
    [0.0, 0.0, -9.81]
}
fn default_pixel_sigma() -> f64 {
    0.5
}
fn default_vibration_trans() -> f64 {
    0.002
}
fn default_vibration_rot() -> f64 {
    0.2
}
fn default_duration() -> f64 {
    30.0
}

/// Full simulator configuration; see the `[sim]` section of the config
/// file format.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub duration: f64,
    pub rig: SensorRig,
    pub controller: ControllerModel,
    pub imu_noise: ImuNoiseSpec,
    pub pixel_sigma: f64,
    pub vibration_trans_sigma: f64,
    pub vibration_rot_sigma_deg: f64,
    /// 1-sigma of the random initial IMU biases.
    pub init_bias_sigma_acc: f64,
    pub init_bias_sigma_gyro: f64,
    pub plane: PlanePoseSpec,
    pub landmark_count: usize,
    pub min_landmarks: usize,
    pub keyframe_interval: u32,
    pub script_preset: ScriptPreset,
    /// Used when `script_preset = "segments"`.
    pub script_segments: Vec<ScriptSegment>,
    /// Nominal extrinsic; `None` selects the default forward-camera mount.
    pub extr_cad: Option<PoseRecord>,
    /// 1-sigma of the true-vs-CAD extrinsic offset the estimator must
    /// calibrate away.
    pub extr_offset_trans_sigma: f64,
    pub extr_offset_rot_sigma_deg: f64,
    pub gravity: [f64; 3],
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration: default_duration(),
            rig: SensorRig::default(),
            controller: ControllerModel::identity(),
            imu_noise: ImuNoiseSpec::default(),
            pixel_sigma: default_pixel_sigma(),
            vibration_trans_sigma: default_vibration_trans(),
            vibration_rot_sigma_deg: default_vibration_rot(),
            init_bias_sigma_acc: 0.02,
            init_bias_sigma_gyro: 0.002,
            plane: PlanePoseSpec::default(),
            landmark_count: default_landmark_count(),
            min_landmarks: default_min_landmarks(),
            keyframe_interval: default_kf_interval(),
            script_preset: ScriptPreset::Varied,
            script_segments: Vec::new(),
            extr_cad: None,
            extr_offset_trans_sigma: 0.004,
            extr_offset_rot_sigma_deg: 0.4,
            gravity: default_gravity(),
        }
    }
}

impl SimConfig {
    /// A configuration with every noise source disabled and a pass-through
    /// controller.
    pub fn zero_noise() -> Self {
        Self {
            imu_noise: ImuNoiseSpec {
                accel_noise_density: 0.0,
                gyro_noise_density: 0.0,
                accel_bias_walk: 0.0,
                gyro_bias_walk: 0.0,
            },
            pixel_sigma: 0.0,
            vibration_trans_sigma: 0.0,
            vibration_rot_sigma_deg: 0.0,
            init_bias_sigma_acc: 0.0,
            init_bias_sigma_gyro: 0.0,
            extr_offset_trans_sigma: 0.0,
            extr_offset_rot_sigma_deg: 0.0,
            controller: ControllerModel::identity(),
            ..Self::default()
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn random_small_pose(rng: &mut ChaCha8Rng, sigma_t: f64, sigma_rot_rad: f64) -> Pose3 {
    let t = Vector3::new(normal(rng), normal(rng), normal(rng)) * sigma_t;
    let r = Vector3::new(normal(rng), normal(rng), normal(rng)) * sigma_rot_rad;
    Pose3::from_rotation_vector(&r, t)
}

/// Generate a complete dataset from the configuration and seed. Everything
/// is deterministic in (config, seed).
pub fn simulate_dataset(cfg: &SimConfig, seed: u64) -> Result<Dataset, SimError> {
    let script = match cfg.script_preset {
        ScriptPreset::Segments => from_segments(&cfg.script_segments, cfg.rig.control_rate),
        ref preset => build_preset(preset, cfg.duration, cfg.rig.control_rate, seed),
    };

    let grid_rate = cfg.rig.grid_rate();
    let dt = 1.0 / grid_rate as f64;
    let imu_period = 1.0 / cfg.rig.imu_rate as f64;
    // Extend past the end so the IMU difference stencil stays in range.
    let sim_duration = cfg.duration + 2.0 * imu_period;
    let gt2d = simulate_ground_truth(&script, &cfg.controller, dt, sim_duration)?;

    let plane_pose = cfg.plane.pose();
    let extr_cad = cfg
        .extr_cad
        .as_ref()
        .map(|p| p.pose())
        .unwrap_or_else(default_extrinsic);
    let mut extr_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x06_f00d);
    let extr_true = extr_cad.compose(&random_small_pose(
        &mut extr_rng,
        cfg.extr_offset_trans_sigma,
        cfg.extr_offset_rot_sigma_deg.to_radians(),
    ));

    let traj = lift_trajectory(&gt2d.poses, dt, &plane_pose, &extr_true);
    let gravity = Vector3::new(cfg.gravity[0], cfg.gravity[1], cfg.gravity[2]);

    let mut bias_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x05_b1a5);
    let init_bias = ImuBias {
        acc: Vector3::new(
            normal(&mut bias_rng),
            normal(&mut bias_rng),
            normal(&mut bias_rng),
        ) * cfg.init_bias_sigma_acc,
        gyro: Vector3::new(
            normal(&mut bias_rng),
            normal(&mut bias_rng),
            normal(&mut bias_rng),
        ) * cfg.init_bias_sigma_gyro,
    };
    let (imu, biases) = synthesize_imu(
        &traj,
        cfg.rig.imu_rate,
        cfg.duration,
        &cfg.imu_noise,
        &init_bias,
        &gravity,
        seed ^ 0x02_1337,
    );

    // Landmarks around the actually-driven footprint.
    let n_traj = (cfg.duration / dt).round() as usize;
    let landmarks = generate_landmarks(
        &gt2d.poses[..=n_traj],
        &plane_pose,
        cfg.landmark_count,
        seed ^ 0x01_cafe,
    );

    let n_frames = (cfg.duration * cfg.rig.image_rate as f64).floor() as usize + 1;
    let grid_per_frame = grid_rate / cfg.rig.image_rate;
    let frames: Vec<FrameInfo> = (0..n_frames as u64)
        .map(|id| FrameInfo {
            t: id as f64 / cfg.rig.image_rate as f64,
            id,
            keyframe: id % cfg.keyframe_interval as u64 == 0,
        })
        .collect();

    // Vibration: per-frame perturbation of the sensor pose seen by the
    // cameras; the IMU follows the smooth trajectory.
    let mut vib_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x04_beef);
    let frame_poses: Vec<(u64, Pose3)> = frames
        .iter()
        .map(|f| {
            let base = traj.poses[f.id as usize * grid_per_frame as usize];
            let pose = if cfg.vibration_trans_sigma > 0.0 || cfg.vibration_rot_sigma_deg > 0.0 {
                base.compose(&random_small_pose(
                    &mut vib_rng,
                    cfg.vibration_trans_sigma,
                    cfg.vibration_rot_sigma_deg.to_radians(),
                ))
            } else {
                base
            };
            (f.id, pose)
        })
        .collect();

    let (obs, low_visibility_frames) = synthesize_observations(
        &frame_poses,
        &landmarks,
        &cfg.rig,
        cfg.pixel_sigma,
        cfg.min_landmarks,
        seed ^ 0x03_0b5e,
    );

    // Ground truth at the common rate of all three streams.
    let gt_rate = grid_rate / ((grid_rate as f64 / 1000.0).ceil() as u32).max(1);
    let gt_stride = (grid_rate / gt_rate) as usize;
    let n_gt = (cfg.duration * gt_rate as f64).round() as usize;
    let groundtruth: Vec<GtRecord> = (0..=n_gt)
        .map(|k| {
            let idx = k * gt_stride;
            let t = k as f64 / gt_rate as f64;
            let bias_idx = ((t * cfg.rig.imu_rate as f64).floor() as usize).min(biases.len() - 1);
            GtRecord {
                t,
                pose: traj.poses[idx],
                twist: gt2d.twists[idx.min(gt2d.twists.len() - 1)],
                bias: biases[bias_idx],
            }
        })
        .collect();

    Ok(Dataset {
        meta: DatasetMeta {
            seed,
            duration: cfg.duration,
            gravity: cfg.gravity,
            rig: cfg.rig.clone(),
            controller: cfg.controller,
            imu_noise: cfg.imu_noise,
            pixel_sigma: cfg.pixel_sigma,
            vibration_trans_sigma: cfg.vibration_trans_sigma,
            vibration_rot_sigma_deg: cfg.vibration_rot_sigma_deg,
            plane: cfg.plane,
            extr_cad: PoseRecord::from_pose(&extr_cad),
            extr_true: PoseRecord::from_pose(&extr_true),
            low_visibility_frames,
        },
        commands: script,
        imu,
        frames,
        obs,
        groundtruth,
        landmarks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se2;

    #[test]
    fn zero_noise_dataset_is_exactly_consistent() {
        let mut cfg = SimConfig::zero_noise();
        cfg.duration = 5.0;
        cfg.script_preset = ScriptPreset::Smooth;
        let ds = simulate_dataset(&cfg, 3).unwrap();

        // Integrate the stored executed twists and compare with the stored
        // sensor poses through plane and extrinsic.
        let plane = ds.meta.plane.pose();
        let extr = ds.meta.extr_true.pose();
        let gt_dt = ds.groundtruth[1].t - ds.groundtruth[0].t;
        let grid_rate = ds.meta.rig.grid_rate();
        let grid_dt = 1.0 / grid_rate as f64;
        let steps = (gt_dt / grid_dt).round() as usize;
        // Twists are piecewise constant per gt record here only if the
        // record rate matches the grid rate; re-simulate on the gt grid by
        // stepping each stored twist over its record interval.
        let mut p2 = crate::geometry::Pose2::identity();
        for k in 0..ds.groundtruth.len() - 1 {
            // Within one gt interval the twist can change on the finer
            // grid; with identity controller it changes only at command
            // times (multiples of the gt rate), so one step is exact.
            let tw = ds.groundtruth[k].twist;
            for _ in 0..steps {
                p2 = p2.compose(&se2::exp(&tw, grid_dt));
            }
            let rebuilt = plane.compose(&lift_plane_pose(&p2)).compose(&extr);
            let stored = ds.groundtruth[k + 1].pose;
            assert!(
                (rebuilt.trans - stored.trans).norm() < 1e-9,
                "k={k} err={}",
                (rebuilt.trans - stored.trans).norm()
            );
        }
    }

    #[test]
    fn same_seed_gives_identical_datasets() {
        let mut cfg = SimConfig::default();
        cfg.duration = 3.0;
        let a = simulate_dataset(&cfg, 11).unwrap();
        let b = simulate_dataset(&cfg, 11).unwrap();
        assert_eq!(a.imu, b.imu);
        assert_eq!(a.obs, b.obs);
        assert_eq!(a.commands, b.commands);
        assert_eq!(a.groundtruth.len(), b.groundtruth.len());
        for (x, y) in a.groundtruth.iter().zip(&b.groundtruth) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn landmark_visibility_meets_target() {
        let mut cfg = SimConfig::default();
        cfg.duration = 5.0;
        cfg.script_preset = ScriptPreset::Varied;
        let ds = simulate_dataset(&cfg, 5).unwrap();
        // Average left-camera landmark count per frame should be healthy.
        let mut counts = std::collections::BTreeMap::new();
        for o in ds.obs.iter().filter(|o| o.cam == 0) {
            *counts.entry(o.frame).or_insert(0usize) += 1;
        }
        let avg = counts.values().sum::<usize>() as f64 / counts.len().max(1) as f64;
        assert!(avg >= 30.0, "average visible landmarks {avg}");
        assert!(ds.meta.low_visibility_frames.is_empty());
    }

    #[test]
    fn dataset_round_trip() {
        let mut cfg = SimConfig::default();
        cfg.duration = 2.0;
        let ds = simulate_dataset(&cfg, 17).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(ds.commands, back.commands);
        assert_eq!(ds.imu, back.imu);
        assert_eq!(ds.frames, back.frames);
        assert_eq!(ds.obs, back.obs);
        assert_eq!(ds.groundtruth, back.groundtruth);
        assert_eq!(ds.landmarks, back.landmarks);
        assert_eq!(ds.meta.seed, back.meta.seed);
        assert_eq!(
            ds.meta.extr_true.pose().trans,
            back.meta.extr_true.pose().trans
        );
    }

    #[test]
    fn unknown_tag_is_reported_by_name() {
        let mut cfg = SimConfig::default();
        cfg.duration = 1.0;
        let ds = simulate_dataset(&cfg, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        std::fs::write(dir.path().join("imu"), "bogus 1 2 3\n").unwrap();
        let err = read_dataset(dir.path()).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bogus"), "{msg}");
    }

    #[test]
    fn empty_command_stream_is_a_valid_dataset() {
        let mut cfg = SimConfig::zero_noise();
        cfg.duration = 2.0;
        cfg.script_preset = ScriptPreset::Segments;
        cfg.script_segments = Vec::new();
        let ds = simulate_dataset(&cfg, 1).unwrap();
        assert!(ds.commands.is_empty());
        assert!(!ds.frames.is_empty());
        let dir = tempfile::tempdir().unwrap();
        write_dataset(dir.path(), &ds).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert!(back.commands.is_empty());
    }
}
