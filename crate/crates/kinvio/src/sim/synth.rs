//! Lifting the planar ground truth into SE(3) and synthesizing IMU
//! samples and stereo landmark observations from it.

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::geometry::{so3, Pose2, Pose3};
use crate::preint::{ImuBias, ImuNoiseSpec, ImuSample};

/// Camera/IMU rig description. The sensor frame is the left camera frame
/// (z forward, x right, y down) and also the IMU frame; the right camera
/// sits `baseline` meters along +x.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensorRig {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    pub baseline: f64,
    pub image_rate: u32,
    pub imu_rate: u32,
    pub control_rate: u32,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self {
            fx: 285.0,
            fy: 285.0,
            cx: 320.0,
            cy: 240.0,
            width: 640,
            height: 480,
            baseline: 0.064,
            image_rate: 30,
            imu_rate: 200,
            control_rate: 15,
        }
    }
}

impl SensorRig {
    /// Grid rate: smallest common multiple of the three data rates that
    /// keeps the integration step at or below 1 ms.
    pub fn grid_rate(&self) -> u32 {
        fn gcd(a: u64, b: u64) -> u64 {
            if b == 0 {
                a
            } else {
                gcd(b, a % b)
            }
        }
        fn lcm(a: u64, b: u64) -> u64 {
            a / gcd(a, b) * b
        }
        let base = lcm(
            self.image_rate as u64,
            lcm(self.imu_rate as u64, self.control_rate as u64),
        );
        let mult = (1000 + base - 1) / base;
        (base * mult.max(1)) as u32
    }
}

/// Static pose of the ground plane in the world frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PlanePoseSpec {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub height: f64,
}

impl Default for PlanePoseSpec {
    fn default() -> Self {
        Self {
            roll_deg: 0.0,
            pitch_deg: 0.0,
            height: 0.0,
        }
    }
}

impl PlanePoseSpec {
    pub fn pose(&self) -> Pose3 {
        let roll = self.roll_deg.to_radians();
        let pitch = self.pitch_deg.to_radians();
        let rot = so3::exp(&Vector3::new(roll, 0.0, 0.0))
            * so3::exp(&Vector3::new(0.0, pitch, 0.0));
        Pose3::new(rot, Vector3::new(0.0, 0.0, self.height))
    }
}

/// Embed a planar base pose into the plane frame.
pub fn lift_plane_pose(p: &Pose2) -> Pose3 {
    Pose3::new(
        UnitQuaternion::from_axis_angle(&Vector3::z_axis(), p.angle),
        Vector3::new(p.trans.x, p.trans.y, 0.0),
    )
}

/// Default camera-forward mount: sensor z (optical axis) along base x,
/// sensor x along base -y, sensor y along base -z, raised 0.3 m and 0.1 m
/// ahead of the base origin.
pub fn default_extrinsic() -> Pose3 {
    let rot = nalgebra::Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    );
    Pose3::new(
        UnitQuaternion::from_rotation_matrix(&nalgebra::Rotation3::from_matrix_unchecked(rot)),
        Vector3::new(0.1, 0.0, 0.3),
    )
}

/// Sensor trajectory on the dense grid.
pub struct SensorTrajectory {
    pub dt: f64,
    pub poses: Vec<Pose3>,
}

/// Lift the planar ground truth through the plane pose and extrinsic:
/// `T_i^w(t) = T_plane * lift(P(t)) * T_i^b`.
pub fn lift_trajectory(poses2: &[Pose2], dt: f64, plane: &Pose3, extr: &Pose3) -> SensorTrajectory {
    SensorTrajectory {
        dt,
        poses: poses2
            .iter()
            .map(|p| plane.compose(&lift_plane_pose(p)).compose(extr))
            .collect(),
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Synthesize IMU samples from the dense sensor trajectory by centered
/// differences with a stencil of one IMU period. The robot is treated as
/// at rest before t = 0 (static start), and the trajectory must extend at
/// least one stencil beyond the last sample time.
pub fn synthesize_imu(
    traj: &SensorTrajectory,
    imu_rate: u32,
    duration: f64,
    noise: &ImuNoiseSpec,
    init_bias: &ImuBias,
    gravity: &Vector3<f64>,
    seed: u64,
) -> (Vec<ImuSample>, Vec<ImuBias>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid_per_imu = ((1.0 / imu_rate as f64) / traj.dt).round() as usize;
    let big_dt = grid_per_imu as f64 * traj.dt;
    let n_samples = (duration * imu_rate as f64).round() as usize;
    let sqrt_rate = (imu_rate as f64).sqrt();
    let sqrt_dt = (1.0 / imu_rate as f64).sqrt();

    let mut samples = Vec::with_capacity(n_samples + 1);
    let mut biases = Vec::with_capacity(n_samples + 1);
    let mut bias = *init_bias;
    for k in 0..=n_samples {
        let idx = k * grid_per_imu;
        let pose = |i: isize| -> &Pose3 {
            // At rest before the start.
            let i = i.max(0) as usize;
            &traj.poses[i.min(traj.poses.len() - 1)]
        };
        let p0 = pose(idx as isize);
        let pm = pose(idx as isize - grid_per_imu as isize);
        let pp = pose(idx as isize + grid_per_imu as isize);
        let a_world = (pp.trans - 2.0 * p0.trans + pm.trans) / (big_dt * big_dt);
        let w_body = so3::log(&(pm.rot.inverse() * pp.rot)) / (2.0 * big_dt);
        let r0t = p0.rot.inverse();

        let accel_noise = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng))
            * (noise.accel_noise_density * sqrt_rate);
        let gyro_noise = Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng))
            * (noise.gyro_noise_density * sqrt_rate);

        samples.push(ImuSample {
            t: k as f64 / imu_rate as f64,
            accel: r0t * (a_world - gravity) + bias.acc + accel_noise,
            gyro: w_body + bias.gyro + gyro_noise,
        });
        biases.push(bias);

        bias.acc += Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng))
            * (noise.accel_bias_walk * sqrt_dt);
        bias.gyro += Vector3::new(normal(&mut rng), normal(&mut rng), normal(&mut rng))
            * (noise.gyro_bias_walk * sqrt_dt);
    }
    (samples, biases)
}

/// One stereo keypoint measurement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub frame: u64,
    pub landmark: u64,
    /// 0 = left, 1 = right.
    pub cam: u8,
    pub px: Vector2<f64>,
}

/// Project a point in the sensor (left camera) frame into a camera.
/// Returns `None` when behind the camera or out of bounds.
pub fn project(rig: &SensorRig, p_sensor: &Vector3<f64>, cam: u8) -> Option<Vector2<f64>> {
    let p = if cam == 0 {
        *p_sensor
    } else {
        p_sensor - Vector3::new(rig.baseline, 0.0, 0.0)
    };
    if p.z < 0.2 {
        return None;
    }
    let u = rig.fx * p.x / p.z + rig.cx;
    let v = rig.fy * p.y / p.z + rig.cy;
    if u < 0.0 || u > rig.width as f64 || v < 0.0 || v > rig.height as f64 {
        return None;
    }
    Some(Vector2::new(u, v))
}

/// Generate per-frame stereo observations of the landmark field with
/// Gaussian pixel noise. `sensor_poses` are the (possibly vibrating)
/// sensor poses at the frame times. Returns the observations and the ids
/// of frames seeing fewer than `min_landmarks` landmarks in the left
/// camera.
pub fn synthesize_observations(
    sensor_poses: &[(u64, Pose3)],
    landmarks: &[(u64, Vector3<f64>)],
    rig: &SensorRig,
    pixel_sigma: f64,
    min_landmarks: usize,
    seed: u64,
) -> (Vec<Observation>, Vec<u64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut obs = Vec::new();
    let mut low_visibility = Vec::new();
    for (frame, pose) in sensor_poses {
        let inv = pose.inverse();
        let mut seen = 0usize;
        for (lid, p_w) in landmarks {
            let p_s = inv.transform_point(p_w);
            for cam in 0..2u8 {
                if let Some(mut px) = project(rig, &p_s, cam) {
                    if pixel_sigma > 0.0 {
                        px += Vector2::new(normal(&mut rng), normal(&mut rng)) * pixel_sigma;
                    }
                    obs.push(Observation {
                        frame: *frame,
                        landmark: *lid,
                        cam,
                        px,
                    });
                    if cam == 0 {
                        seen += 1;
                    }
                }
            }
        }
        if seen < min_landmarks {
            low_visibility.push(*frame);
        }
    }
    (obs, low_visibility)
}

/// Uniform landmark field in a box around the trajectory footprint.
pub fn generate_landmarks(
    poses2: &[Pose2],
    plane: &Pose3,
    count: usize,
    seed: u64,
) -> Vec<(u64, Vector3<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut min_x, mut max_x, mut min_y, mut max_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in poses2 {
        min_x = min_x.min(p.trans.x);
        max_x = max_x.max(p.trans.x);
        min_y = min_y.min(p.trans.y);
        max_y = max_y.max(p.trans.y);
    }
    let margin = 4.0;
    (0..count as u64)
        .map(|id| {
            let local = Vector3::new(
                rng.gen_range(min_x - margin..max_x + margin),
                rng.gen_range(min_y - margin..max_y + margin),
                rng.gen_range(0.05..2.8),
            );
            (id, plane.transform_point(&local))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::se2;
    use crate::geometry::Twist2;
    use crate::preint;
    use approx::assert_relative_eq;

    #[test]
    fn grid_rate_covers_all_streams() {
        let rig = SensorRig::default();
        let g = rig.grid_rate();
        assert_eq!(g, 1200);
        assert_eq!(g % rig.image_rate, 0);
        assert_eq!(g % rig.imu_rate, 0);
        assert_eq!(g % rig.control_rate, 0);
    }

    #[test]
    fn stationary_imu_reads_gravity() {
        let traj = SensorTrajectory {
            dt: 1e-3,
            poses: vec![default_extrinsic(); 3000],
        };
        let g = Vector3::new(0.0, 0.0, -9.81);
        let (samples, _) = synthesize_imu(
            &traj,
            200,
            1.0,
            &ImuNoiseSpec {
                accel_noise_density: 0.0,
                gyro_noise_density: 0.0,
                accel_bias_walk: 0.0,
                gyro_bias_walk: 0.0,
            },
            &ImuBias::zero(),
            &g,
            5,
        );
        let r = default_extrinsic().rotation_matrix();
        let expect = -(r.transpose() * g);
        for s in &samples {
            assert!((s.accel - expect).norm() < 1e-9);
            assert!(s.gyro.norm() < 1e-12);
            assert_relative_eq!(s.accel.norm(), 9.81, epsilon = 1e-9);
        }
    }

    #[test]
    fn circular_motion_centripetal_accel() {
        // v = 0.3 m/s, omega = 0.5 rad/s: lateral accel v*omega = 0.15.
        let dt = 1e-3;
        let n = 8000;
        let twist = Twist2::new(0.3, 0.5);
        let mut poses2 = vec![Pose2::identity()];
        for _ in 0..n {
            let last = *poses2.last().unwrap();
            poses2.push(last.compose(&se2::exp(&twist, dt)));
        }
        // Identity extrinsic: sensor frame = base frame.
        let traj = lift_trajectory(&poses2, dt, &Pose3::identity(), &Pose3::identity());
        let g = Vector3::new(0.0, 0.0, -9.81);
        let (samples, _) = synthesize_imu(
            &traj,
            200,
            6.0,
            &ImuNoiseSpec {
                accel_noise_density: 0.0,
                gyro_noise_density: 0.0,
                accel_bias_walk: 0.0,
                gyro_bias_walk: 0.0,
            },
            &ImuBias::zero(),
            &g,
            5,
        );
        // Skip the startup transient (velocity steps from rest at t=0).
        for s in samples.iter().skip(200).take(800) {
            assert_relative_eq!(s.accel.y, 0.15, epsilon = 1e-6);
            assert_relative_eq!(s.gyro.z, 0.5, epsilon = 1e-9);
            assert_relative_eq!(s.accel.z, 9.81, epsilon = 1e-9);
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let traj = SensorTrajectory {
            dt: 1e-3,
            poses: vec![Pose3::identity(); 2000],
        };
        let g = Vector3::new(0.0, 0.0, -9.81);
        let run = || {
            synthesize_imu(
                &traj,
                200,
                0.5,
                &ImuNoiseSpec::default(),
                &ImuBias::zero(),
                &g,
                99,
            )
        };
        let (a, ba) = run();
        let (b, bb) = run();
        assert_eq!(a, b);
        assert!(ba
            .iter()
            .zip(&bb)
            .all(|(x, y)| x.acc == y.acc && x.gyro == y.gyro));
    }

    #[test]
    fn double_integration_tracks_ground_truth() {
        // Zero-noise IMU integrated frame to frame must reproduce the true
        // positions to < 1e-3 m over 10 s at 200 Hz.
        let script: Vec<crate::motion::ControlCommand> = (0..150)
            .map(|k| {
                let t = k as f64 / 15.0;
                crate::motion::ControlCommand {
                    t,
                    v: 0.3 * (1.0 - (-t).exp()),
                    omega: 0.4 * (0.5 * t).sin(),
                }
            })
            .collect();
        let ctrl = super::super::controller::ControllerModel {
            accel_limit_lin: 1.0,
            accel_limit_ang: 2.0,
            lag_time_constant: 0.05,
            ..super::super::controller::ControllerModel::identity()
        };
        let dt = 1.0 / 1200.0;
        let dur = 10.0;
        let gt =
            super::super::controller::simulate_ground_truth(&script, &ctrl, dt, dur + 0.1).unwrap();
        let extr = default_extrinsic();
        let traj = lift_trajectory(&gt.poses, dt, &Pose3::identity(), &extr);
        let g = Vector3::new(0.0, 0.0, -9.81);
        let (samples, _) = synthesize_imu(
            &traj,
            200,
            dur,
            &ImuNoiseSpec {
                accel_noise_density: 0.0,
                gyro_noise_density: 0.0,
                accel_bias_walk: 0.0,
                gyro_bias_walk: 0.0,
            },
            &ImuBias::zero(),
            &g,
            1,
        );
        // Chain per-frame (30 Hz) preintegrations.
        let mut state = preint::NavState {
            pose: traj.poses[0],
            vel: Vector3::zeros(),
        };
        let frames = (dur * 30.0).round() as usize;
        for f in 0..frames {
            let (t0, t1) = (f as f64 / 30.0, (f + 1) as f64 / 30.0);
            let chunk = preint::slice_interpolated(&samples, t0, t1).unwrap();
            let pre = preint::integrate(&chunk, &ImuBias::zero(), &ImuNoiseSpec::default()).unwrap();
            state = pre.predict(&state, &ImuBias::zero(), &g);
        }
        let idx = (dur / dt).round() as usize;
        let err = (state.pose.trans - traj.poses[idx].trans).norm();
        assert!(err < 1e-3, "drift {err}");
    }

    #[test]
    fn projection_oracles() {
        let rig = SensorRig {
            fx: 300.0,
            fy: 300.0,
            cx: 320.0,
            cy: 240.0,
            ..SensorRig::default()
        };
        // On the optical axis: principal point.
        let px = project(&rig, &Vector3::new(0.0, 0.0, 2.0), 0).unwrap();
        assert_eq!(px, Vector2::new(320.0, 240.0));
        // u = f x / z + cx = 300 / 4 + 320 = 395.
        let px = project(&rig, &Vector3::new(1.0, 0.0, 4.0), 0).unwrap();
        assert_eq!(px, Vector2::new(395.0, 240.0));
        // Stereo disparity f b / z.
        let p = Vector3::new(0.3, -0.1, 2.5);
        let l = project(&rig, &p, 0).unwrap();
        let r = project(&rig, &p, 1).unwrap();
        assert_relative_eq!(l.x - r.x, rig.fx * rig.baseline / p.z, epsilon = 1e-12);
        assert_eq!(l.y, r.y);
        // Behind the camera.
        assert!(project(&rig, &Vector3::new(0.0, 0.0, -1.0), 0).is_none());
    }
}
