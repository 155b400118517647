//! On-disk dataset format: a directory of line-delimited record files
//! plus a key-value `meta` file. Floats are written with 17 significant
//! digits so a read-back is lossless.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Pose3, Twist2};
use crate::motion::ControlCommand;
use crate::preint::{ImuBias, ImuNoiseSpec, ImuSample};

use super::controller::ControllerModel;
use super::synth::{Observation, PlanePoseSpec, SensorRig};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{file}:{line}: unknown record tag `{tag}`")]
    UnknownTag {
        file: String,
        line: usize,
        tag: String,
    },
    #[error("{file}:{line}: malformed record: {reason}")]
    Malformed {
        file: String,
        line: usize,
        reason: String,
    },
    #[error("meta file error: {0}")]
    Meta(String),
}

/// Serializable pose record (translation + wxyz quaternion).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl PoseRecord {
    pub fn from_pose(p: &Pose3) -> Self {
        let q = p.rot.quaternion();
        Self {
            t: [p.trans.x, p.trans.y, p.trans.z],
            q: [q.w, q.i, q.j, q.k],
        }
    }

    pub fn pose(&self) -> Pose3 {
        // The stored quaternion is unit to full precision; skip the
        // renormalization so a read-back is bit-identical.
        Pose3::new(
            UnitQuaternion::new_unchecked(Quaternion::new(
                self.q[0], self.q[1], self.q[2], self.q[3],
            )),
            Vector3::new(self.t[0], self.t[1], self.t[2]),
        )
    }
}

/// Everything the estimator may legitimately know about the rig and the
/// simulation configuration, plus bookkeeping for evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub seed: u64,
    pub duration: f64,
    pub gravity: [f64; 3],
    pub rig: SensorRig,
    pub controller: ControllerModel,
    pub imu_noise: ImuNoiseSpec,
    pub pixel_sigma: f64,
    pub vibration_trans_sigma: f64,
    pub vibration_rot_sigma_deg: f64,
    pub plane: PlanePoseSpec,
    /// Nominal (CAD) sensor-in-base extrinsic the estimator initializes from.
    pub extr_cad: PoseRecord,
    /// True extrinsic used by the simulator.
    pub extr_true: PoseRecord,
    pub low_visibility_frames: Vec<u64>,
}

impl DatasetMeta {
    pub fn gravity_vector(&self) -> Vector3<f64> {
        Vector3::new(self.gravity[0], self.gravity[1], self.gravity[2])
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameInfo {
    pub t: f64,
    pub id: u64,
    pub keyframe: bool,
}

/// Dense ground-truth record: sensor pose, executed base twist, IMU bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtRecord {
    pub t: f64,
    pub pose: Pose3,
    pub twist: Twist2,
    pub bias: ImuBias,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub commands: Vec<ControlCommand>,
    pub imu: Vec<ImuSample>,
    pub frames: Vec<FrameInfo>,
    pub obs: Vec<Observation>,
    pub groundtruth: Vec<GtRecord>,
    pub landmarks: Vec<(u64, Vector3<f64>)>,
}

impl Dataset {
    /// Ground-truth record at time `t` (records are on a fixed grid; exact
    /// match within 1e-9, otherwise the nearest earlier record).
    pub fn gt_at(&self, t: f64) -> Option<&GtRecord> {
        if self.groundtruth.is_empty() {
            return None;
        }
        let idx = self.groundtruth.partition_point(|g| g.t <= t + 1e-9);
        if idx == 0 {
            None
        } else {
            Some(&self.groundtruth[idx - 1])
        }
    }

    pub fn obs_for_frame(&self, frame: u64) -> impl Iterator<Item = &Observation> {
        // Observations are stored sorted by frame id.
        let start = self.obs.partition_point(|o| o.frame < frame);
        self.obs[start..]
            .iter()
            .take_while(move |o| o.frame == frame)
    }
}

fn fmt_f(x: f64) -> String {
    format!("{x:.17e}")
}

fn write_file(path: &Path, content: &str) -> Result<(), DatasetError> {
    let mut f = std::fs::File::create(path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    f.write_all(content.as_bytes())
        .map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })
}

/// Write a dataset directory.
pub fn write_dataset(dir: &Path, ds: &Dataset) -> Result<(), DatasetError> {
    std::fs::create_dir_all(dir).map_err(|source| DatasetError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let meta =
        toml::to_string_pretty(&ds.meta).map_err(|e| DatasetError::Meta(e.to_string()))?;
    write_file(&dir.join("meta"), &meta)?;

    let mut s = String::new();
    for c in &ds.commands {
        writeln!(s, "cmd {} {} {}", fmt_f(c.t), fmt_f(c.v), fmt_f(c.omega)).unwrap();
    }
    write_file(&dir.join("commands"), &s)?;

    let mut s = String::new();
    for m in &ds.imu {
        writeln!(
            s,
            "imu {} {} {} {} {} {} {}",
            fmt_f(m.t),
            fmt_f(m.accel.x),
            fmt_f(m.accel.y),
            fmt_f(m.accel.z),
            fmt_f(m.gyro.x),
            fmt_f(m.gyro.y),
            fmt_f(m.gyro.z)
        )
        .unwrap();
    }
    write_file(&dir.join("imu"), &s)?;

    let mut s = String::new();
    for f in &ds.frames {
        writeln!(s, "frame {} {} {}", fmt_f(f.t), f.id, u8::from(f.keyframe)).unwrap();
    }
    write_file(&dir.join("frames"), &s)?;

    let mut s = String::new();
    for o in &ds.obs {
        writeln!(
            s,
            "obs {} {} {} {} {}",
            o.frame,
            o.landmark,
            o.cam,
            fmt_f(o.px.x),
            fmt_f(o.px.y)
        )
        .unwrap();
    }
    write_file(&dir.join("obs"), &s)?;

    let mut s = String::new();
    for g in &ds.groundtruth {
        let q = g.pose.rot.quaternion();
        writeln!(
            s,
            "gt {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            fmt_f(g.t),
            fmt_f(g.pose.trans.x),
            fmt_f(g.pose.trans.y),
            fmt_f(g.pose.trans.z),
            fmt_f(q.w),
            fmt_f(q.i),
            fmt_f(q.j),
            fmt_f(q.k),
            fmt_f(g.twist.v),
            fmt_f(g.twist.omega),
            fmt_f(g.bias.acc.x),
            fmt_f(g.bias.acc.y),
            fmt_f(g.bias.acc.z),
            fmt_f(g.bias.gyro.x),
            fmt_f(g.bias.gyro.y),
            fmt_f(g.bias.gyro.z)
        )
        .unwrap();
    }
    write_file(&dir.join("groundtruth"), &s)?;

    let mut s = String::new();
    for (id, p) in &ds.landmarks {
        writeln!(s, "lmk {} {} {} {}", id, fmt_f(p.x), fmt_f(p.y), fmt_f(p.z)).unwrap();
    }
    write_file(&dir.join("landmarks"), &s)?;
    Ok(())
}

struct LineParser<'a> {
    file: &'a str,
    line: usize,
    fields: Vec<&'a str>,
    cursor: usize,
}

impl<'a> LineParser<'a> {
    fn f64(&mut self) -> Result<f64, DatasetError> {
        let raw = self.next_raw()?;
        raw.parse().map_err(|_| DatasetError::Malformed {
            file: self.file.to_string(),
            line: self.line,
            reason: format!("expected float, got `{raw}`"),
        })
    }

    fn int<T: std::str::FromStr>(&mut self) -> Result<T, DatasetError> {
        let raw = self.next_raw()?;
        raw.parse().map_err(|_| DatasetError::Malformed {
            file: self.file.to_string(),
            line: self.line,
            reason: format!("expected integer, got `{raw}`"),
        })
    }

    fn next_raw(&mut self) -> Result<&'a str, DatasetError> {
        let v = self
            .fields
            .get(self.cursor)
            .ok_or_else(|| DatasetError::Malformed {
                file: self.file.to_string(),
                line: self.line,
                reason: "missing field".into(),
            })?;
        self.cursor += 1;
        Ok(v)
    }

    fn done(&self) -> Result<(), DatasetError> {
        if self.cursor == self.fields.len() {
            Ok(())
        } else {
            Err(DatasetError::Malformed {
                file: self.file.to_string(),
                line: self.line,
                reason: "trailing fields".into(),
            })
        }
    }
}

fn for_each_record(
    dir: &Path,
    name: &str,
    expected_tag: &str,
    mut f: impl FnMut(&mut LineParser) -> Result<(), DatasetError>,
) -> Result<(), DatasetError> {
    let path = dir.join(name);
    let file = std::fs::File::open(&path).map_err(|source| DatasetError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let reader = BufReader::new(file);
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| DatasetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] != expected_tag {
            return Err(DatasetError::UnknownTag {
                file: name.to_string(),
                line: idx + 1,
                tag: fields[0].to_string(),
            });
        }
        let mut parser = LineParser {
            file: name,
            line: idx + 1,
            fields,
            cursor: 1,
        };
        f(&mut parser)?;
        parser.done()?;
    }
    Ok(())
}

/// Read a dataset directory back.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DatasetError> {
    let meta_path = dir.join("meta");
    let meta_raw = std::fs::read_to_string(&meta_path).map_err(|source| DatasetError::Io {
        path: meta_path.display().to_string(),
        source,
    })?;
    let meta: DatasetMeta =
        toml::from_str(&meta_raw).map_err(|e| DatasetError::Meta(e.to_string()))?;

    let mut commands = Vec::new();
    for_each_record(dir, "commands", "cmd", |p| {
        commands.push(ControlCommand {
            t: p.f64()?,
            v: p.f64()?,
            omega: p.f64()?,
        });
        Ok(())
    })?;

    let mut imu = Vec::new();
    for_each_record(dir, "imu", "imu", |p| {
        imu.push(ImuSample {
            t: p.f64()?,
            accel: Vector3::new(p.f64()?, p.f64()?, p.f64()?),
            gyro: Vector3::new(p.f64()?, p.f64()?, p.f64()?),
        });
        Ok(())
    })?;

    let mut frames = Vec::new();
    for_each_record(dir, "frames", "frame", |p| {
        frames.push(FrameInfo {
            t: p.f64()?,
            id: p.int()?,
            keyframe: p.int::<u8>()? != 0,
        });
        Ok(())
    })?;

    let mut obs = Vec::new();
    for_each_record(dir, "obs", "obs", |p| {
        obs.push(Observation {
            frame: p.int()?,
            landmark: p.int()?,
            cam: p.int()?,
            px: Vector2::new(p.f64()?, p.f64()?),
        });
        Ok(())
    })?;

    let mut groundtruth = Vec::new();
    for_each_record(dir, "groundtruth", "gt", |p| {
        let t = p.f64()?;
        let trans = Vector3::new(p.f64()?, p.f64()?, p.f64()?);
        let q = Quaternion::new(p.f64()?, p.f64()?, p.f64()?, p.f64()?);
        let twist = Twist2::new(p.f64()?, p.f64()?);
        let bias = ImuBias {
            acc: Vector3::new(p.f64()?, p.f64()?, p.f64()?),
            gyro: Vector3::new(p.f64()?, p.f64()?, p.f64()?),
        };
        groundtruth.push(GtRecord {
            t,
            pose: Pose3::new(UnitQuaternion::new_unchecked(q), trans),
            twist,
            bias,
        });
        Ok(())
    })?;

    let mut landmarks = Vec::new();
    for_each_record(dir, "landmarks", "lmk", |p| {
        landmarks.push((p.int()?, Vector3::new(p.f64()?, p.f64()?, p.f64()?)));
        Ok(())
    })?;

    Ok(Dataset {
        meta,
        commands,
        imu,
        frames,
        obs,
        groundtruth,
        landmarks,
    })
}
