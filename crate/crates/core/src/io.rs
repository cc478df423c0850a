//! Dataset bundle files. Timestamps on disk are integer nanoseconds, floats
//! use Rust's shortest round-trip formatting, so write then read is lossless.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector2;
use serde::{Deserialize, Serialize};

use crate::config::SimSection;
use crate::error::{Error, Result};
use crate::evaluation::TrajectoryFile;
use crate::geometry::{quat_coeffs, quat_from_xyzw, Extrinsics, Quat, TimeBase, Vec3};
use crate::initializer::{VisionNoise, VisionPoseSet};
use crate::pipeline::{Dataset, DatasetFrame, OffsetTruth};
use crate::preintegration::ImuSample;

pub const IMU_FILE: &str = "imu.csv";
pub const FRAMES_FILE: &str = "frames.csv";
pub const TRACKS_FILE: &str = "tracks.csv";
pub const GROUNDTRUTH_FILE: &str = "groundtruth.txt";
pub const OFFSETS_TRUTH_FILE: &str = "offsets_truth.csv";
pub const VISION_POSES_FILE: &str = "vision_poses.csv";
pub const META_FILE: &str = "meta.toml";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtrinsicsMeta {
    /// `[x, y, z, w]`
    pub rotation: [f64; 4],
    pub translation: [f64; 3],
}

impl From<&Extrinsics> for ExtrinsicsMeta {
    fn from(e: &Extrinsics) -> Self {
        let q = quat_coeffs(&e.rotation);
        Self {
            rotation: [q[0], q[1], q[2], q[3]],
            translation: [e.translation.x, e.translation.y, e.translation.z],
        }
    }
}

impl ExtrinsicsMeta {
    pub fn to_extrinsics(&self) -> Extrinsics {
        let [x, y, z, w] = self.rotation;
        let [tx, ty, tz] = self.translation;
        Extrinsics {
            rotation: quat_from_xyzw(x, y, z, w),
            translation: Vec3::new(tx, ty, tz),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionMeta {
    pub sigma_rot: f64,
    pub sigma_pos: f64,
}

/// Bundle metadata; everything except the extrinsics is optional.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleMeta {
    /// Nanosecond stamp mapped to t = 0 s; defaults to the first IMU stamp.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub time_origin_ns: Option<i64>,
    pub extrinsics: ExtrinsicsMeta,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vision: Option<VisionMeta>,
    /// Simulation settings that produced the bundle.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sim: Option<SimSection>,
}

impl BundleMeta {
    pub fn vision_noise(&self) -> Option<VisionNoise> {
        self.vision.map(|v| VisionNoise {
            sigma_rot: v.sigma_rot,
            sigma_pos: v.sigma_pos,
        })
    }
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Non-empty, non-comment lines with 1-based line numbers.
fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

struct Row<'a> {
    path: &'a Path,
    line: usize,
    fields: Vec<&'a str>,
}

impl<'a> Row<'a> {
    fn split(path: &'a Path, line: usize, text: &'a str, expected: usize) -> Result<Self> {
        let fields: Vec<&str> = text.split(',').map(str::trim).collect();
        if fields.len() != expected {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line,
                message: format!("expected {expected} columns, found {}", fields.len()),
            });
        }
        Ok(Self { path, line, fields })
    }

    fn err(&self, message: String) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            line: self.line,
            message,
        }
    }

    fn int<T: std::str::FromStr>(&self, i: usize) -> Result<T> {
        self.fields[i]
            .parse()
            .map_err(|_| self.err(format!("column {} is not an integer: '{}'", i + 1, self.fields[i])))
    }

    fn float(&self, i: usize) -> Result<f64> {
        let v: f64 = self.fields[i]
            .parse()
            .map_err(|_| self.err(format!("column {} is not a number: '{}'", i + 1, self.fields[i])))?;
        if !v.is_finite() {
            return Err(self.err(format!("column {} is not finite", i + 1)));
        }
        Ok(v)
    }

    fn vec3(&self, i: usize) -> Result<Vec3> {
        Ok(Vec3::new(self.float(i)?, self.float(i + 1)?, self.float(i + 2)?))
    }

    fn non_monotonic(&self) -> Error {
        Error::NonMonotonicFile {
            path: self.path.to_path_buf(),
            line: self.line,
        }
    }
}

/// True for a header row: first field is not a number.
fn is_header(text: &str) -> bool {
    text.split(',').next().is_some_and(|f| f.trim().parse::<f64>().is_err())
}

/// Euroc layout: `timestamp [ns], w_x, w_y, w_z, a_x, a_y, a_z`. Returns
/// `(ns, gyro, accel)` rows in file order.
pub fn parse_imu_euroc(text: &str, path: &Path) -> Result<Vec<(i64, Vec3, Vec3)>> {
    let mut out: Vec<(i64, Vec3, Vec3)> = Vec::new();
    for (n, (line, l)) in data_lines(text).enumerate() {
        if n == 0 && is_header(l) {
            continue;
        }
        let row = Row::split(path, line, l, 7)?;
        let ns: i64 = row.int(0)?;
        if out.last().is_some_and(|p| ns <= p.0) {
            return Err(row.non_monotonic());
        }
        out.push((ns, row.vec3(1)?, row.vec3(4)?));
    }
    Ok(out)
}

pub fn load_imu_euroc(path: &Path, base: Option<TimeBase>) -> Result<Vec<ImuSample>> {
    let rows = parse_imu_euroc(&read_text(path)?, path)?;
    let base = base.unwrap_or_else(|| TimeBase::new(rows.first().map_or(0, |r| r.0)));
    Ok(imu_samples(&rows, base))
}

fn imu_samples(rows: &[(i64, Vec3, Vec3)], base: TimeBase) -> Vec<ImuSample> {
    rows.iter()
        .map(|(ns, gyro, accel)| ImuSample {
            timestamp: base.to_seconds(*ns),
            gyro: *gyro,
            accel: *accel,
        })
        .collect()
}

pub fn imu_to_text(samples: &[ImuSample], base: TimeBase) -> String {
    let mut s = String::from("#timestamp [ns],w_x [rad s^-1],w_y [rad s^-1],w_z [rad s^-1],a_x [m s^-2],a_y [m s^-2],a_z [m s^-2]\n");
    for m in samples {
        s.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            base.to_ns(m.timestamp),
            m.gyro.x,
            m.gyro.y,
            m.gyro.z,
            m.accel.x,
            m.accel.y,
            m.accel.z
        ));
    }
    s
}

/// `frame_id, timestamp_ns` rows, strictly increasing in time.
pub fn parse_frames(text: &str, path: &Path) -> Result<Vec<(usize, i64)>> {
    let mut out: Vec<(usize, i64)> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for (n, (line, l)) in data_lines(text).enumerate() {
        if n == 0 && is_header(l) {
            continue;
        }
        let row = Row::split(path, line, l, 2)?;
        let id: usize = row.int(0)?;
        let ns: i64 = row.int(1)?;
        if out.last().is_some_and(|p| ns <= p.1) {
            return Err(row.non_monotonic());
        }
        if !seen.insert(id) {
            return Err(row.err(format!("duplicate frame id {id}")));
        }
        out.push((id, ns));
    }
    Ok(out)
}

/// Observations of one frame as read from a tracks file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackFrame {
    pub frame_id: usize,
    pub timestamp_ns: i64,
    pub observations: Vec<(usize, Vector2<f64>)>,
}

/// `frame_id, timestamp_ns, feature_id, u, v` rows in normalized image
/// coordinates, grouped by frame. Rows of a frame must be contiguous.
pub fn parse_tracks(text: &str, path: &Path) -> Result<Vec<TrackFrame>> {
    let mut out: Vec<TrackFrame> = Vec::new();
    for (n, (line, l)) in data_lines(text).enumerate() {
        if n == 0 && is_header(l) {
            continue;
        }
        let row = Row::split(path, line, l, 5)?;
        let frame_id: usize = row.int(0)?;
        let ns: i64 = row.int(1)?;
        let feature: usize = row.int(2)?;
        let uv = Vector2::new(row.float(3)?, row.float(4)?);
        match out.last_mut() {
            Some(f) if f.frame_id == frame_id => {
                if f.timestamp_ns != ns {
                    return Err(row.err(format!("frame {frame_id} has two timestamps")));
                }
                if f.observations.iter().any(|o| o.0 == feature) {
                    return Err(row.err(format!("feature {feature} observed twice in frame {frame_id}")));
                }
                f.observations.push((feature, uv));
            }
            last => {
                if last.is_some_and(|f| ns <= f.timestamp_ns) {
                    return Err(row.non_monotonic());
                }
                out.push(TrackFrame {
                    frame_id,
                    timestamp_ns: ns,
                    observations: vec![(feature, uv)],
                });
            }
        }
    }
    Ok(out)
}

pub fn load_tracks(path: &Path) -> Result<Vec<TrackFrame>> {
    parse_tracks(&read_text(path)?, path)
}

pub fn frames_to_text(frames: &[DatasetFrame], base: TimeBase) -> String {
    let mut s = String::from("frame_id,timestamp_ns\n");
    for f in frames {
        s.push_str(&format!("{},{}\n", f.id, base.to_ns(f.timestamp)));
    }
    s
}

pub fn tracks_to_text(frames: &[DatasetFrame], base: TimeBase) -> String {
    let mut s = String::from("frame_id,timestamp_ns,feature_id,u,v\n");
    for f in frames {
        let ns = base.to_ns(f.timestamp);
        for (id, uv) in &f.observations {
            s.push_str(&format!("{},{},{},{},{}\n", f.id, ns, id, uv.x, uv.y));
        }
    }
    s
}

pub fn offsets_truth_to_text(truth: &[OffsetTruth], base: TimeBase) -> String {
    let mut s = String::from("frame_id,timestamp_ns,injected,effective\n");
    for o in truth {
        s.push_str(&format!("{},{},{},{}\n", o.frame_id, base.to_ns(o.timestamp), o.injected, o.effective));
    }
    s
}

pub fn parse_offsets_truth(text: &str, path: &Path, base: TimeBase) -> Result<Vec<OffsetTruth>> {
    let mut out: Vec<OffsetTruth> = Vec::new();
    let mut last_ns = None;
    for (n, (line, l)) in data_lines(text).enumerate() {
        if n == 0 && is_header(l) {
            continue;
        }
        let row = Row::split(path, line, l, 4)?;
        let ns: i64 = row.int(1)?;
        if last_ns.is_some_and(|p| ns <= p) {
            return Err(row.non_monotonic());
        }
        last_ns = Some(ns);
        out.push(OffsetTruth {
            frame_id: row.int(0)?,
            timestamp: base.to_seconds(ns),
            injected: row.float(2)?,
            effective: row.float(3)?,
        });
    }
    Ok(out)
}

/// Estimated offsets as written by a run: `frame_id, timestamp, offset,
/// keyframe`, timestamps in seconds. Returns `(frame id, t, offset)`.
pub fn parse_offsets_estimate(text: &str, path: &Path) -> Result<Vec<(usize, f64, f64)>> {
    let mut out: Vec<(usize, f64, f64)> = Vec::new();
    for (n, (line, l)) in data_lines(text).enumerate() {
        if n == 0 && is_header(l) {
            continue;
        }
        let row = Row::split(path, line, l, 4)?;
        let t = row.float(1)?;
        if out.last().is_some_and(|p| t <= p.1) {
            return Err(row.non_monotonic());
        }
        out.push((row.int(0)?, t, row.float(2)?));
    }
    Ok(out)
}

pub fn vision_poses_to_text(poses: &VisionPoseSet, base: TimeBase) -> String {
    let mut s = String::from("timestamp_ns,qx,qy,qz,qw,px,py,pz\n");
    for (t, q, p) in &poses.entries {
        let c = quat_coeffs(q);
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            base.to_ns(*t),
            c[0],
            c[1],
            c[2],
            c[3],
            p.x,
            p.y,
            p.z
        ));
    }
    s
}

pub fn parse_vision_poses(text: &str, path: &Path, base: TimeBase) -> Result<VisionPoseSet> {
    let mut entries: Vec<(f64, Quat, Vec3)> = Vec::new();
    let mut last_ns = None;
    for (n, (line, l)) in data_lines(text).enumerate() {
        if n == 0 && is_header(l) {
            continue;
        }
        let row = Row::split(path, line, l, 8)?;
        let ns: i64 = row.int(0)?;
        if last_ns.is_some_and(|p| ns <= p) {
            return Err(row.non_monotonic());
        }
        last_ns = Some(ns);
        let c = [row.float(1)?, row.float(2)?, row.float(3)?, row.float(4)?];
        if c.iter().map(|x| x * x).sum::<f64>() < 1e-12 {
            return Err(row.err("zero quaternion".into()));
        }
        entries.push((base.to_seconds(ns), quat_from_xyzw(c[0], c[1], c[2], c[3]), row.vec3(5)?));
    }
    Ok(VisionPoseSet { entries })
}

/// Writes every file of the bundle into `dir`, creating it if needed.
pub fn write_bundle(dir: &Path, data: &Dataset, meta: &BundleMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let base = TimeBase::new(meta.time_origin_ns.unwrap_or(0));
    write_text(&dir.join(IMU_FILE), &imu_to_text(&data.imu, base))?;
    write_text(&dir.join(FRAMES_FILE), &frames_to_text(&data.frames, base))?;
    write_text(&dir.join(TRACKS_FILE), &tracks_to_text(&data.frames, base))?;
    if let Some(gt) = &data.groundtruth {
        write_text(&dir.join(GROUNDTRUTH_FILE), &gt.to_text())?;
    }
    if let Some(o) = &data.offsets_truth {
        write_text(&dir.join(OFFSETS_TRUTH_FILE), &offsets_truth_to_text(o, base))?;
    }
    if let Some(v) = &data.vision_poses {
        write_text(&dir.join(VISION_POSES_FILE), &vision_poses_to_text(v, base))?;
    }
    let meta_text = toml::to_string(meta).map_err(|e| Error::Config(e.to_string()))?;
    write_text(&dir.join(META_FILE), &meta_text)
}

pub fn read_meta(path: &Path) -> Result<BundleMeta> {
    let text = read_text(path)?;
    toml::from_str(&text).map_err(|e: toml::de::Error| Error::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
        message: e.message().to_string(),
    })
}

fn optional(path: PathBuf) -> Option<PathBuf> {
    path.exists().then_some(path)
}

/// Reads a bundle directory. Optional files missing on disk come back as
/// `None`.
pub fn read_bundle(dir: &Path) -> Result<(Dataset, BundleMeta)> {
    let meta = read_meta(&dir.join(META_FILE))?;
    let imu_path = dir.join(IMU_FILE);
    let imu_rows = parse_imu_euroc(&read_text(&imu_path)?, &imu_path)?;
    let base = TimeBase::new(meta.time_origin_ns.unwrap_or_else(|| imu_rows.first().map_or(0, |r| r.0)));
    let imu = imu_samples(&imu_rows, base);

    let frames_path = dir.join(FRAMES_FILE);
    let frame_rows = parse_frames(&read_text(&frames_path)?, &frames_path)?;
    let tracks_path = dir.join(TRACKS_FILE);
    let tracks = load_tracks(&tracks_path)?;
    let index: BTreeMap<usize, (usize, i64)> = frame_rows.iter().enumerate().map(|(i, (id, ns))| (*id, (i, *ns))).collect();
    let mut frames: Vec<DatasetFrame> = frame_rows
        .iter()
        .map(|(id, ns)| DatasetFrame {
            id: *id,
            timestamp: base.to_seconds(*ns),
            observations: Vec::new(),
        })
        .collect();
    for t in tracks {
        let (i, ns) = index.get(&t.frame_id).copied().ok_or_else(|| Error::Parse {
            path: tracks_path.clone(),
            line: 0,
            message: format!("frame {} is not listed in {FRAMES_FILE}", t.frame_id),
        })?;
        if ns != t.timestamp_ns {
            return Err(Error::Parse {
                path: tracks_path.clone(),
                line: 0,
                message: format!("frame {} timestamp disagrees with {FRAMES_FILE}", t.frame_id),
            });
        }
        frames[i].observations = t.observations;
    }

    let groundtruth = optional(dir.join(GROUNDTRUTH_FILE))
        .map(|p| TrajectoryFile::parse(&read_text(&p)?, &p))
        .transpose()?;
    let offsets_truth = optional(dir.join(OFFSETS_TRUTH_FILE))
        .map(|p| parse_offsets_truth(&read_text(&p)?, &p, base))
        .transpose()?;
    let vision_poses = optional(dir.join(VISION_POSES_FILE))
        .map(|p| parse_vision_poses(&read_text(&p)?, &p, base))
        .transpose()?;
    let data = Dataset {
        imu,
        frames,
        extrinsics: meta.extrinsics.to_extrinsics(),
        vision_poses,
        groundtruth,
        offsets_truth,
    };
    Ok((data, meta))
}
