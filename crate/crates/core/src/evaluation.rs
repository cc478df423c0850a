//! Trajectory alignment, relative pose errors and offset-recovery scoring.

use std::fmt;
use std::path::Path;

use nalgebra::{Matrix3, Rotation3};

use crate::error::{Error, Result};
use crate::geometry::{Pose, Quat, Vec3};

/// Timestamped poses, TUM layout: `t tx ty tz qx qy qz qw`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrajectoryFile {
    pub rows: Vec<(f64, Pose)>,
}

impl TrajectoryFile {
    pub fn new(rows: Vec<(f64, Pose)>) -> Result<Self> {
        for (i, w) in rows.windows(2).enumerate() {
            if w[1].0 <= w[0].0 {
                return Err(Error::NonMonotonicTimestamps { index: i + 1 });
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Parses the whitespace-separated text form; `path` is only used in
    /// error messages.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut rows: Vec<(f64, Pose)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 8 {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("expected 8 columns, found {}", fields.len()),
                });
            }
            let mut v = [0.0; 8];
            for (slot, f) in v.iter_mut().zip(&fields) {
                *slot = f.parse().map_err(|_| Error::Parse {
                    path: path.to_path_buf(),
                    line: line_no,
                    message: format!("invalid number '{f}'"),
                })?;
            }
            if let Some(last) = rows.last() {
                if v[0] <= last.0 {
                    return Err(Error::NonMonotonicFile {
                        path: path.to_path_buf(),
                        line: line_no,
                    });
                }
            }
            let q = crate::geometry::quat_from_xyzw(v[4], v[5], v[6], v[7]);
            rows.push((v[0], Pose::new(q, Vec3::new(v[1], v[2], v[3]))));
        }
        Ok(Self { rows })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (t, p) in &self.rows {
            let q = p.rotation.coords;
            s.push_str(&format!(
                "{:.9} {} {} {} {} {} {} {}\n",
                t, p.position.x, p.position.y, p.position.z, q.x, q.y, q.z, q.w
            ));
        }
        s
    }
}

/// `x ↦ s·R·x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sim3 {
    pub scale: f64,
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Sim3 {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p * self.scale + self.translation
    }

    pub fn apply_pose(&self, p: &Pose) -> Pose {
        Pose::new(self.rotation * p.rotation, self.apply_point(&p.position))
    }

    pub fn apply(&self, traj: &TrajectoryFile) -> TrajectoryFile {
        TrajectoryFile {
            rows: traj.rows.iter().map(|(t, p)| (*t, self.apply_pose(p))).collect(),
        }
    }
}

/// Nearest-neighbour pairs `(est index, ref index)` within `tolerance`
/// seconds, plus the number of unmatched estimate rows.
pub fn associate(est: &TrajectoryFile, reference: &TrajectoryFile, tolerance: f64) -> (Vec<(usize, usize)>, usize) {
    let times: Vec<f64> = reference.rows.iter().map(|r| r.0).collect();
    let mut pairs = Vec::new();
    let mut unmatched = 0;
    for (i, (t, _)) in est.rows.iter().enumerate() {
        let j = times.partition_point(|x| x < t);
        let best = [j.checked_sub(1), (j < times.len()).then_some(j)]
            .into_iter()
            .flatten()
            .min_by(|a, b| (times[*a] - t).abs().total_cmp(&(times[*b] - t).abs()));
        match best {
            Some(j) if (times[j] - t).abs() <= tolerance => pairs.push((i, j)),
            _ => unmatched += 1,
        }
    }
    (pairs, unmatched)
}

/// Closed-form similarity minimizing `Σ‖y_i − (s·R·x_i + t)‖²`.
pub fn umeyama(x: &[Vec3], y: &[Vec3]) -> Result<Sim3> {
    let n = x.len();
    if n < 3 || y.len() != n {
        return Err(Error::InsufficientCorrespondences(n.min(y.len())));
    }
    let nf = n as f64;
    let mx = x.iter().sum::<Vec3>() / nf;
    let my = y.iter().sum::<Vec3>() / nf;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        cov += db * da.transpose();
        var_x += da.norm_squared();
    }
    cov /= nf;
    var_x /= nf;
    if var_x <= 0.0 {
        return Err(Error::InsufficientCorrespondences(n));
    }
    let svd = cov.svd(true, true);
    let (u, vt) = (svd.u.expect("u"), svd.v_t.expect("v_t"));
    let mut s = Matrix3::identity();
    if (u * vt).determinant() < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * vt;
    let scale = (Matrix3::from_diagonal(&svd.singular_values) * s).trace() / var_x;
    let rotation = Quat::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r));
    Ok(Sim3 {
        scale,
        rotation,
        translation: my - r * mx * scale,
    })
}

/// Aligns `est` onto `reference` over time-associated positions.
pub fn align_sim3(est: &TrajectoryFile, reference: &TrajectoryFile, tolerance: f64) -> Result<(Sim3, usize)> {
    let (pairs, unmatched) = associate(est, reference, tolerance);
    let x: Vec<Vec3> = pairs.iter().map(|(i, _)| est.rows[*i].1.position).collect();
    let y: Vec<Vec3> = pairs.iter().map(|(_, j)| reference.rows[*j].1.position).collect();
    Ok((umeyama(&x, &y)?, unmatched))
}

pub const DEFAULT_SEGMENTS: [f64; 4] = [1.0, 2.0, 5.0, 10.0];

#[derive(Debug, Clone, PartialEq)]
pub struct SegmentError {
    pub length: f64,
    pub count: usize,
    pub rotation_deg: f64,
    pub translation_m: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetScore {
    pub rmse_ms: f64,
    /// Seconds from the first frame until the estimate enters the band for
    /// good; `None` if it never does.
    pub convergence_time: Option<f64>,
}

impl OffsetScore {
    pub fn converged(&self) -> bool {
        self.convergence_time.is_some()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub segments: Vec<SegmentError>,
    /// Lengths with no complete segment in the reference.
    pub skipped: Vec<f64>,
    pub matched: usize,
    pub unmatched: usize,
    pub offset: Option<OffsetScore>,
}

impl MetricReport {
    /// Mean over segment lengths that produced at least one segment.
    pub fn avg_rotation_deg(&self) -> Option<f64> {
        mean(self.segments.iter().map(|s| s.rotation_deg))
    }

    pub fn avg_translation_m(&self) -> Option<f64> {
        mean(self.segments.iter().map(|s| s.translation_m))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,segment_m,count,value\n");
        for seg in &self.segments {
            s.push_str(&format!("rotation_deg,{},{},{}\n", seg.length, seg.count, seg.rotation_deg));
            s.push_str(&format!("translation_m,{},{},{}\n", seg.length, seg.count, seg.translation_m));
        }
        if let Some(v) = self.avg_rotation_deg() {
            s.push_str(&format!("avg_rotation_deg,,,{v}\n"));
        }
        if let Some(v) = self.avg_translation_m() {
            s.push_str(&format!("avg_translation_m,,,{v}\n"));
        }
        if let Some(o) = &self.offset {
            s.push_str(&format!("offset_rmse_ms,,,{}\n", o.rmse_ms));
            let c = o.convergence_time.map(|t| t.to_string()).unwrap_or_else(|| "never".into());
            s.push_str(&format!("offset_convergence_s,,,{c}\n"));
        }
        s
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.segments.is_empty() || !self.skipped.is_empty() {
            writeln!(f, "matched poses: {} (unmatched {})", self.matched, self.unmatched)?;
            writeln!(f, "{:>9} {:>7} {:>12} {:>12}", "segment", "count", "rot [deg]", "trans [m]")?;
            for s in &self.segments {
                writeln!(f, "{:>8.1}m {:>7} {:>12.4} {:>12.4}", s.length, s.count, s.rotation_deg, s.translation_m)?;
            }
            for l in &self.skipped {
                writeln!(f, "{l:>8.1}m  trajectory too short")?;
            }
            if let (Some(r), Some(t)) = (self.avg_rotation_deg(), self.avg_translation_m()) {
                writeln!(f, "{:>9} {:>7} {:>12.4} {:>12.4}", "average", "", r, t)?;
            }
        }
        if let Some(o) = &self.offset {
            match o.convergence_time {
                Some(t) => writeln!(f, "time offset: RMSE {:.3} ms after convergence at {:.2} s", o.rmse_ms, t)?,
                None => writeln!(f, "time offset: never converged, RMSE {:.3} ms over all frames", o.rmse_ms)?,
            }
        }
        Ok(())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = it.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// KITTI-style relative errors between time-associated poses.
///
/// For every start pose and segment length the end is the first pose at
/// least that far along the reference path. Errors are the rotation angle
/// (deg) and translation norm (m) of `(ref_i⁻¹ ref_j)⁻¹ (est_i⁻¹ est_j)`.
pub fn relative_errors(
    est: &TrajectoryFile,
    reference: &TrajectoryFile,
    segment_lengths: &[f64],
    tolerance: f64,
) -> MetricReport {
    let (pairs, unmatched) = associate(est, reference, tolerance);
    let e: Vec<&Pose> = pairs.iter().map(|(i, _)| &est.rows[*i].1).collect();
    let r: Vec<&Pose> = pairs.iter().map(|(_, j)| &reference.rows[*j].1).collect();
    let mut dist = vec![0.0; r.len()];
    for i in 1..r.len() {
        dist[i] = dist[i - 1] + (r[i].position - r[i - 1].position).norm();
    }
    let mut report = MetricReport {
        matched: pairs.len(),
        unmatched,
        ..Default::default()
    };
    for &len in segment_lengths {
        let (mut rot, mut trans, mut count) = (0.0, 0.0, 0usize);
        for i in 0..r.len() {
            let j = dist.partition_point(|d| *d < dist[i] + len);
            if j >= r.len() {
                break;
            }
            let dr = r[i].inverse().compose(r[j]);
            let de = e[i].inverse().compose(e[j]);
            let err = dr.inverse().compose(&de);
            rot += err.rotation.angle().to_degrees();
            trans += err.position.norm();
            count += 1;
        }
        if count == 0 {
            report.skipped.push(len);
        } else {
            report.segments.push(SegmentError {
                length: len,
                count,
                rotation_deg: rot / count as f64,
                translation_m: trans / count as f64,
            });
        }
    }
    report
}

/// RMSE of the offset estimate after it settles.
///
/// Convergence is the first frame from which the error stays within
/// `band` for at least `hold` seconds; the RMSE covers every frame from
/// there on. Without convergence the RMSE covers all frames.
pub fn offset_recovery_score(times: &[f64], est: &[f64], truth: &[f64], band: f64, hold: f64) -> Result<OffsetScore> {
    if est.len() != times.len() || truth.len() != times.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: est.len().min(truth.len()),
        });
    }
    if times.is_empty() {
        return Err(Error::InsufficientCorrespondences(0));
    }
    let err: Vec<f64> = est.iter().zip(truth).map(|(a, b)| a - b).collect();
    let mut start = None;
    let mut run_start: Option<usize> = None;
    for i in 0..err.len() {
        if err[i].abs() <= band {
            let s = *run_start.get_or_insert(i);
            if times[i] - times[s] >= hold {
                start = Some(s);
                break;
            }
        } else {
            run_start = None;
        }
    }
    // A series shorter than `hold` that never leaves the band also counts.
    if start.is_none() && run_start == Some(0) {
        start = Some(0);
    }
    let from = start.unwrap_or(0);
    Ok(OffsetScore {
        rmse_ms: rmse(&err[from..]) * 1e3,
        convergence_time: start.map(|s| times[s] - times[0]),
    })
}

/// Offset RMSE (ms) over frames at or after `from_time`.
pub fn offset_rmse_after(times: &[f64], est: &[f64], truth: &[f64], from_time: f64) -> f64 {
    let err: Vec<f64> = times
        .iter()
        .zip(est.iter().zip(truth))
        .filter(|(t, _)| **t >= from_time)
        .map(|(_, (a, b))| a - b)
        .collect();
    rmse(&err) * 1e3
}

fn rmse(e: &[f64]) -> f64 {
    if e.is_empty() {
        return 0.0;
    }
    (e.iter().map(|x| x * x).sum::<f64>() / e.len() as f64).sqrt()
}
