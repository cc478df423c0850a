//! End-to-end estimation: initialization on the first frames, then the
//! sliding window over the rest of the sequence.

use std::collections::BTreeMap;

use nalgebra::Vector2;

use crate::config::EvalSection;
use crate::error::{Error, Result};
use crate::evaluation::{align_sim3, offset_recovery_score, relative_errors, MetricReport, TrajectoryFile};
use crate::geometry::{Extrinsics, Pose};
use crate::initializer::{bootstrap, preintegrate_consecutive, InitConfig, InitializationResult, VisionPoseSet};
use crate::integration_cache::{CacheBank, CacheStats};
use crate::preintegration::ImuSample;
use crate::simulator::{perturbed_vision_poses, SimOutput};
use crate::solver::{OptimizationReport, WindowConfig, WindowProblem, WindowStats};

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFrame {
    pub id: usize,
    pub timestamp: f64,
    pub observations: Vec<(usize, Vector2<f64>)>,
}

/// Ground-truth offsets of one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OffsetTruth {
    pub frame_id: usize,
    pub timestamp: f64,
    pub injected: f64,
    /// What the estimator should recover: injected plus rolling-shutter
    /// readout at the mean observed row.
    pub effective: f64,
}

/// Everything the estimator and the evaluator consume.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<DatasetFrame>,
    pub extrinsics: Extrinsics,
    /// Up-to-scale camera poses of the first frames, for initialization.
    pub vision_poses: Option<VisionPoseSet>,
    pub groundtruth: Option<TrajectoryFile>,
    pub offsets_truth: Option<Vec<OffsetTruth>>,
}

impl Dataset {
    /// Packs a simulation; `vision` holds `(frames, sigma_rot, sigma_pos,
    /// scale, seed)` for the stand-in vision-only poses.
    pub fn from_sim(out: &SimOutput, vision: Option<(usize, f64, f64, f64, u64)>) -> Self {
        let groundtruth = TrajectoryFile {
            rows: out.truth.iter().map(|t| (t.timestamp, t.pose)).collect(),
        };
        Self {
            imu: out.imu.clone(),
            frames: out
                .frames
                .iter()
                .map(|f| DatasetFrame {
                    id: f.id,
                    timestamp: f.timestamp,
                    observations: f.observations.clone(),
                })
                .collect(),
            extrinsics: out.extrinsics,
            vision_poses: vision.map(|(k, r, p, s, seed)| perturbed_vision_poses(out, k, r, p, s, seed)),
            groundtruth: Some(groundtruth),
            offsets_truth: Some(
                out.frames
                    .iter()
                    .map(|f| OffsetTruth {
                        frame_id: f.id,
                        timestamp: f.timestamp,
                        injected: f.injected_offset,
                        effective: f.effective_offset,
                    })
                    .collect(),
            ),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub window: WindowConfig,
    pub init: InitConfig,
    /// Frames used by the initializer.
    pub init_frames: usize,
    /// Any state speed above this (m/s) counts as divergence.
    pub max_speed: f64,
    /// Off makes every offset query re-integrate from its anchor frame.
    pub cache_enabled: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: WindowConfig::default(),
            init: InitConfig::default(),
            init_frames: 40,
            max_speed: 50.0,
            cache_enabled: true,
        }
    }
}

/// Final estimate of one frame, taken when it left the window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameEstimate {
    pub frame_id: usize,
    pub timestamp: f64,
    pub pose: Pose,
    pub time_offset: f64,
    pub keyframe: bool,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub estimates: Vec<FrameEstimate>,
    /// One report per optimized frame, `(frame id, report)`.
    pub reports: Vec<(usize, OptimizationReport)>,
    pub init: InitializationResult,
    pub stats: WindowStats,
    pub cache: CacheStats,
}

impl RunOutput {
    pub fn trajectory(&self) -> TrajectoryFile {
        TrajectoryFile {
            rows: self.estimates.iter().map(|e| (e.timestamp, e.pose)).collect(),
        }
    }

    /// `(frame id, timestamp, offset)` per estimate.
    pub fn offset_rows(&self) -> Vec<(usize, f64, f64)> {
        self.estimates.iter().map(|e| (e.frame_id, e.timestamp, e.time_offset)).collect()
    }

    pub fn offsets_csv(&self) -> String {
        let mut s = String::from("frame_id,timestamp,time_offset,keyframe\n");
        for e in &self.estimates {
            s.push_str(&format!("{},{:.9},{},{}\n", e.frame_id, e.timestamp, e.time_offset, e.keyframe as u8));
        }
        s
    }

    pub fn reports_csv(&self) -> String {
        let mut s = format!("frame_id,{}\n", OptimizationReport::csv_header());
        for (id, r) in &self.reports {
            for row in r.csv_rows() {
                s.push_str(&format!("{id},{row}\n"));
            }
        }
        s
    }
}

struct Setup {
    boot: crate::initializer::Bootstrap,
    window: WindowProblem,
}

fn setup(data: &Dataset, config: &PipelineConfig) -> Result<Setup> {
    config.window.validate()?;
    let poses = data
        .vision_poses
        .as_ref()
        .ok_or_else(|| Error::Config("initialization needs vision poses".into()))?;
    let k = config.init_frames.min(poses.len()).min(data.frames.len());
    let init_poses = VisionPoseSet {
        entries: poses.entries[..k].to_vec(),
    };
    for (p, f) in init_poses.entries.iter().zip(&data.frames) {
        if (p.0 - f.timestamp).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "vision pose at {:.6} s does not match frame {} at {:.6} s",
                p.0, f.id, f.timestamp
            )));
        }
    }
    let deltas = preintegrate_consecutive(&data.imu, &init_poses.timestamps(), config.window.noise)?;
    let boot = bootstrap(&init_poses, &deltas, &data.extrinsics, &config.init)?;

    let imu_period = data
        .imu
        .windows(2)
        .next()
        .map_or(0.005, |w| w[1].timestamp - w[0].timestamp);
    let cap = CacheBank::capacity_for(config.window.max_offset, imu_period);
    let mut bank = CacheBank::new(config.window.noise, 0.05, cap).with_samples(data.imu.clone())?;
    bank.set_caching(config.cache_enabled);
    let window = WindowProblem::new(config.window.clone(), bank, data.extrinsics)?;
    Ok(Setup { boot, window })
}

/// Inserts frame `i` at its bootstrap state or the IMU prediction.
fn insert(setup: &mut Setup, data: &Dataset, i: usize) -> Result<()> {
    let frame = &data.frames[i];
    let state = match setup.boot.states.get(i) {
        Some(s) => *s,
        None => setup.window.predict(frame.timestamp)?,
    };
    setup.window.insert_frame(state, &frame.observations)
}

fn step(setup: &mut Setup, data: &Dataset, config: &PipelineConfig, i: usize) -> Result<OptimizationReport> {
    let frame = &data.frames[i];
    insert(setup, data, i)?;
    let report = setup.window.optimize()?;
    let newest = &setup.window.frames().last().expect("frame just inserted").state;
    let finite = newest.pose.position.iter().chain(newest.velocity.iter()).all(|x| x.is_finite());
    if !finite || newest.velocity.norm() > config.max_speed {
        return Err(Error::EstimatorDiverged { frame: frame.id });
    }
    Ok(report)
}

/// The window with the first `frames` frames inserted and all but the last
/// one optimized, ready to time a single solve.
pub fn warm_window(data: &Dataset, config: &PipelineConfig, frames: usize) -> Result<WindowProblem> {
    let n = frames.min(data.frames.len());
    let mut s = setup(data, config)?;
    for i in 0..n.saturating_sub(1) {
        step(&mut s, data, config, i)?;
    }
    if n > 0 {
        insert(&mut s, data, n - 1)?;
    }
    Ok(s.window)
}

/// Runs initialization and the sliding window over the whole dataset.
pub fn run(data: &Dataset, config: &PipelineConfig) -> Result<RunOutput> {
    let mut s = setup(data, config)?;
    let mut reports = Vec::with_capacity(data.frames.len());
    for i in 0..data.frames.len() {
        reports.push((data.frames[i].id, step(&mut s, data, config, i)?));
    }
    let stats = s.window.stats();
    let cache = s.window.bank().total_stats();
    let mut exited = s.window.finish();
    exited.sort_by(|a, b| a.state.timestamp.total_cmp(&b.state.timestamp));
    // Window ids count insertions, so they index `data.frames`.
    let estimates = exited
        .iter()
        .map(|e| FrameEstimate {
            frame_id: data.frames[e.id].id,
            timestamp: e.state.timestamp,
            pose: e.state.pose,
            time_offset: e.state.time_offset,
            keyframe: e.keyframe,
        })
        .collect();
    Ok(RunOutput {
        estimates,
        reports,
        init: s.boot.result,
        stats,
        cache,
    })
}

/// Trajectory metrics after similarity alignment, plus the offset score when
/// offset truth is given. Without a reference only the offset part is
/// filled in.
pub fn evaluate(
    estimate: &TrajectoryFile,
    reference: Option<&TrajectoryFile>,
    offsets: &[(usize, f64, f64)],
    truth: Option<&[OffsetTruth]>,
    eval: &EvalSection,
) -> Result<MetricReport> {
    let mut report = match reference {
        Some(r) => {
            let (sim3, _) = align_sim3(estimate, r, eval.association_tolerance)?;
            relative_errors(&sim3.apply(estimate), r, &eval.segments, eval.association_tolerance)
        }
        None => MetricReport::default(),
    };
    if let Some(truth) = truth {
        let by_id: BTreeMap<usize, f64> = truth.iter().map(|o| (o.frame_id, o.effective)).collect();
        let (mut times, mut est, mut tru) = (Vec::new(), Vec::new(), Vec::new());
        for (id, t, o) in offsets {
            if let Some(e) = by_id.get(id) {
                times.push(*t);
                est.push(*o);
                tru.push(*e);
            }
        }
        if !times.is_empty() {
            report.offset = Some(offset_recovery_score(
                &times,
                &est,
                &tru,
                eval.offset_band_ms * 1e-3,
                eval.offset_hold,
            )?);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::Sim3;
    use crate::geometry::{exp_so3, Vec3};

    #[test]
    fn evaluation_is_invariant_to_similarity_of_estimate() {
        let reference = TrajectoryFile {
            rows: (0..300)
                .map(|i| {
                    let t = i as f64 * 0.05;
                    let p = Vec3::new(2.0 * (0.3 * t).cos(), 1.5 * (0.4 * t).sin(), 0.2 * t.sin());
                    (t, Pose::new(exp_so3(&Vec3::new(0.1 * t.sin(), 0.05 * t, 0.3 * t)), p))
                })
                .collect(),
        };
        let mut est = reference.clone();
        for (i, r) in est.rows.iter_mut().enumerate() {
            r.1.position += Vec3::new(0.01 * (i as f64 * 0.7).sin(), 0.004 * (i as f64 * 0.3).cos(), 0.0);
        }
        let g = Sim3 {
            scale: 0.4,
            rotation: exp_so3(&Vec3::new(0.5, -0.3, 2.0)),
            translation: Vec3::new(-3.0, 1.0, 7.0),
        };
        let eval = EvalSection::default();
        let a = evaluate(&est, Some(&reference), &[], None, &eval).unwrap();
        let b = evaluate(&g.apply(&est), Some(&reference), &[], None, &eval).unwrap();
        assert!(!a.segments.is_empty());
        for (x, y) in a.segments.iter().zip(&b.segments) {
            assert!((x.translation_m - y.translation_m).abs() < 1e-9);
            assert!((x.rotation_deg - y.rotation_deg).abs() < 1e-9);
        }
    }

    #[test]
    fn evaluation_without_reference_scores_offsets_only() {
        let est = TrajectoryFile { rows: vec![(0.0, Pose::identity())] };
        let truth: Vec<OffsetTruth> = (0..100)
            .map(|i| OffsetTruth {
                frame_id: i,
                timestamp: i as f64 * 0.05,
                injected: 0.03,
                effective: 0.03,
            })
            .collect();
        let offsets: Vec<(usize, f64, f64)> = truth.iter().map(|o| (o.frame_id, o.timestamp, 0.031)).collect();
        let r = evaluate(&est, None, &offsets, Some(&truth), &EvalSection::default()).unwrap();
        assert!(r.segments.is_empty());
        let o = r.offset.unwrap();
        assert!((o.rmse_ms - 1.0).abs() < 1e-9);
        assert_eq!(o.convergence_time, Some(0.0));
    }
}
