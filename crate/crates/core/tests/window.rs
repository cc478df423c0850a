use std::time::Instant;

use vio_core::geometry::FrameState;
use vio_core::integration_cache::CacheBank;
use vio_core::simulator::{generate, OffsetProfile, SimConfig, SimOutput, TrajectoryModel};
use vio_core::solver::{OffsetMode, WindowConfig, WindowProblem};

fn truth_state(out: &SimOutput, i: usize) -> FrameState {
    let t = &out.truth[i];
    FrameState {
        timestamp: t.timestamp,
        pose: t.pose,
        velocity: t.velocity,
        bias_accel: t.bias_accel,
        bias_gyro: t.bias_gyro,
        time_offset: 0.0,
    }
}

fn window(out: &SimOutput, config: WindowConfig) -> WindowProblem {
    let cap = CacheBank::capacity_for(config.max_offset, 1.0 / 200.0);
    let bank = CacheBank::new(config.noise, 0.05, cap)
        .with_samples(out.imu.clone())
        .unwrap();
    WindowProblem::new(config, bank, out.extrinsics).unwrap()
}

fn sim(offset: f64, duration: f64) -> SimOutput {
    let c = SimConfig {
        offset_profile: OffsetProfile::Constant(offset),
        rolling_shutter_readout: 0.0,
        seed: 3,
        ..SimConfig::default()
    };
    generate(&c, &TrajectoryModel::circle(1.0, 0.2, duration)).unwrap()
}

#[test]
fn window_fills_without_marginalization() {
    let out = sim(0.0, 2.0);
    let mut w = window(&out, WindowConfig::default());
    for i in 0..11 {
        w.insert_frame(truth_state(&out, i), &out.frames[i].observations).unwrap();
    }
    assert_eq!(w.frames().len(), 11);
    assert_eq!(w.n_keyframes(), 8);
    assert!(w.exited().is_empty());
    let before = w.trajectory_dimension();
    w.marginalize_oldest_keyframe().unwrap();
    assert_eq!(before - w.trajectory_dimension(), 16);
}

#[test]
fn recovers_constant_offset_from_truth_start() {
    let out = sim(0.06, 8.0);
    let mut w = window(&out, WindowConfig::default());
    let start = Instant::now();
    w.insert_frame(truth_state(&out, 0), &out.frames[0].observations).unwrap();
    w.optimize().unwrap();
    for i in 1..out.frames.len() {
        let s = w.predict(out.frames[i].timestamp).unwrap();
        w.insert_frame(s, &out.frames[i].observations).unwrap();
        let r = w.optimize().unwrap();
        if i % 20 == 0 {
            let f = w.frames().last().unwrap();
            let t = &out.truth[i];
            eprintln!(
                "frame {i} offset {:.4} pos err {:.4} iters {} cost {:.1} lms {}",
                f.state.time_offset,
                (f.state.pose.position - t.pose.position).norm(),
                r.iteration_count(),
                r.final_cost,
                w.landmarks().len()
            );
        }
    }
    eprintln!("elapsed {:?} stats {:?}", start.elapsed(), w.stats());
    let last = w.frames().last().unwrap();
    assert!((last.state.time_offset - 0.06).abs() < 0.003);
    let _ = OffsetMode::Shared;
}
