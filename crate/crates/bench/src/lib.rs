//! Shared fixtures for the benchmarks.

use vio_core::config::RunConfig;
use vio_core::pipeline::{Dataset, PipelineConfig};
use vio_core::preintegration::ImuSample;

/// Simulated bundle of `duration` seconds with a 30 ms offset, plus the
/// matching estimator settings.
pub fn dataset(duration: f64) -> (Dataset, PipelineConfig) {
    let mut cfg = RunConfig::default();
    cfg.sim.duration = duration;
    cfg.sim.offset_ms = 30.0;
    cfg.sim.seed = 3;
    let (data, meta) = cfg.simulate().expect("simulation");
    let pc = cfg.pipeline_config(meta.vision_noise()).expect("config");
    (data, pc)
}

/// Capture times an LM solve visits around `anchor`: small steps in both
/// directions within an offset range of ±`range`.
pub fn offset_sweep(anchor: f64, range: f64, steps: usize) -> Vec<f64> {
    let h = range / steps as f64;
    (0..steps)
        .map(|i| anchor + 0.0007 + h * i as f64)
        .chain((0..steps).map(|i| anchor - h * i as f64))
        .collect()
}

pub fn imu(duration: f64) -> Vec<ImuSample> {
    vio_core::diagnostics::test_signal(0.0, duration)
}
