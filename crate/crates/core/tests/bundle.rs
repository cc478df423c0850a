use std::fs;

use vio_core::config::RunConfig;
use vio_core::io::{read_bundle, write_bundle, TRACKS_FILE};

fn short_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.sim.duration = 3.0;
    cfg.sim.offset_ms = 30.0;
    cfg.sim.seed = 5;
    cfg
}

#[test]
fn bundle_round_trip() {
    let (data, meta) = short_config().simulate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &data, &meta).unwrap();
    let (back, meta_back) = read_bundle(dir.path()).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.extrinsics.translation, data.extrinsics.translation);
    assert_eq!(back.imu.len(), data.imu.len());
    for (a, b) in data.imu.iter().zip(&back.imu) {
        assert!((a.timestamp - b.timestamp).abs() <= 1e-9);
        assert_eq!((a.gyro, a.accel), (b.gyro, b.accel));
    }
    assert_eq!(back.frames.len(), data.frames.len());
    for (a, b) in data.frames.iter().zip(&back.frames) {
        assert_eq!(a.id, b.id);
        assert!((a.timestamp - b.timestamp).abs() <= 1e-9);
        assert_eq!(a.observations, b.observations);
    }
    let truth = back.offsets_truth.as_ref().unwrap();
    assert_eq!(truth.len(), data.frames.len());
    assert!(truth.iter().all(|o| (o.injected - 0.03).abs() < 1e-15));
    assert_eq!(back.vision_poses.as_ref().unwrap().len(), 40);
    assert_eq!(back.groundtruth.as_ref().unwrap().len(), data.groundtruth.as_ref().unwrap().len());
}

#[test]
fn simulator_tracks_rewrite_bit_exact() {
    let (data, meta) = short_config().simulate().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    write_bundle(a.path(), &data, &meta).unwrap();
    let (back, meta_back) = read_bundle(a.path()).unwrap();
    write_bundle(b.path(), &back, &meta_back).unwrap();
    for entry in fs::read_dir(a.path()).unwrap() {
        let name = entry.unwrap().file_name();
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs after rewrite");
    }
    assert!(fs::metadata(a.path().join(TRACKS_FILE)).unwrap().len() > 0);
}

#[test]
fn missing_optional_files_are_none() {
    let (data, meta) = short_config().simulate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &data, &meta).unwrap();
    fs::remove_file(dir.path().join("groundtruth.txt")).unwrap();
    fs::remove_file(dir.path().join("offsets_truth.csv")).unwrap();
    let (back, _) = read_bundle(dir.path()).unwrap();
    assert!(back.groundtruth.is_none());
    assert!(back.offsets_truth.is_none());
}

#[test]
fn track_for_unknown_frame_is_rejected() {
    let (data, meta) = short_config().simulate().unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_bundle(dir.path(), &data, &meta).unwrap();
    let path = dir.path().join(TRACKS_FILE);
    let mut text = fs::read_to_string(&path).unwrap();
    text.push_str("9999,999000000000,1,0.1,0.1\n");
    fs::write(&path, text).unwrap();
    assert!(read_bundle(dir.path()).is_err());
}
