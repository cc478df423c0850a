use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn vio(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_vio"));
    cmd.args(args);
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("vio runs")
}

fn ok(out: &Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn assert_same_dir(a: &Path, b: &Path) {
    let mut names: Vec<_> = fs::read_dir(a).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(!names.is_empty());
    for n in names {
        assert!(fs::read(a.join(&n)).unwrap() == fs::read(b.join(&n)).unwrap(), "{n:?} differs");
    }
}

const NOISE_FREE: [(&str, &str); 4] = [
    ("VIO_SIM_PIXEL_NOISE", "0"),
    ("VIO_SIM_IMU_NOISE_SCALE", "0"),
    ("VIO_SIM_VISION_SIGMA_ROT", "0"),
    ("VIO_SIM_VISION_SIGMA_POS", "0"),
];

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&vio(
            &["simulate", "--traj", "circle", "--offset-ms", "60", "--seed", "7", "--duration", "5", "--out", p(out)],
            &[],
        ));
    }
    assert_same_dir(&a, &b);
    let other = dir.path().join("c");
    ok(&vio(
        &["simulate", "--traj", "circle", "--offset-ms", "60", "--seed", "8", "--duration", "5", "--out", p(&other)],
        &[],
    ));
    assert!(fs::read(a.join("imu.csv")).unwrap() != fs::read(other.join("imu.csv")).unwrap());
}

#[test]
fn noise_free_run_and_eval() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, run, csv) = (dir.path().join("b"), dir.path().join("r"), dir.path().join("m.csv"));
    ok(&vio(
        &["simulate", "--duration", "10", "--readout-ms", "0", "--offset-ms", "0", "--seed", "2", "--out", p(&bundle)],
        &NOISE_FREE,
    ));
    ok(&vio(&["run", "--bundle", p(&bundle), "--out", p(&run)], &[]));
    for f in ["trajectory.txt", "offsets.csv", "reports.csv"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    ok(&vio(&["eval", "--run", p(&run), "--bundle", p(&bundle), "--csv", p(&csv)], &[]));
    let text = fs::read_to_string(&csv).unwrap();
    let value = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.starts_with(name)).unwrap_or_else(|| panic!("{name} missing"));
        line.rsplit(',').next().unwrap().parse().unwrap()
    };
    assert!(value("avg_translation_m") < 1e-3, "{text}");
    assert!(value("avg_rotation_deg") < 0.05, "{text}");
    assert!(value("offset_rmse_ms") < 1.0, "{text}");
}

#[test]
fn eval_without_ground_truth_reports_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let (bundle, run) = (dir.path().join("b"), dir.path().join("r"));
    ok(&vio(
        &["simulate", "--duration", "4", "--readout-ms", "0", "--offset-ms", "30", "--seed", "4", "--out", p(&bundle)],
        &[],
    ));
    ok(&vio(&["run", "--bundle", p(&bundle), "--out", p(&run)], &[]));
    fs::remove_file(bundle.join("groundtruth.txt")).unwrap();
    let stdout = ok(&vio(&["eval", "--run", p(&run), "--bundle", p(&bundle)], &[]));
    assert!(stdout.contains("time offset"), "{stdout}");
    assert!(!stdout.contains("segment"), "{stdout}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(vio(&["run"], &[]).status.code(), Some(2));
    assert_eq!(vio(&["frobnicate"], &[]).status.code(), Some(2));
    let missing = dir.path().join("none");
    let out = vio(&["run", "--bundle", p(&missing), "--out", p(&dir.path().join("r"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("meta.toml"));

    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "[window]\nhubber = 2\n").unwrap();
    let out = vio(&["simulate", "--config", p(&cfg), "--out", p(&dir.path().join("b"))], &[]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("b").exists(), "bad config must fail before any work");
    let out = vio(&["simulate", "--out", p(&dir.path().join("b"))], &[("VIO_SIM_SEEED", "1")]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_bundle_reports_file_and_line() {
    let dir = tempfile::tempdir().unwrap();
    let bundle = dir.path().join("b");
    ok(&vio(&["simulate", "--duration", "2", "--out", p(&bundle)], &[]));
    let imu = bundle.join("imu.csv");
    let mut lines: Vec<String> = fs::read_to_string(&imu).unwrap().lines().map(String::from).collect();
    lines.swap(5, 6);
    fs::write(&imu, lines.join("\n")).unwrap();
    let out = vio(&["run", "--bundle", p(&bundle), "--out", p(&dir.path().join("r"))], &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("imu.csv:7"), "{err}");
}

#[test]
fn jacobian_check_passes() {
    let stdout = ok(&vio(&["jacobian-check", "--instances", "100"], &[]));
    assert_eq!(stdout.matches("PASS").count(), 4, "{stdout}");
}

#[test]
fn bench_cache_reports_both_modes() {
    let stdout = ok(&vio(&["bench-cache", "--duration", "3"], &[]));
    assert!(stdout.contains("trajectories identical: true"), "{stdout}");
    let ratio: f64 = stdout
        .lines()
        .find_map(|l| l.strip_prefix("cached step ratio "))
        .unwrap()
        .parse()
        .unwrap();
    assert!(ratio < 1.0, "{stdout}");
}
