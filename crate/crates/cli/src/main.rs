//! `vio`: simulate datasets, run the estimator, evaluate results.
//!
//! Exit codes: 0 success, 1 data or estimation failure, 2 usage or
//! configuration error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use vio_core::config::RunConfig;
use vio_core::diagnostics;
use vio_core::evaluation::TrajectoryFile;
use vio_core::io::{self, read_bundle, write_bundle};
use vio_core::pipeline::{evaluate, run, Dataset, PipelineConfig, RunOutput};
use vio_core::Error;

const TRAJECTORY_FILE: &str = "trajectory.txt";
const OFFSETS_FILE: &str = "offsets.csv";
const REPORTS_FILE: &str = "reports.csv";

#[derive(Parser)]
#[command(name = "vio", version, about = "Visual-inertial odometry with online time-offset estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArg {
    /// TOML run configuration; `VIO_<SECTION>_<KEY>` variables override it.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset bundle.
    Simulate {
        #[command(flatten)]
        config: ConfigArg,
        /// Output bundle directory.
        #[arg(long)]
        out: PathBuf,
        /// circle, sinusoid-6dof, static or constant-velocity.
        #[arg(long)]
        traj: Option<String>,
        /// Constant injected camera-IMU offset.
        #[arg(long)]
        offset_ms: Option<f64>,
        /// Rolling-shutter readout time; 0 gives a global shutter.
        #[arg(long)]
        readout_ms: Option<f64>,
        #[arg(long)]
        duration: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run the estimator on a bundle.
    Run {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        bundle: PathBuf,
        /// Output directory for trajectory, offsets and solver reports.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate an estimated trajectory and offsets.
    Eval {
        #[command(flatten)]
        config: ConfigArg,
        /// Run output directory; supplies the estimate and offsets.
        #[arg(long)]
        run: Option<PathBuf>,
        /// Bundle directory; supplies ground truth when present.
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        estimate: Option<PathBuf>,
        #[arg(long)]
        reference: Option<PathBuf>,
        #[arg(long)]
        offsets: Option<PathBuf>,
        #[arg(long)]
        offsets_truth: Option<PathBuf>,
        /// Also write the report as CSV.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Run the same estimation with and without the integration cache.
    BenchCache {
        #[command(flatten)]
        config: ConfigArg,
        /// Bundle to use; otherwise one is simulated from the config.
        #[arg(long)]
        bundle: Option<PathBuf>,
        /// Duration of the simulated bundle.
        #[arg(long, default_value_t = 5.0)]
        duration: f64,
    },
    /// Check analytic Jacobians against finite differences.
    JacobianCheck {
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
}

enum Failure {
    Usage(String),
    Data(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Data(e)
    }
}

type CliResult = Result<(), Failure>;

fn load_config(arg: &ConfigArg) -> Result<RunConfig, Failure> {
    let text = match &arg.config {
        Some(p) => io::read_text(p).map_err(|e| Failure::Usage(e.to_string()))?,
        None => String::new(),
    };
    RunConfig::parse_with_env(&text, std::env::vars()).map_err(|e| Failure::Usage(e.to_string()))
}

fn pipeline_config(cfg: &RunConfig, meta: &io::BundleMeta) -> Result<PipelineConfig, Failure> {
    cfg.pipeline_config(meta.vision_noise())
        .map_err(|e| Failure::Usage(e.to_string()))
}

fn write_run(dir: &Path, out: &RunOutput) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    io::write_text(&dir.join(TRAJECTORY_FILE), &out.trajectory().to_text())?;
    io::write_text(&dir.join(OFFSETS_FILE), &out.offsets_csv())?;
    io::write_text(&dir.join(REPORTS_FILE), &out.reports_csv())?;
    Ok(())
}

fn simulate(
    config: &ConfigArg,
    out: &Path,
    traj: Option<String>,
    offset_ms: Option<f64>,
    readout_ms: Option<f64>,
    duration: Option<f64>,
    seed: Option<u64>,
) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(t) = traj {
        cfg.sim.trajectory = t;
    }
    if let Some(o) = offset_ms {
        cfg.sim.offset_profile = "constant".into();
        cfg.sim.offset_ms = o;
    }
    if let Some(r) = readout_ms {
        cfg.sim.readout_ms = r;
    }
    if let Some(d) = duration {
        cfg.sim.duration = d;
    }
    if let Some(s) = seed {
        cfg.sim.seed = s;
    }
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let (data, meta) = cfg.simulate()?;
    write_bundle(out, &data, &meta)?;
    println!(
        "wrote {} frames, {} IMU samples to {}",
        data.frames.len(),
        data.imu.len(),
        out.display()
    );
    Ok(())
}

fn run_cmd(config: &ConfigArg, bundle: &Path, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let (data, meta) = read_bundle(bundle)?;
    let pc = pipeline_config(&cfg, &meta)?;
    let result = run(&data, &pc)?;
    write_run(out, &result)?;
    println!(
        "estimated {} frames; initial scale {:.4}; {} keyframes marginalized",
        result.estimates.len(),
        result.init.scale,
        result.stats.marginalized_keyframes
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval_cmd(
    config: &ConfigArg,
    run_dir: Option<PathBuf>,
    bundle: Option<PathBuf>,
    estimate: Option<PathBuf>,
    reference: Option<PathBuf>,
    offsets: Option<PathBuf>,
    offsets_truth: Option<PathBuf>,
    csv: Option<PathBuf>,
) -> CliResult {
    let cfg = load_config(config)?;
    let existing = |dir: &Option<PathBuf>, name: &str| dir.as_ref().map(|d| d.join(name)).filter(|p| p.exists());
    let estimate = estimate
        .or_else(|| run_dir.as_ref().map(|d| d.join(TRAJECTORY_FILE)))
        .ok_or_else(|| Failure::Usage("eval needs --estimate or --run".into()))?;
    let offsets = offsets.or_else(|| existing(&run_dir, OFFSETS_FILE));
    let reference = reference.or_else(|| existing(&bundle, io::GROUNDTRUTH_FILE));
    let offsets_truth = offsets_truth.or_else(|| existing(&bundle, io::OFFSETS_TRUTH_FILE));

    let est = TrajectoryFile::parse(&io::read_text(&estimate)?, &estimate)?;
    let reference = reference
        .map(|p| TrajectoryFile::parse(&io::read_text(&p)?, &p))
        .transpose()?;
    let offsets = offsets
        .map(|p| io::parse_offsets_estimate(&io::read_text(&p)?, &p))
        .transpose()?
        .unwrap_or_default();
    // Offset truth shares the bundle's time base; only frame ids are used.
    let truth = offsets_truth
        .map(|p| io::parse_offsets_truth(&io::read_text(&p)?, &p, vio_core::geometry::TimeBase::new(0)))
        .transpose()?;
    if reference.is_none() {
        println!("no ground-truth trajectory; reporting time offsets only");
    }
    let report = evaluate(&est, reference.as_ref(), &offsets, truth.as_deref(), &cfg.eval)?;
    print!("{report}");
    if let Some(p) = csv {
        io::write_text(&p, &report.to_csv())?;
    }
    Ok(())
}

fn bench_cache(config: &ConfigArg, bundle: Option<PathBuf>, duration: f64) -> CliResult {
    let mut cfg = load_config(config)?;
    let (data, meta): (Dataset, io::BundleMeta) = match bundle {
        Some(b) => read_bundle(&b)?,
        None => {
            cfg.sim.duration = duration;
            cfg.simulate()?
        }
    };
    let mut pc = pipeline_config(&cfg, &meta)?;
    let mut rows = Vec::new();
    for enabled in [true, false] {
        pc.cache_enabled = enabled;
        let t0 = Instant::now();
        let out = run(&data, &pc)?;
        rows.push((enabled, t0.elapsed().as_secs_f64(), out));
    }
    println!("{:<8} {:>12} {:>10} {:>8} {:>10}", "cache", "steps", "tails", "misses", "wall [s]");
    for (enabled, secs, out) in &rows {
        let s = out.cache;
        println!(
            "{:<8} {:>12} {:>10} {:>8} {:>10.3}",
            if *enabled { "on" } else { "off" },
            s.integration_steps,
            s.tail_steps,
            s.misses,
            secs
        );
    }
    let (on, off) = (&rows[0].2, &rows[1].2);
    let ratio = on.cache.integration_steps as f64 / off.cache.integration_steps.max(1) as f64;
    println!("cached step ratio {:.3}", ratio);
    println!(
        "trajectories identical: {}",
        on.trajectory() == off.trajectory()
    );
    Ok(())
}

fn jacobian_check(seed: u64, instances: usize) -> CliResult {
    let reports = diagnostics::run_all(seed, instances)?;
    let mut ok = true;
    for r in &reports {
        println!("{r}");
        ok &= r.passed();
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Data(Error::Config("Jacobian tolerance exceeded".into())))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            config,
            out,
            traj,
            offset_ms,
            readout_ms,
            duration,
            seed,
        } => simulate(&config, &out, traj, offset_ms, readout_ms, duration, seed),
        Command::Run { config, bundle, out } => run_cmd(&config, &bundle, &out),
        Command::Eval {
            config,
            run,
            bundle,
            estimate,
            reference,
            offsets,
            offsets_truth,
            csv,
        } => eval_cmd(&config, run, bundle, estimate, reference, offsets, offsets_truth, csv),
        Command::BenchCache {
            config,
            bundle,
            duration,
        } => bench_cache(&config, bundle, duration),
        Command::JacobianCheck { seed, instances } => jacobian_check(seed, instances),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Data(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
