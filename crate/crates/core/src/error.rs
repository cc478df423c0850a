use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("IMU buffer does not cover [{start:.6}, {end:.6}] s")]
    InsufficientImuData { start: f64, end: f64 },
    #[error("non-monotonic timestamps at sample {index}")]
    NonMonotonicTimestamps { index: usize },
    #[error("bias correction of {distance:.4} exceeds bound {bound}")]
    BiasCorrectionOutOfRange { distance: f64, bound: f64 },
    #[error("cache linearization bias is stale by {distance:.4} (bound {bound})")]
    StaleBias { distance: f64, bound: f64 },
    #[error("no integration cache for frame at t = {0:.6} s")]
    UnknownFrame(f64),
    #[error("landmark depth {depth:.3e} is behind the camera")]
    BehindCamera { depth: f64 },
    #[error("covariance is not positive definite")]
    NonPsdCovariance,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("normal equations are singular")]
    SingularNormalEquations,
    #[error("cost diverged after {rejects} consecutive rejected steps")]
    DivergedCost { rejects: usize },
    #[error("marginalization sub-block is singular")]
    SingularSubBlock,
    #[error("frame timestamp {new:.6} is not after the last window frame {last:.6}")]
    NonMonotonicFrame { new: f64, last: f64 },
    #[error("degenerate motion: condition number {0:.3e}")]
    DegenerateMotion(f64),
    #[error("non-positive scale {0}")]
    NonPositiveScale(f64),
    #[error("initialization needs at least {needed} frames, got {got}")]
    NotEnoughFrames { needed: usize, got: usize },
    #[error("gravity magnitude {0:.3} outside the sanity range")]
    ImplausibleGravity(f64),
    #[error("no landmark visible in frame {0}")]
    NoVisibleLandmarks(usize),
    #[error("only {0} associated poses, need at least 3")]
    InsufficientCorrespondences(usize),
    #[error("estimator diverged at frame {frame}")]
    EstimatorDiverged { frame: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("{path}:{line}: timestamp is not strictly increasing")]
    NonMonotonicFile { path: PathBuf, line: usize },
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
