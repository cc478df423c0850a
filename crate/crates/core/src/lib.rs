//! Visual-inertial odometry with online camera-IMU time-offset estimation.

pub mod config;
pub mod diagnostics;
pub mod error;
pub mod evaluation;
pub mod factors;
pub mod geometry;
pub mod initializer;
pub mod io;
pub mod pipeline;
pub mod integration_cache;
pub mod preintegration;
pub mod simulator;
pub mod solver;

pub use error::{Error, Result};
