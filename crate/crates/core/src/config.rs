//! Run configuration: one strict TOML document with `sim`, `noise`,
//! `window`, `init` and `eval` sections.
//!
//! Every key has a default, so an empty document is valid. Unknown keys and
//! sections are rejected before anything runs. Environment variables named
//! `VIO_<SECTION>_<KEY>` override file values, e.g. `VIO_WINDOW_HUBER=2`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::initializer::{InitConfig, VisionNoise, Weighting};
use crate::io::{BundleMeta, ExtrinsicsMeta, VisionMeta};
use crate::pipeline::{Dataset, PipelineConfig};
use crate::preintegration::NoiseParams;
use crate::simulator::{generate, OffsetProfile, SimConfig, TrajectoryKind, TrajectoryModel};
use crate::solver::{OffsetMode, WindowConfig};

pub const ENV_PREFIX: &str = "VIO_";

const SECTIONS: [&str; 5] = ["sim", "noise", "window", "init", "eval"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub trajectory: String,
    /// Seconds of camera data.
    pub duration: f64,
    /// Amplitude multiplier of the sinusoid trajectory.
    pub excitation: f64,
    pub imu_rate: f64,
    pub cam_rate: f64,
    /// "constant", "linear" or "sinusoidal".
    pub offset_profile: String,
    pub offset_ms: f64,
    pub offset_drift_ms_per_s: f64,
    pub offset_amplitude_ms: f64,
    pub offset_period: f64,
    pub readout_ms: f64,
    pub pixel_noise: f64,
    pub imu_noise_scale: f64,
    pub landmark_count: usize,
    pub max_features: usize,
    pub focal_length: f64,
    pub seed: u64,
    /// Leading frames that get simulated vision-only poses.
    pub vision_frames: usize,
    pub vision_sigma_rot: f64,
    pub vision_sigma_pos: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        Self {
            trajectory: "sinusoid-6dof".into(),
            duration: 30.0,
            excitation: 1.0,
            imu_rate: 200.0,
            cam_rate: 20.0,
            offset_profile: "constant".into(),
            offset_ms: 0.0,
            offset_drift_ms_per_s: 0.0,
            offset_amplitude_ms: 20.0,
            offset_period: 20.0,
            readout_ms: 30.0,
            pixel_noise: 1.0,
            imu_noise_scale: 1.0,
            landmark_count: 800,
            max_features: 80,
            focal_length: 460.0,
            seed: 0,
            vision_frames: 40,
            vision_sigma_rot: 1e-3,
            vision_sigma_pos: 0.01,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseSection {
    pub sigma_gyro: f64,
    pub sigma_accel: f64,
    pub sigma_gyro_walk: f64,
    pub sigma_accel_walk: f64,
}

impl Default for NoiseSection {
    fn default() -> Self {
        let n = NoiseParams::default();
        Self {
            sigma_gyro: n.sigma_gyro,
            sigma_accel: n.sigma_accel,
            sigma_gyro_walk: n.sigma_gyro_walk,
            sigma_accel_walk: n.sigma_accel_walk,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowSection {
    pub n_keyframes: usize,
    pub n_nonkeyframes: usize,
    pub max_iterations: usize,
    /// Pixel quantities are converted with this focal length.
    pub focal_length: f64,
    pub keyframe_parallax_px: f64,
    pub keyframe_track_ratio: f64,
    pub max_offset: f64,
    pub gravity: f64,
    pub sigma_offset_walk: f64,
    /// "per-frame" or "shared".
    pub offset_mode: String,
    pub sigma_uv_px: f64,
    pub huber: f64,
    pub estimate_extrinsics: bool,
    pub relinearize_bias_thresh: f64,
    pub min_triangulation_angle_deg: f64,
    pub max_speed: f64,
}

impl Default for WindowSection {
    fn default() -> Self {
        let w = WindowConfig::default();
        Self {
            n_keyframes: w.n_keyframes,
            n_nonkeyframes: w.n_nonkeyframes,
            max_iterations: w.lm.max_iterations,
            focal_length: 460.0,
            keyframe_parallax_px: 10.0,
            keyframe_track_ratio: w.keyframe_track_ratio_thresh,
            max_offset: w.max_offset,
            gravity: w.gravity_magnitude,
            sigma_offset_walk: w.offset_model.sigma_offset_walk,
            offset_mode: "per-frame".into(),
            sigma_uv_px: 1.5,
            huber: w.huber,
            estimate_extrinsics: w.estimate_extrinsics,
            relinearize_bias_thresh: w.relinearize_bias_thresh,
            min_triangulation_angle_deg: 1.0,
            max_speed: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    pub frames: usize,
    /// "mahalanobis" or "identity".
    pub weighting: String,
    pub max_condition: f64,
    /// Fold the dataset's recorded vision-pose noise into the weights.
    pub use_vision_noise: bool,
}

impl Default for InitSection {
    fn default() -> Self {
        Self {
            frames: 40,
            weighting: "mahalanobis".into(),
            max_condition: InitConfig::default().max_condition,
            use_vision_noise: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    /// Seconds within which estimate and reference stamps are matched;
    /// half the camera period by default.
    pub association_tolerance: f64,
    pub segments: Vec<f64>,
    pub offset_band_ms: f64,
    /// Seconds the offset error must stay in band to count as converged.
    pub offset_hold: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            association_tolerance: 0.025,
            segments: crate::evaluation::DEFAULT_SEGMENTS.to_vec(),
            offset_band_ms: 3.0,
            offset_hold: 2.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub sim: SimSection,
    pub noise: NoiseSection,
    pub window: WindowSection,
    pub init: InitSection,
    pub eval: EvalSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with_env(text, std::iter::empty::<(String, String)>())
    }

    /// Parses `text`, then applies `VIO_*` overrides from `env`.
    pub fn parse_with_env<I, K, V>(text: &str, env: I) -> Result<Self>
    where
        I: IntoIterator<Item = (K, V)>,
        K: AsRef<str>,
        V: AsRef<str>,
    {
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let mut overrides: Vec<(String, String)> = env
            .into_iter()
            .filter(|(k, _)| k.as_ref().starts_with(ENV_PREFIX))
            .map(|(k, v)| (k.as_ref().to_string(), v.as_ref().to_string()))
            .collect();
        overrides.sort();
        for (name, value) in overrides {
            apply_override(&mut table, &name, &value)?;
        }
        let cfg: RunConfig = table.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.trajectory_kind()?;
        self.offset_profile()?;
        self.offset_mode()?;
        self.weighting()?;
        if !(self.sim.duration > 0.0) {
            return Err(Error::Config("sim.duration must be positive".into()));
        }
        if !(self.window.focal_length > 0.0) {
            return Err(Error::Config("window.focal_length must be positive".into()));
        }
        if !(self.eval.association_tolerance > 0.0) {
            return Err(Error::Config("eval.association_tolerance must be positive".into()));
        }
        self.noise_params().validate()
    }

    fn trajectory_kind(&self) -> Result<TrajectoryKind> {
        TrajectoryKind::parse(&self.sim.trajectory)
            .ok_or_else(|| Error::Config(format!("unknown trajectory '{}'", self.sim.trajectory)))
    }

    fn offset_profile(&self) -> Result<OffsetProfile> {
        let s = &self.sim;
        match s.offset_profile.as_str() {
            "constant" => Ok(OffsetProfile::Constant(s.offset_ms * 1e-3)),
            "linear" => Ok(OffsetProfile::LinearDrift {
                start: s.offset_ms * 1e-3,
                rate: s.offset_drift_ms_per_s * 1e-3,
            }),
            "sinusoidal" => {
                if !(s.offset_period > 0.0) {
                    return Err(Error::Config("sim.offset_period must be positive".into()));
                }
                Ok(OffsetProfile::Sinusoidal {
                    mean: s.offset_ms * 1e-3,
                    amplitude: s.offset_amplitude_ms * 1e-3,
                    period: s.offset_period,
                })
            }
            other => Err(Error::Config(format!("unknown offset profile '{other}'"))),
        }
    }

    fn offset_mode(&self) -> Result<OffsetMode> {
        match self.window.offset_mode.as_str() {
            "per-frame" => Ok(OffsetMode::PerFrame),
            "shared" => Ok(OffsetMode::Shared),
            other => Err(Error::Config(format!("unknown offset mode '{other}'"))),
        }
    }

    fn weighting(&self) -> Result<Weighting> {
        match self.init.weighting.as_str() {
            "mahalanobis" => Ok(Weighting::Mahalanobis),
            "identity" => Ok(Weighting::Identity),
            other => Err(Error::Config(format!("unknown weighting '{other}'"))),
        }
    }

    pub fn noise_params(&self) -> NoiseParams {
        NoiseParams {
            sigma_gyro: self.noise.sigma_gyro,
            sigma_accel: self.noise.sigma_accel,
            sigma_gyro_walk: self.noise.sigma_gyro_walk,
            sigma_accel_walk: self.noise.sigma_accel_walk,
        }
    }

    pub fn sim_config(&self) -> Result<SimConfig> {
        let s = &self.sim;
        Ok(SimConfig {
            imu_rate: s.imu_rate,
            cam_rate: s.cam_rate,
            noise: self.noise_params(),
            imu_noise_scale: s.imu_noise_scale,
            landmark_count: s.landmark_count,
            max_features: s.max_features,
            focal_length: s.focal_length,
            offset_profile: self.offset_profile()?,
            rolling_shutter_readout: s.readout_ms * 1e-3,
            pixel_noise_sigma: s.pixel_noise,
            seed: s.seed,
            ..SimConfig::default()
        })
    }

    pub fn trajectory(&self) -> Result<TrajectoryModel> {
        Ok(match self.trajectory_kind()? {
            TrajectoryKind::Sinusoid6Dof => TrajectoryModel::sinusoid_6dof(self.sim.excitation, self.sim.duration),
            kind => TrajectoryModel::of_kind(kind, self.sim.duration),
        })
    }

    /// Estimator settings; `vision_noise` comes from the dataset.
    pub fn pipeline_config(&self, vision_noise: Option<VisionNoise>) -> Result<PipelineConfig> {
        let w = &self.window;
        let mut window = WindowConfig {
            n_keyframes: w.n_keyframes,
            n_nonkeyframes: w.n_nonkeyframes,
            keyframe_parallax_thresh: w.keyframe_parallax_px / w.focal_length,
            keyframe_track_ratio_thresh: w.keyframe_track_ratio,
            max_offset: w.max_offset,
            gravity_magnitude: w.gravity,
            noise: self.noise_params(),
            offset_mode: self.offset_mode()?,
            sigma_uv: w.sigma_uv_px / w.focal_length,
            huber: w.huber,
            estimate_extrinsics: w.estimate_extrinsics,
            relinearize_bias_thresh: w.relinearize_bias_thresh,
            min_triangulation_angle: w.min_triangulation_angle_deg.to_radians(),
            ..WindowConfig::default()
        };
        window.lm.max_iterations = w.max_iterations;
        window.offset_model.sigma_offset_walk = w.sigma_offset_walk;
        window.validate()?;
        let init = InitConfig {
            weighting: self.weighting()?,
            max_condition: self.init.max_condition,
            vision_noise: if self.init.use_vision_noise { vision_noise } else { None },
            ..InitConfig::default()
        };
        Ok(PipelineConfig {
            window,
            init,
            init_frames: self.init.frames,
            max_speed: w.max_speed,
            cache_enabled: true,
        })
    }
}

impl RunConfig {
    /// Simulates the dataset described by the `sim` section.
    pub fn simulate(&self) -> Result<(Dataset, BundleMeta)> {
        let s = &self.sim;
        let out = generate(&self.sim_config()?, &self.trajectory()?)?;
        let vision = (s.vision_frames > 0).then_some((
            s.vision_frames,
            s.vision_sigma_rot,
            s.vision_sigma_pos,
            1.0,
            s.seed ^ VISION_SEED_SALT,
        ));
        let data = Dataset::from_sim(&out, vision);
        let meta = BundleMeta {
            time_origin_ns: Some(0),
            extrinsics: ExtrinsicsMeta::from(&out.extrinsics),
            vision: vision.map(|_| VisionMeta {
                sigma_rot: s.vision_sigma_rot,
                sigma_pos: s.vision_sigma_pos,
            }),
            sim: Some(s.clone()),
        };
        Ok((data, meta))
    }
}

const VISION_SEED_SALT: u64 = 0x7669_7369_6f6e;

fn apply_override(table: &mut toml::Table, name: &str, value: &str) -> Result<()> {
    let rest = &name[ENV_PREFIX.len()..];
    let (section, key) = rest
        .split_once('_')
        .map(|(s, k)| (s.to_ascii_lowercase(), k.to_ascii_lowercase()))
        .ok_or_else(|| Error::Config(format!("environment variable {name} names no key")))?;
    if !SECTIONS.contains(&section.as_str()) || key.is_empty() {
        return Err(Error::Config(format!("environment variable {name} matches no config key")));
    }
    // Values are TOML literals; anything that does not parse is a bare string.
    let parsed = format!("v = {value}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(value.to_string()));
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key, parsed);
            Ok(())
        }
        _ => Err(Error::Config(format!("'{section}' is not a section"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        let p = cfg.pipeline_config(None).unwrap();
        assert_eq!(p.window.n_keyframes, 8);
        assert_eq!(p.window.n_nonkeyframes, 3);
        assert!((p.window.sigma_uv - 1.5 / 460.0).abs() < 1e-15);
    }

    #[test]
    fn unknown_key_is_rejected() {
        let err = RunConfig::parse("[window]\nhubber = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("hubber"), "{err}");
        assert!(RunConfig::parse("[solver]\nx = 1\n").is_err());
        assert!(RunConfig::parse("seed = 3\n").is_err());
    }

    #[test]
    fn bad_enum_values_are_rejected() {
        assert!(RunConfig::parse("[sim]\ntrajectory = \"spiral\"\n").is_err());
        assert!(RunConfig::parse("[window]\noffset_mode = \"both\"\n").is_err());
        assert!(RunConfig::parse("[init]\nweighting = \"l1\"\n").is_err());
    }

    #[test]
    fn env_overrides_file() {
        let cfg = RunConfig::parse_with_env(
            "[window]\nhuber = 1.0\n",
            [("VIO_WINDOW_HUBER", "2.5"), ("VIO_SIM_TRAJECTORY", "circle"), ("PATH", "/bin")],
        )
        .unwrap();
        assert_eq!(cfg.window.huber, 2.5);
        assert_eq!(cfg.sim.trajectory, "circle");
        let cfg = RunConfig::parse_with_env("", [("VIO_SIM_SEED", "7")]).unwrap();
        assert_eq!(cfg.sim.seed, 7);
    }

    #[test]
    fn unknown_env_override_is_rejected() {
        assert!(RunConfig::parse_with_env("", [("VIO_WINDOW_NOPE", "1")]).is_err());
        assert!(RunConfig::parse_with_env("", [("VIO_SOLVER_X", "1")]).is_err());
        assert!(RunConfig::parse_with_env("", [("VIO_", "1")]).is_err());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.sim.offset_ms = 30.0;
        cfg.window.offset_mode = "shared".into();
        cfg.eval.segments = vec![0.5, 3.0];
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn sim_offsets_convert_to_seconds() {
        let cfg = RunConfig::parse("[sim]\noffset_profile = \"sinusoidal\"\noffset_amplitude_ms = 20\n").unwrap();
        let sim = cfg.sim_config().unwrap();
        assert_eq!(
            sim.offset_profile,
            OffsetProfile::Sinusoidal {
                mean: 0.0,
                amplitude: 0.02,
                period: 20.0
            }
        );
        assert!((sim.rolling_shutter_readout - 0.03).abs() < 1e-15);
    }
}
