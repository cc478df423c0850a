//! Closed-form trajectories, synthetic IMU streams and rolling-shutter
//! feature tracks with injected camera-IMU offsets.

use nalgebra::{Rotation3, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Extrinsics, Mat3, Pose, Quat, Vec3, GRAVITY_MAGNITUDE};
use crate::preintegration::{ImuSample, NoiseParams};
use crate::initializer::VisionPoseSet;

/// `offset + rate·t + amplitude·sin(ω·t + phase)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Channel {
    pub offset: f64,
    pub rate: f64,
    pub amplitude: f64,
    pub omega: f64,
    pub phase: f64,
}

impl Channel {
    pub fn constant(offset: f64) -> Self {
        Self {
            offset,
            ..Self::default()
        }
    }

    pub fn sine(amplitude: f64, frequency: f64, phase: f64) -> Self {
        Self {
            amplitude,
            omega: 2.0 * std::f64::consts::PI * frequency,
            phase,
            ..Self::default()
        }
    }

    /// Value and first two derivatives.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let a = self.omega * t + self.phase;
        let (s, c) = a.sin_cos();
        (
            self.offset + self.rate * t + self.amplitude * s,
            self.rate + self.amplitude * self.omega * c,
            -self.amplitude * self.omega * self.omega * s,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrajectoryKind {
    Circle,
    Sinusoid6Dof,
    Static,
    ConstantVelocity,
}

impl TrajectoryKind {
    pub fn name(&self) -> &'static str {
        match self {
            TrajectoryKind::Circle => "circle",
            TrajectoryKind::Sinusoid6Dof => "sinusoid",
            TrajectoryKind::Static => "static",
            TrajectoryKind::ConstantVelocity => "constant-velocity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "circle" => Some(TrajectoryKind::Circle),
            "sinusoid" | "sinusoid-6dof" => Some(TrajectoryKind::Sinusoid6Dof),
            "static" => Some(TrajectoryKind::Static),
            "constant-velocity" => Some(TrajectoryKind::ConstantVelocity),
            _ => None,
        }
    }
}

/// Ground-truth kinematics at one instant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Kinematics {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
    pub rotation: Quat,
    /// Body-frame angular velocity.
    pub angular_velocity: Vec3,
}

impl Kinematics {
    pub fn pose(&self) -> Pose {
        Pose::new(self.rotation, self.position)
    }
}

/// Position channels per world axis and `Z-Y-X` Euler channels
/// `[roll, pitch, yaw]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryModel {
    pub kind: TrajectoryKind,
    pub position: [Channel; 3],
    pub euler: [Channel; 3],
    pub duration: f64,
}

impl TrajectoryModel {
    /// Horizontal circle with the body heading along the tangent, plus
    /// gentle roll, pitch and height oscillations.
    pub fn circle(radius: f64, frequency: f64, duration: f64) -> Self {
        let w = 2.0 * std::f64::consts::PI * frequency;
        Self {
            kind: TrajectoryKind::Circle,
            position: [
                Channel::sine(radius, frequency, std::f64::consts::FRAC_PI_2),
                Channel::sine(radius, frequency, 0.0),
                Channel::sine(0.2, 2.0 * frequency, 0.0),
            ],
            euler: [
                Channel::sine(0.15, 0.7, 0.3),
                Channel::sine(0.12, 0.55, 1.1),
                Channel {
                    offset: std::f64::consts::FRAC_PI_2,
                    rate: w,
                    ..Channel::sine(0.2, 0.4, 0.0)
                },
            ],
            duration,
        }
    }

    /// Six independent sinusoids; `excitation` scales every amplitude.
    pub fn sinusoid_6dof(excitation: f64, duration: f64) -> Self {
        let e = excitation;
        Self {
            kind: TrajectoryKind::Sinusoid6Dof,
            position: [
                Channel::sine(0.6 * e, 0.25, 0.0),
                Channel::sine(0.5 * e, 0.19, 0.7),
                Channel::sine(0.3 * e, 0.31, 1.9),
            ],
            euler: [
                Channel::sine(0.25 * e, 0.43, 0.4),
                Channel::sine(0.2 * e, 0.37, 2.1),
                Channel::sine(0.35 * e, 0.29, 1.3),
            ],
            duration,
        }
    }

    pub fn static_pose(duration: f64) -> Self {
        Self {
            kind: TrajectoryKind::Static,
            position: [Channel::constant(0.0); 3],
            euler: [
                Channel::constant(0.05),
                Channel::constant(-0.03),
                Channel::constant(0.4),
            ],
            duration,
        }
    }

    pub fn constant_velocity(velocity: Vec3, duration: f64) -> Self {
        let ch = |v: f64| Channel {
            rate: v,
            ..Channel::default()
        };
        Self {
            kind: TrajectoryKind::ConstantVelocity,
            position: [ch(velocity.x), ch(velocity.y), ch(velocity.z)],
            euler: [Channel::constant(0.0); 3],
            duration,
        }
    }

    /// Default model of each kind.
    pub fn of_kind(kind: TrajectoryKind, duration: f64) -> Self {
        match kind {
            TrajectoryKind::Circle => Self::circle(1.0, 0.2, duration),
            TrajectoryKind::Sinusoid6Dof => Self::sinusoid_6dof(1.0, duration),
            TrajectoryKind::Static => Self::static_pose(duration),
            TrajectoryKind::ConstantVelocity => Self::constant_velocity(Vec3::new(0.5, 0.0, 0.0), duration),
        }
    }

    pub fn sample(&self, t: f64) -> Kinematics {
        let p: Vec<(f64, f64, f64)> = self.position.iter().map(|c| c.eval(t)).collect();
        let [(r, dr, _), (pi, dp, _), (y, dy, _)] = [self.euler[0].eval(t), self.euler[1].eval(t), self.euler[2].eval(t)];
        let rot = Rotation3::from_euler_angles(r, pi, y);
        let (sr, cr) = r.sin_cos();
        let (sp, cp) = pi.sin_cos();
        let angular_velocity = Vec3::new(
            dr - dy * sp,
            dp * cr + dy * sr * cp,
            -dp * sr + dy * cr * cp,
        );
        Kinematics {
            position: Vec3::new(p[0].0, p[1].0, p[2].0),
            velocity: Vec3::new(p[0].1, p[1].1, p[2].1),
            acceleration: Vec3::new(p[0].2, p[1].2, p[2].2),
            rotation: Quat::from_rotation_matrix(&rot),
            angular_velocity,
        }
    }
}

/// Injected camera-IMU offset as a function of the frame time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OffsetProfile {
    Constant(f64),
    LinearDrift { start: f64, rate: f64 },
    Sinusoidal { mean: f64, amplitude: f64, period: f64 },
}

impl OffsetProfile {
    pub fn at(&self, t: f64) -> f64 {
        match *self {
            OffsetProfile::Constant(d) => d,
            OffsetProfile::LinearDrift { start, rate } => start + rate * t,
            OffsetProfile::Sinusoidal {
                mean,
                amplitude,
                period,
            } => mean + amplitude * (2.0 * std::f64::consts::PI * t / period).sin(),
        }
    }
}

/// IMU noise multiplied by `factor` inside `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseBurst {
    pub start: f64,
    pub end: f64,
    pub factor: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub imu_rate: f64,
    pub cam_rate: f64,
    pub noise: NoiseParams,
    /// Scales the IMU noise; `0` gives a noise-free stream.
    pub imu_noise_scale: f64,
    pub noise_burst: Option<NoiseBurst>,
    pub bias_accel: Vec3,
    pub bias_gyro: Vec3,
    pub landmark_count: usize,
    /// Landmarks are drawn in a spherical shell `[inner, outer]` around
    /// the origin.
    pub landmark_region: (f64, f64),
    pub focal_length: f64,
    pub image_width: usize,
    pub image_height: usize,
    pub max_features: usize,
    pub offset_profile: OffsetProfile,
    pub rolling_shutter_readout: f64,
    pub pixel_noise_sigma: f64,
    pub extrinsics: Extrinsics,
    /// First frame time; IMU data start at zero so negative offsets stay
    /// covered.
    pub first_frame_time: f64,
    pub seed: u64,
}

/// Body x forward, z up; camera z forward, x right, y down.
pub fn forward_camera_extrinsics() -> Extrinsics {
    let r = Mat3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0);
    Extrinsics {
        rotation: Quat::from_rotation_matrix(&Rotation3::from_matrix_unchecked(r)),
        translation: Vec3::new(0.05, 0.01, 0.02),
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            imu_rate: 200.0,
            cam_rate: 20.0,
            noise: NoiseParams::default(),
            imu_noise_scale: 1.0,
            noise_burst: None,
            bias_accel: Vec3::zeros(),
            bias_gyro: Vec3::zeros(),
            landmark_count: 800,
            landmark_region: (3.0, 6.0),
            focal_length: 460.0,
            image_width: 752,
            image_height: 480,
            max_features: 80,
            offset_profile: OffsetProfile::Constant(0.0),
            rolling_shutter_readout: 0.03,
            pixel_noise_sigma: 1.0,
            extrinsics: forward_camera_extrinsics(),
            first_frame_time: 0.25,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.imu_rate > 0.0 && self.cam_rate > 0.0) {
            return Err(Error::Config("rates must be positive".into()));
        }
        if !(self.rolling_shutter_readout >= 0.0) {
            return Err(Error::Config("readout must be non-negative".into()));
        }
        if !(self.focal_length > 0.0) || self.image_width == 0 || self.image_height == 0 {
            return Err(Error::Config("invalid camera intrinsics".into()));
        }
        Ok(())
    }

    /// Feature noise in normalized image units.
    pub fn sigma_normalized(&self) -> f64 {
        self.pixel_noise_sigma / self.focal_length
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimFrame {
    pub id: usize,
    /// Recorded timestamp `t_k` on the IMU clock.
    pub timestamp: f64,
    /// `(landmark id, normalized uv)`, sorted by landmark id.
    pub observations: Vec<(usize, Vector2<f64>)>,
    pub injected_offset: f64,
    /// Injected offset plus readout times the mean visible row fraction.
    pub effective_offset: f64,
}

/// True state at a frame's recorded timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameTruth {
    pub timestamp: f64,
    pub pose: Pose,
    pub velocity: Vec3,
    pub bias_accel: Vec3,
    pub bias_gyro: Vec3,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub imu: Vec<ImuSample>,
    pub frames: Vec<SimFrame>,
    pub truth: Vec<FrameTruth>,
    pub landmarks: Vec<Vec3>,
    pub extrinsics: Extrinsics,
    pub trajectory: TrajectoryModel,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn normal3(rng: &mut ChaCha8Rng) -> Vec3 {
    Vec3::new(normal(rng), normal(rng), normal(rng))
}

/// Simulator world gravity.
pub fn world_gravity() -> Vec3 {
    Vec3::new(0.0, 0.0, -GRAVITY_MAGNITUDE)
}

/// Noise-free specific force and angular rate from the kinematics.
pub fn ideal_imu(k: &Kinematics) -> (Vec3, Vec3) {
    let accel = k.rotation.inverse() * (k.acceleration - world_gravity());
    (k.angular_velocity, accel)
}

struct Camera<'a> {
    config: &'a SimConfig,
    extr: Pose,
}

impl Camera<'_> {
    /// Pixel coordinates of `x` seen from body pose `body`, if in view.
    fn project(&self, body: &Pose, x: &Vec3) -> Option<Vector2<f64>> {
        let cam = body.compose(&self.extr);
        let f = cam.rotation.inverse() * (x - cam.position);
        if f.z < 0.1 {
            return None;
        }
        let c = self.config;
        let u = c.focal_length * f.x / f.z + c.image_width as f64 / 2.0;
        let v = c.focal_length * f.y / f.z + c.image_height as f64 / 2.0;
        let inside = (0.0..c.image_width as f64).contains(&u) && (0.0..c.image_height as f64).contains(&v);
        inside.then_some(Vector2::new(u, v))
    }
}

/// Generates a full dataset; bit-identical for equal inputs.
pub fn generate(config: &SimConfig, traj: &TrajectoryModel) -> Result<SimOutput> {
    config.validate()?;
    if traj.duration < 2.0 / config.cam_rate {
        return Err(Error::Config("duration shorter than two frames".into()));
    }
    let mut imu_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut lm_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_1a4d);
    let mut px_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9);

    // IMU stream, with biases random-walking at IMU rate.
    let dt = 1.0 / config.imu_rate;
    let end = config.first_frame_time + traj.duration + 0.5;
    let n_imu = (end * config.imu_rate).ceil() as usize + 1;
    let mut imu = Vec::with_capacity(n_imu);
    let mut biases = Vec::with_capacity(n_imu);
    let (mut ba, mut bg) = (config.bias_accel, config.bias_gyro);
    let s = config.imu_noise_scale;
    let noise = &config.noise;
    for i in 0..n_imu {
        let t = i as f64 * dt;
        let k = traj.sample(t);
        let (gyro, accel) = ideal_imu(&k);
        let burst = config
            .noise_burst
            .filter(|b| (b.start..b.end).contains(&t))
            .map_or(1.0, |b| b.factor);
        let white = s * burst / dt.sqrt();
        imu.push(ImuSample {
            timestamp: t,
            gyro: gyro + bg + normal3(&mut imu_rng) * noise.sigma_gyro * white,
            accel: accel + ba + normal3(&mut imu_rng) * noise.sigma_accel * white,
        });
        biases.push((ba, bg));
        ba += normal3(&mut imu_rng) * noise.sigma_accel_walk * s * dt.sqrt();
        bg += normal3(&mut imu_rng) * noise.sigma_gyro_walk * s * dt.sqrt();
    }

    let (r_in, r_out) = config.landmark_region;
    let landmarks: Vec<Vec3> = (0..config.landmark_count)
        .map(|_| {
            let dir = normal3(&mut lm_rng).normalize();
            let r = lm_rng.random_range(r_in..=r_out);
            dir * r
        })
        .collect();

    let cam = Camera {
        config,
        extr: Pose::new(config.extrinsics.rotation, config.extrinsics.translation),
    };
    let n_frames = (traj.duration * config.cam_rate).floor() as usize;
    let rows = config.image_height as f64;
    let mut frames = Vec::with_capacity(n_frames);
    let mut truth = Vec::with_capacity(n_frames);
    for id in 0..n_frames {
        let t_k = config.first_frame_time + id as f64 / config.cam_rate;
        let injected = config.offset_profile.at(t_k);
        let t_cap = t_k + injected;
        let body = traj.sample(t_cap).pose();
        let mut obs = Vec::new();
        let mut row_sum = 0.0;
        for (j, x) in landmarks.iter().enumerate() {
            if obs.len() >= config.max_features {
                break;
            }
            let Some(px0) = cam.project(&body, x) else {
                continue;
            };
            let px = if config.rolling_shutter_readout > 0.0 {
                let t_row = t_cap + px0.y / rows * config.rolling_shutter_readout;
                match cam.project(&traj.sample(t_row).pose(), x) {
                    Some(p) => p,
                    None => continue,
                }
            } else {
                px0
            };
            row_sum += px.y / rows;
            let noisy = px
                + Vector2::new(normal(&mut px_rng), normal(&mut px_rng)) * config.pixel_noise_sigma;
            let uv = Vector2::new(
                (noisy.x - config.image_width as f64 / 2.0) / config.focal_length,
                (noisy.y - rows / 2.0) / config.focal_length,
            );
            obs.push((j, uv));
        }
        if obs.is_empty() {
            return Err(Error::NoVisibleLandmarks(id));
        }
        let mean_row = row_sum / obs.len() as f64;
        frames.push(SimFrame {
            id,
            timestamp: t_k,
            effective_offset: injected + config.rolling_shutter_readout * mean_row,
            injected_offset: injected,
            observations: obs,
        });
        let k = traj.sample(t_k);
        let idx = ((t_k * config.imu_rate).round() as usize).min(n_imu - 1);
        truth.push(FrameTruth {
            timestamp: t_k,
            pose: k.pose(),
            velocity: k.velocity,
            bias_accel: biases[idx].0,
            bias_gyro: biases[idx].1,
        });
    }
    Ok(SimOutput {
        imu,
        frames,
        truth,
        landmarks,
        extrinsics: config.extrinsics,
        trajectory: *traj,
    })
}

/// Ground-truth camera poses at the capture instants of the first `k`
/// frames, expressed in the first camera frame and divided by `scale`.
/// Rotations get independent `sigma_rot` radian noise. Each consecutive
/// displacement gets noise of `sigma_pos` times its length, accumulated
/// along the sequence the way drift builds up in bundle adjustment.
pub fn perturbed_vision_poses(
    output: &SimOutput,
    k: usize,
    sigma_rot: f64,
    sigma_pos: f64,
    scale: f64,
    seed: u64,
) -> VisionPoseSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let extr = Pose::new(output.extrinsics.rotation, output.extrinsics.translation);
    let cams: Vec<(f64, Pose)> = output
        .frames
        .iter()
        .take(k)
        .map(|f| {
            let body = output.trajectory.sample(f.timestamp + f.injected_offset).pose();
            (f.timestamp, body.compose(&extr))
        })
        .collect();
    let c0_inv = cams.first().map(|c| c.1.inverse()).unwrap_or_else(Pose::identity);
    let mut entries = Vec::with_capacity(cams.len());
    let mut prev_true = Vec3::zeros();
    let mut prev_noisy = Vec3::zeros();
    for (i, (t, c)) in cams.iter().enumerate() {
        let rel = c0_inv.compose(c);
        if i == 0 {
            entries.push((*t, Quat::identity(), Vec3::zeros()));
            continue;
        }
        let p = rel.position / scale;
        let step = p - prev_true;
        let noisy = prev_noisy + step + normal3(&mut rng) * (sigma_pos * step.norm());
        let dr = exp_so3(&(normal3(&mut rng) * sigma_rot));
        entries.push((*t, rel.rotation * dr, noisy));
        prev_true = p;
        prev_noisy = noisy;
    }
    VisionPoseSet { entries }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quiet() -> SimConfig {
        SimConfig {
            imu_noise_scale: 0.0,
            pixel_noise_sigma: 0.0,
            rolling_shutter_readout: 0.0,
            ..SimConfig::default()
        }
    }

    #[test]
    fn static_imu_reads_gravity_reaction() {
        let traj = TrajectoryModel::static_pose(2.0);
        let out = generate(&quiet(), &traj).unwrap();
        let r = traj.sample(0.0).rotation;
        let expect = r.inverse() * Vec3::new(0.0, 0.0, 9.8);
        for s in &out.imu {
            assert_eq!(s.gyro, Vec3::zeros());
            assert!((s.accel - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn global_shutter_matches_projection() {
        let traj = TrajectoryModel::circle(1.0, 0.2, 2.0);
        let c = quiet();
        let out = generate(&c, &traj).unwrap();
        let extr = Pose::new(c.extrinsics.rotation, c.extrinsics.translation);
        for (f, t) in out.frames.iter().zip(&out.truth) {
            let cam = t.pose.compose(&extr);
            for (j, uv) in &f.observations {
                let p = cam.rotation.inverse() * (out.landmarks[*j] - cam.position);
                assert!((Vector2::new(p.x / p.z, p.y / p.z) - uv).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn circle_derivatives_match_finite_differences() {
        let traj = TrajectoryModel::circle(1.0, 0.2, 10.0);
        let h = 1e-4;
        for i in 0..50 {
            let t = 0.2 * i as f64;
            let k = traj.sample(t);
            let p = |t: f64| traj.sample(t).position;
            let v = |t: f64| traj.sample(t).velocity;
            assert!(((p(t + h) - p(t - h)) / (2.0 * h) - k.velocity).norm() < 1e-6);
            assert!(((v(t + h) - v(t - h)) / (2.0 * h) - k.acceleration).norm() < 1e-6);
            let r0 = traj.sample(t - h).rotation;
            let r1 = traj.sample(t + h).rotation;
            let w = (r0.inverse() * r1).scaled_axis() / (2.0 * h);
            assert!((w - k.angular_velocity).norm() < 1e-6);
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let traj = TrajectoryModel::sinusoid_6dof(1.0, 3.0);
        let c = SimConfig {
            seed: 42,
            ..SimConfig::default()
        };
        let a = generate(&c, &traj).unwrap();
        assert_eq!(a, generate(&c, &traj).unwrap());
        let other = SimConfig { seed: 43, ..c };
        assert_ne!(a.imu, generate(&other, &traj).unwrap().imu);
    }

    #[test]
    fn vision_poses_scale_and_identity() {
        let traj = TrajectoryModel::circle(1.0, 0.2, 2.0);
        let out = generate(&quiet(), &traj).unwrap();
        let a = perturbed_vision_poses(&out, 10, 0.0, 0.0, 1.0, 1);
        let b = perturbed_vision_poses(&out, 10, 0.0, 0.0, 2.0, 1);
        assert_eq!(a.entries[0].1, Quat::identity());
        for (x, y) in a.entries.iter().zip(&b.entries) {
            assert!((x.2 * 0.5 - y.2).norm() < 1e-12);
            assert!(x.1.angle_to(&y.1) < 1e-12);
        }
    }

    #[test]
    fn sinusoidal_offset_bookkeeping() {
        let traj = TrajectoryModel::circle(1.0, 0.2, 4.0);
        let c = SimConfig {
            offset_profile: OffsetProfile::Sinusoidal {
                mean: 0.0,
                amplitude: 0.02,
                period: 20.0,
            },
            rolling_shutter_readout: 0.03,
            ..quiet()
        };
        let out = generate(&c, &traj).unwrap();
        for f in &out.frames {
            assert!((f.injected_offset - c.offset_profile.at(f.timestamp)).abs() < 1e-15);
            let rs = f.effective_offset - f.injected_offset;
            assert!(rs > 0.0 && rs < 0.03);
        }
    }
}
