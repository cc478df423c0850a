use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix4, Vector2, Vector4};

use crate::error::{Error, Result};
use crate::factors::{
    bias_walk_residual, inertial_residual, offset_walk_residual, pose_at_offset, prior_residual,
    visual_residual, PriorFactor, ResidualBlock, TimeOffsetModel, VarId, VarValue, VisualObservation,
};
use crate::geometry::{gravity_vector, Extrinsics, FrameState, Pose, Vec3, GRAVITY_MAGNITUDE};
use crate::integration_cache::CacheBank;
use crate::preintegration::{bias_distance, integrate_delta, NoiseParams, PreintegrationDelta};

use super::{levenberg_marquardt, marginalize, LeastSquaresProblem, LmConfig, OptimizationReport};

/// How camera-IMU time offsets are parameterized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OffsetMode {
    /// One offset per frame tied by a random walk.
    PerFrame,
    /// A single offset for the whole run.
    Shared,
}

/// Standard deviations of the prior placed on the first frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BootstrapPrior {
    pub position: f64,
    pub yaw: f64,
    pub roll_pitch: f64,
    pub velocity: f64,
    pub bias_accel: f64,
    pub bias_gyro: f64,
    pub extrinsic_translation: f64,
    pub extrinsic_rotation: f64,
    pub offset: f64,
}

impl Default for BootstrapPrior {
    fn default() -> Self {
        Self {
            position: 1e-4,
            yaw: 1e-4,
            roll_pitch: 0.05,
            velocity: 1.0,
            bias_accel: 0.1,
            bias_gyro: 0.01,
            extrinsic_translation: 0.01,
            extrinsic_rotation: 0.01,
            offset: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowConfig {
    pub n_keyframes: usize,
    pub n_nonkeyframes: usize,
    pub lm: LmConfig,
    /// Mean rotation-compensated feature motion, normalized image units.
    pub keyframe_parallax_thresh: f64,
    pub keyframe_track_ratio_thresh: f64,
    /// Offsets are clamped into `±max_offset` seconds.
    pub max_offset: f64,
    pub gravity_magnitude: f64,
    pub noise: NoiseParams,
    pub offset_model: TimeOffsetModel,
    pub offset_mode: OffsetMode,
    /// Feature noise in normalized image units.
    pub sigma_uv: f64,
    pub huber: f64,
    pub estimate_extrinsics: bool,
    /// Links are re-integrated when a frame's bias moves this far.
    pub relinearize_bias_thresh: f64,
    pub min_triangulation_angle: f64,
    pub depth_epsilon: f64,
    pub prior: BootstrapPrior,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self {
            n_keyframes: 8,
            n_nonkeyframes: 3,
            lm: LmConfig::default(),
            keyframe_parallax_thresh: 10.0 / 460.0,
            keyframe_track_ratio_thresh: 0.5,
            max_offset: 0.2,
            gravity_magnitude: GRAVITY_MAGNITUDE,
            noise: NoiseParams::default(),
            offset_model: TimeOffsetModel::default(),
            offset_mode: OffsetMode::PerFrame,
            sigma_uv: 1.5 / 460.0,
            huber: 1.0,
            estimate_extrinsics: true,
            relinearize_bias_thresh: 1e-3,
            min_triangulation_angle: 1.0_f64.to_radians(),
            depth_epsilon: 0.05,
            prior: BootstrapPrior::default(),
        }
    }
}

impl WindowConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_keyframes < 1 || self.n_nonkeyframes < 1 {
            return Err(Error::Config("window counts must be at least 1".into()));
        }
        if !(self.max_offset > 0.0) || !(self.sigma_uv > 0.0) || !(self.huber > 0.0) {
            return Err(Error::Config(
                "max_offset, sigma_uv and huber must be positive".into(),
            ));
        }
        if !(self.offset_model.sigma_offset_walk > 0.0) {
            return Err(Error::Config("offset walk sigma must be positive".into()));
        }
        self.noise.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowFrame {
    pub id: usize,
    pub state: FrameState,
    pub keyframe: bool,
    /// Feature id to normalized image coordinates.
    pub observations: BTreeMap<usize, Vector2<f64>>,
}

/// A frame that left the window, with its final estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExitedFrame {
    pub id: usize,
    pub state: FrameState,
    pub keyframe: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WindowStats {
    pub promoted: usize,
    pub dropped_nonkeyframes: usize,
    pub marginalized_keyframes: usize,
    pub regularized_marginalizations: usize,
}

type Snapshot = (Vec<FrameState>, BTreeMap<usize, Vec3>, Extrinsics, f64);

/// The sliding-window estimation problem.
#[derive(Debug, Clone)]
pub struct WindowProblem {
    config: WindowConfig,
    frames: Vec<WindowFrame>,
    /// `links[i]` spans `frames[i] → frames[i + 1]`.
    links: Vec<PreintegrationDelta>,
    landmarks: BTreeMap<usize, Vec3>,
    extrinsics: Extrinsics,
    shared_offset: f64,
    prior: PriorFactor,
    bank: CacheBank,
    exited: Vec<ExitedFrame>,
    next_id: usize,
    gravity: Vec3,
    stats: WindowStats,
}

fn empty_prior() -> PriorFactor {
    PriorFactor {
        vars: Vec::new(),
        h: DMatrix::zeros(0, 0),
        b: DVector::zeros(0),
        linearization: Vec::new(),
    }
}

impl WindowProblem {
    pub fn new(config: WindowConfig, bank: CacheBank, extrinsics: Extrinsics) -> Result<Self> {
        config.validate()?;
        let gravity = gravity_vector(config.gravity_magnitude);
        Ok(Self {
            config,
            frames: Vec::new(),
            links: Vec::new(),
            landmarks: BTreeMap::new(),
            extrinsics,
            shared_offset: 0.0,
            prior: empty_prior(),
            bank,
            exited: Vec::new(),
            next_id: 0,
            gravity,
            stats: WindowStats::default(),
        })
    }

    pub fn config(&self) -> &WindowConfig {
        &self.config
    }

    pub fn frames(&self) -> &[WindowFrame] {
        &self.frames
    }

    pub fn landmarks(&self) -> &BTreeMap<usize, Vec3> {
        &self.landmarks
    }

    pub fn extrinsics(&self) -> &Extrinsics {
        &self.extrinsics
    }

    pub fn prior(&self) -> &PriorFactor {
        &self.prior
    }

    pub fn bank(&self) -> &CacheBank {
        &self.bank
    }

    pub fn bank_mut(&mut self) -> &mut CacheBank {
        &mut self.bank
    }

    pub fn exited(&self) -> &[ExitedFrame] {
        &self.exited
    }

    pub fn stats(&self) -> WindowStats {
        self.stats
    }

    pub fn gravity(&self) -> Vec3 {
        self.gravity
    }

    pub fn n_keyframes(&self) -> usize {
        self.frames.iter().filter(|f| f.keyframe).count()
    }

    pub fn n_nonkeyframes(&self) -> usize {
        self.frames.len() - self.n_keyframes()
    }

    /// Error-state dimension of everything except landmarks.
    pub fn trajectory_dimension(&self) -> usize {
        let per_frame = match self.config.offset_mode {
            OffsetMode::PerFrame => 16,
            OffsetMode::Shared => 15,
        };
        let extra = usize::from(self.config.offset_mode == OffsetMode::Shared && !self.frames.is_empty())
            + if self.config.estimate_extrinsics { 6 } else { 0 };
        self.frames.len() * per_frame + extra
    }

    pub fn dimension(&self) -> usize {
        self.trajectory_dimension() + 3 * self.landmarks.len()
    }

    fn offset_var(&self, id: usize) -> VarId {
        match self.config.offset_mode {
            OffsetMode::PerFrame => VarId::Offset(id),
            OffsetMode::Shared => VarId::SharedOffset,
        }
    }

    fn frame_index(&self, id: usize) -> Option<usize> {
        self.frames.iter().position(|f| f.id == id)
    }

    pub fn value(&self, var: VarId) -> Option<VarValue> {
        match var {
            VarId::Motion(id) => self.frame_index(id).map(|i| VarValue::Motion(self.frames[i].state)),
            VarId::Offset(id) => self
                .frame_index(id)
                .map(|i| VarValue::Offset(self.frames[i].state.time_offset)),
            VarId::SharedOffset => Some(VarValue::Offset(self.shared_offset)),
            VarId::Extrinsics => Some(VarValue::Extrinsics(self.extrinsics)),
            VarId::Landmark(id) => self.landmarks.get(&id).map(|l| VarValue::Landmark(*l)),
        }
    }

    /// Predicts the state at `t` by IMU propagation from the newest frame.
    pub fn predict(&self, t: f64) -> Result<FrameState> {
        let last = self.frames.last().ok_or(Error::NotEnoughFrames { needed: 1, got: 0 })?;
        let s = &last.state;
        let delta = integrate_delta(
            self.bank.samples(),
            &s.bias_accel,
            &s.bias_gyro,
            s.timestamp,
            t,
            &self.config.noise,
        )?;
        let dt = t - s.timestamp;
        let r = s.pose.rotation;
        let position = s.pose.position + s.velocity * dt - 0.5 * self.gravity * dt * dt + r * delta.alpha;
        let velocity = s.velocity - self.gravity * dt + r * delta.beta;
        Ok(FrameState {
            timestamp: t,
            pose: Pose::new(r * delta.dq, position),
            velocity,
            ..*s
        })
    }

    /// Adds a frame as a non-keyframe and maintains the window.
    ///
    /// The new offset is seeded from the newest frame; the first frame keeps
    /// the offset it comes with and receives the bootstrap prior.
    pub fn insert_frame(&mut self, mut state: FrameState, observations: &[(usize, Vector2<f64>)]) -> Result<()> {
        if let Some(last) = self.frames.last() {
            if !(state.timestamp > last.state.timestamp) {
                return Err(Error::NonMonotonicFrame {
                    new: state.timestamp,
                    last: last.state.timestamp,
                });
            }
            state.time_offset = last.state.time_offset;
        } else if self.config.offset_mode == OffsetMode::Shared {
            self.shared_offset = state.time_offset;
        }
        if self.config.offset_mode == OffsetMode::Shared {
            state.time_offset = self.shared_offset;
        }
        let link = match self.frames.last() {
            Some(prev) => Some(self.integrate_link(&prev.state, state.timestamp)?),
            None => None,
        };
        let id = self.next_id;
        self.next_id += 1;
        self.bank.insert_frame(state.timestamp, state.bias_accel, state.bias_gyro);
        let first = self.frames.is_empty();
        self.frames.push(WindowFrame {
            id,
            state,
            keyframe: first,
            observations: observations.iter().copied().collect(),
        });
        if let Some(l) = link {
            self.links.push(l);
        }
        if first && self.prior.is_empty() {
            self.prior = self.bootstrap_prior();
        }
        self.maintain()
    }

    fn integrate_link(&self, from: &FrameState, t_end: f64) -> Result<PreintegrationDelta> {
        integrate_delta(
            self.bank.samples(),
            &from.bias_accel,
            &from.bias_gyro,
            from.timestamp,
            t_end,
            &self.config.noise,
        )
    }

    fn bootstrap_prior(&self) -> PriorFactor {
        let p = &self.config.prior;
        let f = &self.frames[0];
        let r = f.state.pose.rotation.to_rotation_matrix().into_inner();
        let mut vars = vec![VarId::Motion(f.id), self.offset_var(f.id)];
        let mut linearization = vec![
            VarValue::Motion(f.state),
            VarValue::Offset(f.state.time_offset),
        ];
        let extr = self.config.estimate_extrinsics;
        if extr {
            vars.push(VarId::Extrinsics);
            linearization.push(VarValue::Extrinsics(self.extrinsics));
        }
        let n = 16 + if extr { 6 } else { 0 };
        let mut h = DMatrix::zeros(n, n);
        for i in 0..3 {
            h[(i, i)] = 1.0 / p.position;
            h[(3 + i, 3 + i)] = 1.0 / p.velocity;
            h[(9 + i, 9 + i)] = 1.0 / p.bias_accel;
            h[(12 + i, 12 + i)] = 1.0 / p.bias_gyro;
        }
        // World-frame rotation rows: a body perturbation δθ turns the
        // world attitude by about 2·R·δθ.
        let sig = [p.roll_pitch, p.roll_pitch, p.yaw];
        for axis in 0..3 {
            let row = r.row(axis) * (2.0 / sig[axis]);
            for c in 0..3 {
                h[(6 + axis, 6 + c)] = row[c];
            }
        }
        h[(15, 15)] = 1.0 / p.offset;
        if extr {
            for i in 0..3 {
                h[(16 + i, 16 + i)] = 1.0 / p.extrinsic_translation;
                h[(19 + i, 19 + i)] = 2.0 / p.extrinsic_rotation;
            }
        }
        PriorFactor {
            vars,
            h,
            b: DVector::zeros(n),
            linearization,
        }
    }

    fn maintain(&mut self) -> Result<()> {
        if self.n_nonkeyframes() > self.config.n_nonkeyframes {
            let idx = self
                .frames
                .iter()
                .position(|f| !f.keyframe)
                .expect("non-keyframe present");
            if self.n_keyframes() < self.config.n_keyframes || self.should_promote(idx) {
                self.frames[idx].keyframe = true;
                self.stats.promoted += 1;
            } else {
                self.drop_nonkeyframe(idx)?;
            }
        }
        if self.n_keyframes() > self.config.n_keyframes {
            self.marginalize_oldest_keyframe()?;
        }
        Ok(())
    }

    /// Rotation-compensated mean parallax and tracked ratio of `frames[idx]`
    /// relative to the keyframe before it.
    pub fn parallax_and_track_ratio(&self, idx: usize) -> (f64, f64) {
        let Some(kf) = self.frames[..idx].iter().rev().find(|f| f.keyframe) else {
            return (f64::INFINITY, 0.0);
        };
        let f = &self.frames[idx];
        let r_bc = self.extrinsics.rotation;
        let q_kf = kf.state.pose.rotation * r_bc;
        let q_f = f.state.pose.rotation * r_bc;
        let rel = q_f.inverse() * q_kf;
        let mut sum = 0.0;
        let mut common = 0usize;
        for (id, uv_k) in &kf.observations {
            if let Some(uv) = f.observations.get(id) {
                let b = rel * Vec3::new(uv_k.x, uv_k.y, 1.0);
                if b.z > 1e-6 {
                    sum += (Vector2::new(b.x / b.z, b.y / b.z) - uv).norm();
                    common += 1;
                }
            }
        }
        let ratio = if kf.observations.is_empty() {
            0.0
        } else {
            common as f64 / kf.observations.len() as f64
        };
        let parallax = if common == 0 { f64::INFINITY } else { sum / common as f64 };
        (parallax, ratio)
    }

    fn should_promote(&self, idx: usize) -> bool {
        let (parallax, ratio) = self.parallax_and_track_ratio(idx);
        parallax >= self.config.keyframe_parallax_thresh || ratio < self.config.keyframe_track_ratio_thresh
    }

    fn exit(&mut self, idx: usize) -> WindowFrame {
        let f = self.frames.remove(idx);
        let mut state = f.state;
        if self.config.offset_mode == OffsetMode::Shared {
            state.time_offset = self.shared_offset;
        }
        self.bank.evict_frame(state.timestamp);
        self.exited.push(ExitedFrame {
            id: f.id,
            state,
            keyframe: f.keyframe,
        });
        f
    }

    /// Removes a non-keyframe without marginalizing it: its observations
    /// are discarded and its neighbours are linked by re-integration.
    fn drop_nonkeyframe(&mut self, idx: usize) -> Result<()> {
        debug_assert!(idx > 0 && idx + 1 < self.frames.len());
        let prev = self.frames[idx - 1].state;
        let next_t = self.frames[idx + 1].state.timestamp;
        self.links[idx - 1] = self.integrate_link(&prev, next_t)?;
        self.links.remove(idx);
        self.exit(idx);
        self.stats.dropped_nonkeyframes += 1;
        self.prune_landmarks();
        Ok(())
    }

    fn observation_counts(&self) -> BTreeMap<usize, usize> {
        let mut counts = BTreeMap::new();
        for f in &self.frames {
            for id in f.observations.keys() {
                *counts.entry(*id).or_insert(0) += 1;
            }
        }
        counts
    }

    /// Landmarks the prior depends on; they leave only by marginalization.
    fn prior_landmarks(&self) -> BTreeSet<usize> {
        self.prior
            .vars
            .iter()
            .filter_map(|v| match v {
                VarId::Landmark(id) => Some(*id),
                _ => None,
            })
            .collect()
    }

    fn prune_landmarks(&mut self) {
        let counts = self.observation_counts();
        let pinned = self.prior_landmarks();
        self.landmarks
            .retain(|id, _| pinned.contains(id) || counts.get(id).copied().unwrap_or(0) >= 2);
    }

    fn strip_fixed(&self, mut block: ResidualBlock) -> ResidualBlock {
        if !self.config.estimate_extrinsics {
            block.jacobians.retain(|j| j.var != VarId::Extrinsics);
        }
        block
    }

    fn observation(&self, frame: &WindowFrame, id: usize, uv: &Vector2<f64>) -> VisualObservation {
        VisualObservation {
            frame_id: frame.id,
            landmark_id: id,
            uv: *uv,
            sigma_uv: self.config.sigma_uv,
        }
    }

    fn motion_blocks(&self, i: usize) -> Result<Vec<ResidualBlock>> {
        let (a, b) = (&self.frames[i], &self.frames[i + 1]);
        let ids = (a.id, b.id);
        let link = &self.links[i];
        let mut out = vec![
            inertial_residual(&a.state, &b.state, link, &self.gravity, ids)?,
            bias_walk_residual(&a.state, &b.state, &self.config.noise, link.dt, ids),
        ];
        if self.config.offset_mode == OffsetMode::PerFrame {
            out.push(offset_walk_residual(&a.state, &b.state, &self.config.offset_model, ids));
        }
        Ok(out)
    }

    /// Visual blocks of frame `idx` restricted to landmarks in `only`.
    fn visual_blocks(&mut self, idx: usize, only: Option<&BTreeSet<usize>>) -> Result<Vec<ResidualBlock>> {
        let state = self.frames[idx].state;
        let op = pose_at_offset(&state, &mut self.bank, &self.gravity)?;
        let frame = &self.frames[idx];
        let offset_var = self.offset_var(frame.id);
        let mut out = Vec::new();
        for (id, uv) in &frame.observations {
            if only.is_some_and(|s| !s.contains(id)) {
                continue;
            }
            let Some(l) = self.landmarks.get(id) else {
                continue;
            };
            let obs = self.observation(frame, *id, uv);
            match visual_residual(
                &state,
                &op,
                &self.extrinsics,
                l,
                &obs,
                offset_var,
                self.config.depth_epsilon,
                Some(self.config.huber),
            ) {
                Ok(b) => out.push(self.strip_fixed(b)),
                Err(Error::BehindCamera { .. }) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(out)
    }

    fn all_blocks(&mut self) -> Result<Vec<ResidualBlock>> {
        self.sync_offsets();
        let mut blocks = Vec::new();
        if !self.prior.is_empty() {
            blocks.push(self.strip_fixed(prior_residual(&self.prior, |v| self.value(v))?));
        }
        for i in 0..self.links.len() {
            blocks.extend(self.motion_blocks(i)?);
        }
        for i in 0..self.frames.len() {
            blocks.extend(self.visual_blocks(i, None)?);
        }
        Ok(blocks)
    }

    /// Marginalizes the oldest keyframe into the prior.
    ///
    /// Landmarks left with fewer than two observations go with it; their
    /// keyframe observations enter the prior, non-keyframe ones are
    /// discarded so the prior touches keyframes only. The frame's
    /// observations of surviving landmarks enter the prior too, which then
    /// depends on those landmarks until they are marginalized in turn.
    pub fn marginalize_oldest_keyframe(&mut self) -> Result<()> {
        if self.frames.len() < 2 {
            return Err(Error::NotEnoughFrames {
                needed: 2,
                got: self.frames.len(),
            });
        }
        self.sync_offsets();
        let f0 = self.frames[0].clone();
        let mut counts = self.observation_counts();
        for id in f0.observations.keys() {
            if let Some(c) = counts.get_mut(id) {
                *c -= 1;
            }
        }
        let pinned = self.prior_landmarks();
        let leaving: BTreeSet<usize> = f0
            .observations
            .keys()
            .chain(pinned.iter())
            .filter(|id| counts.get(id).copied().unwrap_or(0) < 2)
            .copied()
            .collect();
        // Surviving landmarks keep the frame's observation through the
        // prior, which is what ties the remaining keyframes together.
        let surviving: BTreeSet<usize> = f0
            .observations
            .keys()
            .filter(|id| !leaving.contains(id) && self.landmarks.contains_key(id))
            .copied()
            .collect();
        // Only landmarks with at least two keyframe observations carry
        // well-conditioned information into the prior.
        let mut kf_counts: BTreeMap<usize, usize> = BTreeMap::new();
        for f in self.frames.iter().filter(|f| f.keyframe) {
            for id in f.observations.keys().filter(|id| leaving.contains(id)) {
                *kf_counts.entry(*id).or_insert(0) += 1;
            }
        }
        let marg_lms: BTreeSet<usize> = leaving
            .iter()
            .filter(|id| {
                self.landmarks.contains_key(id)
                    && (pinned.contains(id) || kf_counts.get(id).copied().unwrap_or(0) >= 2)
            })
            .copied()
            .collect();

        let mut blocks = Vec::new();
        if !self.prior.is_empty() {
            blocks.push(self.strip_fixed(prior_residual(&self.prior, |v| self.value(v))?));
        }
        blocks.extend(self.motion_blocks(0)?);
        for i in 0..self.frames.len() {
            if self.frames[i].keyframe {
                blocks.extend(self.visual_blocks(i, Some(&marg_lms))?);
            }
        }
        blocks.extend(self.visual_blocks(0, Some(&surviving))?);
        let mut drop: BTreeSet<VarId> = marg_lms.iter().map(|id| VarId::Landmark(*id)).collect();
        drop.insert(VarId::Motion(f0.id));
        if self.config.offset_mode == OffsetMode::PerFrame {
            drop.insert(VarId::Offset(f0.id));
        }
        let outcome = marginalize(&blocks, &drop, |v| self.value(v))?;
        if outcome.regularized {
            self.stats.regularized_marginalizations += 1;
        }
        self.prior = outcome.prior;
        self.links.remove(0);
        self.exit(0);
        for id in &leaving {
            self.landmarks.remove(id);
            for f in &mut self.frames {
                f.observations.remove(id);
            }
        }
        self.stats.marginalized_keyframes += 1;
        self.prune_landmarks();
        Ok(())
    }

    fn sync_offsets(&mut self) {
        if self.config.offset_mode == OffsetMode::Shared {
            for f in &mut self.frames {
                f.state.time_offset = self.shared_offset;
            }
        }
    }

    fn relinearize_links(&mut self) -> Result<()> {
        for i in 0..self.links.len() {
            let s = self.frames[i].state;
            if bias_distance(&self.links[i], &s.bias_accel, &s.bias_gyro) > self.config.relinearize_bias_thresh {
                let t1 = self.frames[i + 1].state.timestamp;
                self.links[i] = self.integrate_link(&s, t1)?;
            }
        }
        Ok(())
    }

    fn camera_poses(&mut self) -> Result<Vec<Pose>> {
        self.sync_offsets();
        let extr = Pose::new(self.extrinsics.rotation, self.extrinsics.translation);
        let mut out = Vec::with_capacity(self.frames.len());
        for i in 0..self.frames.len() {
            let s = self.frames[i].state;
            let op = pose_at_offset(&s, &mut self.bank, &self.gravity)?;
            out.push(op.pose.compose(&extr));
        }
        Ok(out)
    }

    /// Triangulates features seen in at least two window frames and drops
    /// landmarks that fell behind an observing camera.
    pub fn triangulate(&mut self) -> Result<usize> {
        let cams = self.camera_poses()?;
        let mut tracks: BTreeMap<usize, Vec<(usize, Vector2<f64>)>> = BTreeMap::new();
        for (i, f) in self.frames.iter().enumerate() {
            for (id, uv) in &f.observations {
                tracks.entry(*id).or_default().push((i, *uv));
            }
        }
        let eps = self.config.depth_epsilon;
        let depth = |cam: &Pose, x: &Vec3| (cam.rotation.inverse() * (x - cam.position)).z;
        let pinned = self.prior_landmarks();
        self.landmarks.retain(|id, x| {
            pinned.contains(id)
                || tracks
                    .get(id)
                    .is_some_and(|t| t.len() >= 2 && t.iter().all(|(i, _)| depth(&cams[*i], x) > eps))
        });
        let mut added = 0;
        for (id, track) in &tracks {
            if track.len() < 2 || self.landmarks.contains_key(id) {
                continue;
            }
            if let Some(x) = triangulate_dlt(&cams, track, eps, self.config.min_triangulation_angle) {
                self.landmarks.insert(*id, x);
                added += 1;
            }
        }
        Ok(added)
    }

    /// Relinearizes, triangulates, and runs Levenberg-Marquardt.
    pub fn optimize(&mut self) -> Result<OptimizationReport> {
        self.relinearize_links()?;
        self.triangulate()?;
        let lm = self.config.lm;
        let mut report = levenberg_marquardt(self, &lm)?;
        self.sync_offsets();
        report.cache = self.bank.total_stats();
        Ok(report)
    }

    /// Current blocks of the full window, for inspection.
    pub fn residual_blocks(&mut self) -> Result<Vec<ResidualBlock>> {
        self.all_blocks()
    }

    /// Moves every remaining frame to the exit list, oldest first.
    pub fn finish(mut self) -> Vec<ExitedFrame> {
        self.sync_offsets();
        while !self.frames.is_empty() {
            self.exit(0);
        }
        self.exited
    }
}

fn triangulate_dlt(
    cams: &[Pose],
    track: &[(usize, Vector2<f64>)],
    min_depth: f64,
    min_angle: f64,
) -> Option<Vec3> {
    let mut a = Matrix4::zeros();
    for (i, uv) in track {
        let c = &cams[*i];
        let r = c.rotation.inverse().to_rotation_matrix().into_inner();
        let t = -(r * c.position);
        let row = |k: usize| Vector4::new(r[(k, 0)], r[(k, 1)], r[(k, 2)], t[k]);
        let r0 = row(0) - row(2) * uv.x;
        let r1 = row(1) - row(2) * uv.y;
        a += r0 * r0.transpose() + r1 * r1.transpose();
    }
    let eig = a.symmetric_eigen();
    let (k, _) = eig
        .eigenvalues
        .iter()
        .enumerate()
        .min_by(|x, y| x.1.total_cmp(y.1))?;
    let h = eig.eigenvectors.column(k);
    if h[3].abs() < 1e-12 {
        return None;
    }
    let x = Vec3::new(h[0] / h[3], h[1] / h[3], h[2] / h[3]);
    if !x.iter().all(|v| v.is_finite()) {
        return None;
    }
    let mut max_angle: f64 = 0.0;
    let rays: Vec<Vec3> = track
        .iter()
        .map(|(i, _)| (x - cams[*i].position).normalize())
        .collect();
    for (j, (i, _)) in track.iter().enumerate() {
        let c = &cams[*i];
        if (c.rotation.inverse() * (x - c.position)).z <= min_depth {
            return None;
        }
        for r in &rays[..j] {
            max_angle = max_angle.max(rays[j].dot(r).clamp(-1.0, 1.0).acos());
        }
    }
    (max_angle >= min_angle).then_some(x)
}

impl LeastSquaresProblem for WindowProblem {
    type Snapshot = Snapshot;

    fn evaluate(&mut self) -> Result<Vec<ResidualBlock>> {
        self.all_blocks()
    }

    fn retract(&mut self, var: VarId, delta: &[f64]) {
        match var {
            VarId::Motion(id) => {
                if let Some(i) = self.frame_index(id) {
                    self.frames[i].state.apply_motion_delta(delta);
                }
            }
            VarId::Offset(id) => {
                if let Some(i) = self.frame_index(id) {
                    self.frames[i].state.time_offset += delta[0];
                }
            }
            VarId::SharedOffset => self.shared_offset += delta[0],
            VarId::Extrinsics => self.extrinsics.apply_delta(delta),
            VarId::Landmark(id) => {
                if let Some(l) = self.landmarks.get_mut(&id) {
                    *l += Vec3::new(delta[0], delta[1], delta[2]);
                }
            }
        }
    }

    fn snapshot(&self) -> Snapshot {
        (
            self.frames.iter().map(|f| f.state).collect(),
            self.landmarks.clone(),
            self.extrinsics,
            self.shared_offset,
        )
    }

    fn restore(&mut self, (states, landmarks, extrinsics, shared): Snapshot) {
        for (f, s) in self.frames.iter_mut().zip(states) {
            f.state = s;
        }
        self.landmarks = landmarks;
        self.extrinsics = extrinsics;
        self.shared_offset = shared;
    }

    fn project(&mut self) {
        let m = self.config.max_offset;
        self.shared_offset = self.shared_offset.clamp(-m, m);
        for f in &mut self.frames {
            f.state.time_offset = f.state.time_offset.clamp(-m, m);
        }
        self.sync_offsets();
    }
}
