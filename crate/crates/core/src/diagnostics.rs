//! Finite-difference checks of every analytic Jacobian.
//!
//! Each suite draws random instances from a seeded RNG, perturbs one error
//! state coordinate at a time through the same retraction the solver uses,
//! and compares central differences against the analytic blocks.

use nalgebra::{DMatrix, DVector, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::factors::{
    bias_walk_residual, inertial_residual, offset_walk_residual, pose_at_offset,
    visual_residual, ResidualBlock, TimeOffsetModel, VarId, VisualObservation,
};
use crate::geometry::{exp_so3, gravity_vector, log_so3, Extrinsics, FrameState, Pose, Quat, Vec3, GRAVITY_MAGNITUDE};
use crate::integration_cache::CacheBank;
use crate::preintegration::{integrate_delta, propagate_state, ImuSample, NoiseParams};
use crate::solver::{LinearFactor, LinearProblem};

const IMU_RATE: f64 = 200.0;
const STEP: f64 = 1e-6;
const OFFSET_STEP: f64 = 1e-5;
/// Denominator floor of the mixed absolute/relative error.
const FLOOR: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    pub name: &'static str,
    pub instances: usize,
    /// Worst ratio of error to tolerance; `≤ 1` passes.
    pub worst_ratio: f64,
    pub worst_error: f64,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.worst_ratio <= 1.0
    }
}

impl std::fmt::Display for CheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{:<22} {} instances  worst error {:.3e}  ({:.2} of tolerance)  {}",
            self.name,
            self.instances,
            self.worst_error,
            self.worst_ratio,
            if self.passed() { "PASS" } else { "FAIL" }
        )
    }
}

struct Tracker {
    name: &'static str,
    instances: usize,
    worst_ratio: f64,
    worst_error: f64,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            instances: 0,
            worst_ratio: 0.0,
            worst_error: 0.0,
        }
    }

    fn record(&mut self, analytic: &DMatrix<f64>, numeric: &DMatrix<f64>, tol: f64) {
        let err = (analytic - numeric).norm() / numeric.norm().max(FLOOR);
        let ratio = if err.is_finite() { err / tol } else { f64::INFINITY };
        if ratio > self.worst_ratio {
            self.worst_ratio = ratio;
            self.worst_error = err;
        }
    }

    fn finish(self) -> CheckReport {
        CheckReport {
            name: self.name,
            instances: self.instances,
            worst_ratio: self.worst_ratio,
            worst_error: self.worst_error,
        }
    }
}

/// Smooth, rotation-rich IMU signal for the suites.
pub fn test_signal(t0: f64, t1: f64) -> Vec<ImuSample> {
    let n = ((t1 - t0) * IMU_RATE).round() as usize;
    (0..=n)
        .map(|i| {
            let t = t0 + i as f64 / IMU_RATE;
            ImuSample {
                timestamp: t,
                gyro: Vec3::new(0.8 * (1.7 * t).sin(), 0.6 * (1.1 * t).cos(), 0.5 + 0.3 * (2.3 * t).sin()),
                accel: Vec3::new((2.0 * t).sin(), 0.7 * (1.3 * t).cos(), 9.8 + 0.5 * (0.9 * t).sin()),
            }
        })
        .collect()
}

fn random_vec(rng: &mut ChaCha8Rng, scale: f64) -> Vec3 {
    Vec3::new(
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
        rng.random_range(-scale..scale),
    )
}

fn random_rotation(rng: &mut ChaCha8Rng) -> Quat {
    exp_so3(&random_vec(rng, std::f64::consts::PI / 1.8))
}

fn random_state(rng: &mut ChaCha8Rng, t: f64) -> FrameState {
    FrameState {
        timestamp: t,
        pose: Pose::new(random_rotation(rng), random_vec(rng, 1.0)),
        velocity: random_vec(rng, 1.0),
        bias_accel: random_vec(rng, 0.05),
        bias_gyro: random_vec(rng, 0.01),
        time_offset: rng.random_range(-0.06..0.06),
    }
}

fn column_diff(plus: &DVector<f64>, minus: &DVector<f64>, h: f64) -> DVector<f64> {
    (plus - minus) / (2.0 * h)
}

/// Visual residual incl. the time-offset column.
pub fn check_visual(seed: u64, instances: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = test_signal(0.0, 4.0);
    let g = gravity_vector(GRAVITY_MAGNITUDE);
    let noise = NoiseParams::default();
    let mut tr = Tracker::new("visual");
    let period = 1.0 / IMU_RATE;
    while tr.instances < instances {
        let t_k = rng.random_range(1.0..3.0);
        let state = random_state(&mut rng, t_k);
        let extr = Extrinsics {
            rotation: exp_so3(&random_vec(&mut rng, 0.1)),
            translation: random_vec(&mut rng, 0.1),
        };
        let mut bank = CacheBank::new(noise, 0.1, 1000).with_samples(samples.clone())?;
        let op = pose_at_offset(&state, &mut bank, &g)?;
        let f_c = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 1.0)
            * rng.random_range(2.0..6.0);
        let landmark = op.pose.transform_point(&(extr.rotation * f_c + extr.translation));
        let obs = VisualObservation {
            frame_id: 0,
            landmark_id: 0,
            uv: Vector2::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)),
            sigma_uv: 1.0,
        };

        let eval = |state: &FrameState, extr: &Extrinsics, lm: &Vec3| -> Result<ResidualBlock> {
            // A fresh bank keeps the linearization bias at the perturbed state.
            let mut b = CacheBank::new(noise, 0.1, 1000).with_samples(samples.clone())?;
            b.insert_frame(state.timestamp, op.delta.linearization_bias_accel, op.delta.linearization_bias_gyro);
            let op = pose_at_offset(state, &mut b, &g)?;
            visual_residual(state, &op, extr, lm, &obs, VarId::Offset(0), 1e-3, None)
        };
        let block = visual_residual(&state, &op, &extr, &landmark, &obs, VarId::Offset(0), 1e-3, None)?;

        let mut fd_motion = DMatrix::zeros(2, 15);
        for c in 0..15 {
            let mut e = [0.0; 15];
            e[c] = STEP;
            let mut sp = state;
            sp.apply_motion_delta(&e);
            e[c] = -STEP;
            let mut sm = state;
            sm.apply_motion_delta(&e);
            let col = column_diff(&eval(&sp, &extr, &landmark)?.residual, &eval(&sm, &extr, &landmark)?.residual, STEP);
            fd_motion.set_column(c, &col);
        }
        tr.record(block.jacobian(VarId::Motion(0)).unwrap(), &fd_motion, 1e-4);

        let mut fd_extr = DMatrix::zeros(2, 6);
        for c in 0..6 {
            let mut e = [0.0; 6];
            e[c] = STEP;
            let mut ep = extr;
            ep.apply_delta(&e);
            e[c] = -STEP;
            let mut em = extr;
            em.apply_delta(&e);
            let col = column_diff(&eval(&state, &ep, &landmark)?.residual, &eval(&state, &em, &landmark)?.residual, STEP);
            fd_extr.set_column(c, &col);
        }
        tr.record(block.jacobian(VarId::Extrinsics).unwrap(), &fd_extr, 1e-4);

        let mut fd_lm = DMatrix::zeros(2, 3);
        for c in 0..3 {
            let mut e = Vec3::zeros();
            e[c] = STEP;
            let col = column_diff(
                &eval(&state, &extr, &(landmark + e))?.residual,
                &eval(&state, &extr, &(landmark - e))?.residual,
                STEP,
            );
            fd_lm.set_column(c, &col);
        }
        tr.record(block.jacobian(VarId::Landmark(0)).unwrap(), &fd_lm, 1e-4);

        // The map is only piecewise smooth across IMU read-out times; take a
        // one-sided difference on the side that stays inside one interval.
        let t_cap = t_k + state.time_offset;
        let phase = (t_cap / period).fract() * period;
        let at = |off: f64| -> Result<DVector<f64>> {
            let mut s = state;
            s.time_offset = off;
            Ok(eval(&s, &extr, &landmark)?.residual)
        };
        let base = state.time_offset;
        let fd_off = if phase < OFFSET_STEP {
            (at(base + OFFSET_STEP)? - at(base)?) / OFFSET_STEP
        } else if period - phase < OFFSET_STEP {
            (at(base)? - at(base - OFFSET_STEP)?) / OFFSET_STEP
        } else {
            column_diff(&at(base + OFFSET_STEP)?, &at(base - OFFSET_STEP)?, OFFSET_STEP)
        };
        let tol = if op.omega.norm() > 1.0 { 1e-3 } else { 1e-4 };
        tr.record(
            block.jacobian(VarId::Offset(0)).unwrap(),
            &DMatrix::from_column_slice(2, 1, fd_off.as_slice()),
            tol,
        );
        tr.instances += 1;
    }
    Ok(tr.finish())
}

/// Inertial residual w.r.t. both motion blocks.
pub fn check_inertial(seed: u64, instances: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = test_signal(0.0, 4.0);
    let g = gravity_vector(GRAVITY_MAGNITUDE);
    let noise = NoiseParams::default();
    let mut tr = Tracker::new("inertial");
    while tr.instances < instances {
        let t0 = rng.random_range(0.5..2.5);
        let t1 = t0 + rng.random_range(0.03..0.6);
        let s0 = random_state(&mut rng, t0);
        let lin_a = s0.bias_accel + random_vec(&mut rng, 0.02);
        let lin_g = s0.bias_gyro + random_vec(&mut rng, 0.005);
        let delta = integrate_delta(&samples, &lin_a, &lin_g, t0, t1, &noise)?;
        let (pose, v) = propagate_state(&s0, &delta, &g);
        let mut s1 = random_state(&mut rng, t1);
        s1.pose = Pose::new(pose.rotation * exp_so3(&random_vec(&mut rng, 0.05)), pose.position + random_vec(&mut rng, 0.05));
        s1.velocity = v + random_vec(&mut rng, 0.05);

        let block = inertial_residual(&s0, &s1, &delta, &g, (0, 1))?;
        for which in 0..2 {
            let mut fd = DMatrix::zeros(9, 15);
            for c in 0..15 {
                let mut e = [0.0; 15];
                let mut eval = |sign: f64| -> Result<DVector<f64>> {
                    e[c] = sign * STEP;
                    let (mut a, mut b) = (s0, s1);
                    if which == 0 {
                        a.apply_motion_delta(&e);
                    } else {
                        b.apply_motion_delta(&e);
                    }
                    Ok(inertial_residual(&a, &b, &delta, &g, (0, 1))?.residual)
                };
                let col = column_diff(&eval(1.0)?, &eval(-1.0)?, STEP);
                fd.set_column(c, &col);
            }
            tr.record(block.jacobian(VarId::Motion(which)).unwrap(), &fd, 1e-5);
        }
        tr.instances += 1;
    }
    Ok(tr.finish())
}

/// Offset random walk and bias random walk blocks.
pub fn check_random_walks(seed: u64, instances: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = TimeOffsetModel::default();
    let noise = NoiseParams::default();
    let mut tr = Tracker::new("offset/bias walk");
    while tr.instances < instances {
        let s0 = random_state(&mut rng, 1.0);
        let t1 = 1.0 + rng.random_range(0.02..0.5);
        let s1 = random_state(&mut rng, t1);
        let ow = offset_walk_residual(&s0, &s1, &model, (0, 1));
        for (which, var) in [(0, VarId::Offset(0)), (1, VarId::Offset(1))] {
            let eval = |sign: f64| {
                let (mut a, mut b) = (s0, s1);
                if which == 0 {
                    a.time_offset += sign * STEP;
                } else {
                    b.time_offset += sign * STEP;
                }
                offset_walk_residual(&a, &b, &model, (0, 1)).residual
            };
            let col = column_diff(&eval(1.0), &eval(-1.0), STEP);
            tr.record(ow.jacobian(var).unwrap(), &DMatrix::from_column_slice(1, 1, col.as_slice()), 1e-6);
        }
        let bw = bias_walk_residual(&s0, &s1, &noise, s1.timestamp - s0.timestamp, (0, 1));
        for which in 0..2 {
            let mut fd = DMatrix::zeros(6, 15);
            for c in 0..15 {
                let eval = |sign: f64| {
                    let mut e = [0.0; 15];
                    e[c] = sign * STEP;
                    let (mut a, mut b) = (s0, s1);
                    if which == 0 {
                        a.apply_motion_delta(&e);
                    } else {
                        b.apply_motion_delta(&e);
                    }
                    bias_walk_residual(&a, &b, &noise, s1.timestamp - s0.timestamp, (0, 1)).residual
                };
                fd.set_column(c, &column_diff(&eval(1.0), &eval(-1.0), STEP));
            }
            tr.record(bw.jacobian(VarId::Motion(which)).unwrap(), &fd, 1e-6);
        }
        tr.instances += 1;
    }
    Ok(tr.finish())
}

/// Preintegration bias Jacobians against re-integration.
pub fn check_bias_jacobians(seed: u64, instances: usize) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = test_signal(0.0, 4.0);
    let noise = NoiseParams::default();
    let mut tr = Tracker::new("preintegration bias");
    while tr.instances < instances {
        let t0 = rng.random_range(0.5..2.5);
        let t1 = t0 + rng.random_range(0.03..0.8);
        let ba = random_vec(&mut rng, 0.05);
        let bg = random_vec(&mut rng, 0.01);
        let d = integrate_delta(&samples, &ba, &bg, t0, t1, &noise)?;
        let mut fd = DMatrix::zeros(9, 6);
        for c in 0..6 {
            let eval = |sign: f64| -> Result<DVector<f64>> {
                let mut e = [0.0; 6];
                e[c] = sign * STEP;
                let dd = integrate_delta(
                    &samples,
                    &(ba + Vec3::new(e[0], e[1], e[2])),
                    &(bg + Vec3::new(e[3], e[4], e[5])),
                    t0,
                    t1,
                    &noise,
                )?;
                let mut v = DVector::zeros(9);
                v.rows_mut(0, 3).copy_from(&dd.alpha);
                v.rows_mut(3, 3).copy_from(&dd.beta);
                v.rows_mut(6, 3).copy_from(&log_so3(&(d.dq.inverse() * dd.dq)));
                Ok(v)
            };
            fd.set_column(c, &column_diff(&eval(1.0)?, &eval(-1.0)?, STEP));
        }
        let j = d.bias_jacobian();
        tr.record(&DMatrix::from_column_slice(9, 6, j.as_slice()), &fd, 1e-5);
        tr.instances += 1;
    }
    Ok(tr.finish())
}

/// Runs every suite with `instances` draws each.
pub fn run_all(seed: u64, instances: usize) -> Result<Vec<CheckReport>> {
    Ok(vec![
        check_inertial(seed, instances)?,
        check_visual(seed.wrapping_add(1), instances)?,
        check_random_walks(seed.wrapping_add(2), instances)?,
        check_bias_jacobians(seed.wrapping_add(3), instances)?,
    ])
}

fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Random well-posed linear-Gaussian graph over offsets and landmarks.
pub fn random_linear_problem(rng: &mut ChaCha8Rng) -> Result<LinearProblem> {
    let n = rng.random_range(4..10);
    let mut p = LinearProblem::new();
    let mut vars = Vec::with_capacity(n);
    for i in 0..n {
        let v = if rng.random_bool(0.5) {
            VarId::Offset(i)
        } else {
            VarId::Landmark(i)
        };
        let d = v.dim();
        p.add_variable(v, DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0)))?;
        vars.push(v);
    }
    for v in &vars {
        let d = v.dim();
        let a = DMatrix::identity(d, d) + 0.3 * random_matrix(rng, d, d);
        let s = DMatrix::from_diagonal(&DVector::from_fn(d, |_, _| rng.random_range(0.5..2.0)));
        p.add_factor(LinearFactor {
            terms: vec![(*v, a)],
            z: DVector::from_fn(d, |_, _| rng.random_range(-2.0..2.0)),
            sqrt_information: s,
        })?;
    }
    for _ in 0..rng.random_range(n..2 * n) {
        let a = vars[rng.random_range(0..n)];
        let b = vars[rng.random_range(0..n)];
        if a == b {
            continue;
        }
        let rows = rng.random_range(1..4);
        p.add_factor(LinearFactor {
            terms: vec![
                (a, random_matrix(rng, rows, a.dim())),
                (b, random_matrix(rng, rows, b.dim())),
            ],
            z: DVector::from_fn(rows, |_, _| rng.random_range(-2.0..2.0)),
            sqrt_information: DMatrix::identity(rows, rows) * rng.random_range(0.5..3.0),
        })?;
    }
    Ok(p)
}

/// Worst survivor discrepancy between sequential marginalize-then-solve and
/// a batch solve, over `graphs` random linear-Gaussian graphs.
pub fn marginalization_oracle(seed: u64, graphs: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..graphs {
        let mut seq = random_linear_problem(&mut rng)?;
        let mut batch = seq.clone();
        batch.solve_dense()?;
        for _ in 0..rng.random_range(1..4) {
            let remaining: Vec<VarId> = seq.values.keys().copied().collect();
            if remaining.len() < 2 {
                break;
            }
            let k = rng.random_range(1..remaining.len().min(3));
            let mut drop = std::collections::BTreeSet::new();
            while drop.len() < k {
                drop.insert(remaining[rng.random_range(0..remaining.len())]);
            }
            seq.marginalize(&drop)?;
            // Moving the estimate between rounds exercises priors evaluated
            // away from their linearization point.
            if rng.random_bool(0.5) {
                seq.solve_dense()?;
            }
        }
        seq.solve_dense()?;
        for (v, x) in &seq.values {
            worst = worst.max((x - &batch.values[v]).amax());
        }
    }
    Ok(worst)
}


/// Mean NEES of the 9-dof preintegrated delta over `draws` noisy copies of
/// the test signal on `[0, duration]`, against the propagated covariance.
pub fn preintegration_nees(seed: u64, draws: usize, duration: f64, noise: &NoiseParams) -> Result<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let clean = test_signal(0.0, duration);
    let zero = Vec3::zeros();
    let reference = integrate_delta(&clean, &zero, &zero, 0.0, duration, noise)?;
    let info = reference
        .covariance
        .try_inverse()
        .ok_or(crate::error::Error::NonPsdCovariance)?;
    let white = (IMU_RATE).sqrt();
    let mut total = 0.0;
    for _ in 0..draws {
        let mut draw = |s: f64| -> Vec3 {
            Vec3::from_fn(|_, _| {
                let n: f64 = StandardNormal.sample(&mut rng);
                n * s * white
            })
        };
        let noisy: Vec<ImuSample> = clean
            .iter()
            .map(|s| ImuSample {
                timestamp: s.timestamp,
                gyro: s.gyro + draw(noise.sigma_gyro),
                accel: s.accel + draw(noise.sigma_accel),
            })
            .collect();
        let d = integrate_delta(&noisy, &zero, &zero, 0.0, duration, noise)?;
        let mut e = nalgebra::SVector::<f64, 9>::zeros();
        e.fixed_rows_mut::<3>(0).copy_from(&(d.alpha - reference.alpha));
        e.fixed_rows_mut::<3>(3).copy_from(&(d.beta - reference.beta));
        e.fixed_rows_mut::<3>(6).copy_from(&log_so3(&(reference.dq.inverse() * d.dq)));
        total += (e.transpose() * info * e)[0];
    }
    Ok(total / draws as f64)
}
