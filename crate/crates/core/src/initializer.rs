use nalgebra::{DMatrix, DVector, SMatrix, Unit};

use crate::error::{Error, Result};
use crate::geometry::{Extrinsics, FrameState, Mat3, Pose, Quat, Vec3};
use crate::preintegration::{ImuSample, Integrator, NoiseParams, PreintegrationDelta};

/// Up-to-scale camera poses relative to the first camera, typically from a
/// vision-only bundle adjustment.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionPoseSet {
    /// `(t_k, R^{c_0}_{c_k}, p^{c_0}_{c_k})`.
    pub entries: Vec<(f64, Quat, Vec3)>,
}

impl VisionPoseSet {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn timestamps(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.0).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Weighting {
    /// Each pair weighted by the inverse preintegration covariance.
    Mahalanobis,
    /// Plain least squares.
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitConfig {
    pub weighting: Weighting,
    /// When set, gravity is refined on the sphere of this radius.
    pub gravity_magnitude: Option<f64>,
    pub max_condition: f64,
    pub gravity_range: (f64, f64),
    /// Vision pose noise folded into the Mahalanobis weights.
    pub vision_noise: Option<VisionNoise>,
}

/// Noise of the vision-only poses: `sigma_rot` radians per frame and a
/// fraction `sigma_pos` of each consecutive displacement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisionNoise {
    pub sigma_rot: f64,
    pub sigma_pos: f64,
}

impl Default for InitConfig {
    fn default() -> Self {
        Self {
            weighting: Weighting::Mahalanobis,
            gravity_magnitude: None,
            max_condition: 1e8,
            gravity_range: (9.0, 10.6),
            vision_noise: None,
        }
    }
}

pub const MIN_INIT_FRAMES: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct InitializationResult {
    /// `v^{b_k}_{b_k}`, body frame.
    pub velocities: Vec<Vec3>,
    /// `g^{c_0}`.
    pub gravity: Vec3,
    pub scale: f64,
    pub residual_cost: f64,
    /// Condition number of the column-equilibrated normal matrix.
    pub condition_number: f64,
}

/// Preintegrates consecutive frame intervals with zero biases.
pub fn preintegrate_consecutive(
    samples: &[ImuSample],
    timestamps: &[f64],
    noise: NoiseParams,
) -> Result<Vec<PreintegrationDelta>> {
    let integ = Integrator::new(samples, Vec3::zeros(), Vec3::zeros(), noise);
    timestamps
        .windows(2)
        .map(|w| integ.integrate(w[0], w[1]).map(|(d, _)| d))
        .collect()
}

type Row6 = SMatrix<f64, 6, 6>;

struct Estimate {
    velocities: Vec<Vec3>,
    gravity: Vec3,
    scale: f64,
}

type Local = SMatrix<f64, 6, 10>;

struct PairSystem {
    /// Rows `[α; β]` against `[v_k, v_{k+1}, g, s]`.
    a: Local,
    b: nalgebra::Vector6<f64>,
    w: Row6,
    /// Expected `AᵀWA` and `AᵀWb` inflation caused by vision noise.
    compensation: SMatrix<f64, 10, 10>,
    rhs_compensation: SMatrix<f64, 10, 1>,
}

fn body_rotations(poses: &VisionPoseSet, extr: &Extrinsics) -> Vec<Mat3> {
    let r_cb = extr.rotation.to_rotation_matrix().into_inner().transpose();
    poses
        .entries
        .iter()
        .map(|(_, q, _)| q.to_rotation_matrix().into_inner() * r_cb)
        .collect()
}

/// `(σ, ∂A/∂ε, ∂b/∂ε)` for every scalar vision noise coordinate of one
/// pair.
fn noise_directions(
    a: &Local,
    rel: &Mat3,
    t: &Vec3,
    rkt: &Mat3,
    noise: &VisionNoise,
    pos_sigma: f64,
) -> Vec<(f64, Local, nalgebra::Vector6<f64>)> {
    let mut out = Vec::with_capacity(9);
    for i in 0..3 {
        let e = Vec3::ith(i, 1.0);
        let ex = crate::geometry::skew(&e);
        let mut n = Local::zeros();
        n.fixed_view_mut::<3, 1>(0, 9).copy_from(&(rkt * e));
        out.push((pos_sigma, n, nalgebra::Vector6::zeros()));
        // R_k → R_k·exp(φ): every term with a leading R_kᵀ picks up -[e]×.
        let mut n = Local::zeros();
        n.fixed_view_mut::<3, 4>(0, 6).copy_from(&(-ex * a.fixed_view::<3, 4>(0, 6)));
        n.fixed_view_mut::<3, 6>(3, 3).copy_from(&(-ex * a.fixed_view::<3, 6>(3, 3)));
        let mut nb = nalgebra::Vector6::zeros();
        nb.fixed_rows_mut::<3>(0).copy_from(&(-ex * rel * t));
        out.push((noise.sigma_rot, n, nb));
        let mut n = Local::zeros();
        n.fixed_view_mut::<3, 3>(3, 3).copy_from(&(rel * ex));
        let mut nb = nalgebra::Vector6::zeros();
        nb.fixed_rows_mut::<3>(0).copy_from(&(rel * ex * t));
        out.push((noise.sigma_rot, n, nb));
    }
    out
}

fn pair_systems(
    poses: &VisionPoseSet,
    deltas: &[PreintegrationDelta],
    extr: &Extrinsics,
    weighting: Weighting,
    vision: Option<(&VisionNoise, &Estimate)>,
) -> Result<Vec<PairSystem>> {
    let rb = body_rotations(poses, extr);
    let t = extr.translation;
    let mut out = Vec::with_capacity(deltas.len());
    for (k, d) in deltas.iter().enumerate() {
        let (rk, rk1) = (rb[k], rb[k + 1]);
        let rkt = rk.transpose();
        let rel = rkt * rk1;
        let dt = d.dt;
        let dp = poses.entries[k + 1].2 - poses.entries[k].2;
        let mut a = Local::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-Mat3::identity() * dt));
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(rkt * (0.5 * dt * dt)));
        a.fixed_view_mut::<3, 1>(0, 9).copy_from(&(rkt * dp));
        a.fixed_view_mut::<3, 3>(3, 0).copy_from(&(-Mat3::identity()));
        a.fixed_view_mut::<3, 3>(3, 3).copy_from(&rel);
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(rkt * dt));
        let mut b = nalgebra::Vector6::zeros();
        b.fixed_rows_mut::<3>(0).copy_from(&(d.alpha + rel * t - t));
        b.fixed_rows_mut::<3>(3).copy_from(&d.beta);
        let mut compensation = SMatrix::<f64, 10, 10>::zeros();
        let mut rhs_compensation = SMatrix::<f64, 10, 1>::zeros();
        let w = match weighting {
            Weighting::Identity => Row6::identity(),
            Weighting::Mahalanobis => {
                let mut cov: Row6 = d.covariance.fixed_view::<6, 6>(0, 0).into_owned();
                let dirs = vision.map(|(n, est)| {
                    let mut x = SMatrix::<f64, 10, 1>::zeros();
                    x.fixed_rows_mut::<3>(0).copy_from(&est.velocities[k]);
                    x.fixed_rows_mut::<3>(3).copy_from(&est.velocities[k + 1]);
                    x.fixed_rows_mut::<3>(6).copy_from(&est.gravity);
                    x[9] = est.scale;
                    // Displacement length from the estimated motion; the
                    // noisy measurement would correlate weights and errors.
                    let length = 0.5 * (est.velocities[k].norm() + est.velocities[k + 1].norm()) * dt;
                    let pos_sigma = n.sigma_pos * length / est.scale.abs().max(1e-12);
                    (noise_directions(&a, &rel, &t, &rkt, n, pos_sigma), x)
                });
                if let Some((dirs, x)) = &dirs {
                    for (sigma, n, nb) in dirs {
                        let e = n * x - nb;
                        cov += e * e.transpose() * (sigma * sigma);
                    }
                }
                let w = cov.try_inverse().ok_or(Error::NonPsdCovariance)?;
                if let Some((dirs, _)) = &dirs {
                    for (sigma, n, nb) in dirs {
                        compensation += n.transpose() * w * n * (sigma * sigma);
                        rhs_compensation += n.transpose() * w * nb * (sigma * sigma);
                    }
                }
                w
            }
        };
        out.push(PairSystem {
            a,
            b,
            w,
            compensation,
            rhs_compensation,
        });
    }
    Ok(out)
}

/// Assembles `H x = r` over `[v_0..v_{K-1}, g, s]`, with `g` optionally
/// replaced by `g0 + B·w` (two columns).
fn normal_equations(pairs: &[PairSystem], k: usize, tangent: Option<(&Vec3, &SMatrix<f64, 3, 2>)>) -> (DMatrix<f64>, DVector<f64>) {
    let gdim = if tangent.is_some() { 2 } else { 3 };
    let m = 7 + gdim;
    let n = 3 * k + gdim + 1;
    // Local `[v_k, v_{k+1}, g, s] = T·y + c`.
    let mut tmat = DMatrix::<f64>::zeros(10, m);
    let mut c = DVector::<f64>::zeros(10);
    for i in 0..6 {
        tmat[(i, i)] = 1.0;
    }
    tmat[(9, m - 1)] = 1.0;
    match tangent {
        None => {
            for i in 0..3 {
                tmat[(6 + i, 6 + i)] = 1.0;
            }
        }
        Some((g0, basis)) => {
            tmat.view_mut((6, 6), (3, 2)).copy_from(basis);
            c.rows_mut(6, 3).copy_from(g0);
        }
    }
    let global: Vec<usize> = (0..m)
        .map(|j| if j < 6 { j } else if j < m - 1 { 3 * k + j - 6 } else { n - 1 })
        .collect();
    let mut h = DMatrix::zeros(n, n);
    let mut r = DVector::zeros(n);
    for (i, p) in pairs.iter().enumerate() {
        let a = DMatrix::from_fn(6, 10, |r, c| p.a[(r, c)]);
        let w = DMatrix::from_fn(6, 6, |r, c| p.w[(r, c)]);
        let comp = DMatrix::from_fn(10, 10, |r, c| p.compensation[(r, c)]);
        let b = DVector::from_column_slice(p.b.as_slice());
        let hl = a.transpose() * &w * &a - comp;
        let rc = DVector::from_column_slice(p.rhs_compensation.as_slice());
        let rl = a.transpose() * &w * b - rc - &hl * &c;
        let hy = tmat.transpose() * &hl * &tmat;
        let ry = tmat.transpose() * rl;
        for (jl, &jg) in global.iter().enumerate() {
            let jg = if jl < 6 { 3 * i + jg } else { jg };
            r[jg] += ry[jl];
            for (kl, &kg) in global.iter().enumerate() {
                let kg = if kl < 6 { 3 * i + kg } else { kg };
                h[(jg, kg)] += hy[(jl, kl)];
            }
        }
    }
    (h, r)
}

fn equilibrated_condition(h: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = (0..h.nrows()).map(|i| h[(i, i)].max(0.0).sqrt()).collect();
    if d.iter().any(|x| *x == 0.0) {
        return f64::INFINITY;
    }
    let scaled = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(r, c)] / (d[r] * d[c]));
    let ev = scaled.symmetric_eigenvalues();
    let max = ev.max();
    let min = ev.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

fn tangent_basis(g: &Vec3) -> SMatrix<f64, 3, 2> {
    let n = g.normalize();
    let helper = if n.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let b1 = (helper - n * n.dot(&helper)).normalize();
    let b2 = n.cross(&b1);
    SMatrix::<f64, 3, 2>::from_columns(&[b1, b2])
}

fn residual_cost(pairs: &[PairSystem], v: &[Vec3], g: &Vec3, s: f64) -> f64 {
    pairs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let mut x = SMatrix::<f64, 10, 1>::zeros();
            x.fixed_rows_mut::<3>(0).copy_from(&v[i]);
            x.fixed_rows_mut::<3>(3).copy_from(&v[i + 1]);
            x.fixed_rows_mut::<3>(6).copy_from(g);
            x[9] = s;
            let e = p.a * x - p.b;
            (e.transpose() * p.w * e)[0]
        })
        .sum()
}

fn solve_pairs(pairs: &[PairSystem], k: usize, config: &InitConfig) -> Result<(Estimate, f64)> {
    let (h, r) = normal_equations(pairs, k, None);
    let condition_number = equilibrated_condition(&h);
    if !(condition_number <= config.max_condition) {
        return Err(Error::DegenerateMotion(condition_number));
    }
    let x = h.cholesky().ok_or(Error::DegenerateMotion(condition_number))?.solve(&r);
    let mut velocities: Vec<Vec3> = (0..k).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect();
    let mut gravity = Vec3::new(x[3 * k], x[3 * k + 1], x[3 * k + 2]);
    let mut scale = x[3 * k + 3];

    if let Some(mag) = config.gravity_magnitude {
        for _ in 0..4 {
            let g0 = gravity.normalize() * mag;
            let basis = tangent_basis(&g0);
            let (h, r) = normal_equations(pairs, k, Some((&g0, &basis)));
            let x = h.cholesky().ok_or(Error::DegenerateMotion(condition_number))?.solve(&r);
            velocities = (0..k).map(|i| Vec3::new(x[3 * i], x[3 * i + 1], x[3 * i + 2])).collect();
            gravity = (g0 + basis * nalgebra::Vector2::new(x[3 * k], x[3 * k + 1])).normalize() * mag;
            scale = x[3 * k + 2];
        }
    }
    Ok((
        Estimate {
            velocities,
            gravity,
            scale,
        },
        condition_number,
    ))
}

/// Solves velocities, gravity and metric scale from up-to-scale vision
/// poses and the preintegrated IMU deltas between consecutive frames.
pub fn solve_init(
    poses: &VisionPoseSet,
    deltas: &[PreintegrationDelta],
    extr: &Extrinsics,
    config: &InitConfig,
) -> Result<InitializationResult> {
    let k = poses.len();
    if k < MIN_INIT_FRAMES {
        return Err(Error::NotEnoughFrames {
            needed: MIN_INIT_FRAMES,
            got: k,
        });
    }
    if deltas.len() != k - 1 {
        return Err(Error::DimensionMismatch {
            expected: k - 1,
            got: deltas.len(),
        });
    }
    let reweight = match (&config.vision_noise, config.weighting) {
        (Some(n), Weighting::Mahalanobis) => Some(n),
        _ => None,
    };
    // With vision noise the IMU-only weights overtrust `α`, so the first
    // guess comes from plain least squares.
    let first = if reweight.is_some() {
        Weighting::Identity
    } else {
        config.weighting
    };
    let mut pairs = pair_systems(poses, deltas, extr, first, None)?;
    let (mut est, mut condition_number) = solve_pairs(&pairs, k, config)?;
    if let Some(noise) = reweight {
        // The vision terms depend on the unknowns; reweight until the
        // scale settles.
        for _ in 0..8 {
            let prev = est.scale;
            pairs = pair_systems(poses, deltas, extr, config.weighting, Some((noise, &est)))?;
            (est, condition_number) = solve_pairs(&pairs, k, config)?;
            if (est.scale - prev).abs() <= 1e-9 * prev.abs() {
                break;
            }
        }
    }
    let Estimate {
        velocities,
        gravity,
        scale,
    } = est;

    if !(scale > 0.0) {
        return Err(Error::NonPositiveScale(scale));
    }
    let gn = gravity.norm();
    if gn < config.gravity_range.0 || gn > config.gravity_range.1 {
        return Err(Error::ImplausibleGravity(gn));
    }
    let residual_cost = residual_cost(&pairs, &velocities, &gravity, scale);
    Ok(InitializationResult {
        velocities,
        gravity,
        scale,
        residual_cost,
        condition_number,
    })
}

/// Initial frame states in a gravity-aligned world frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub result: InitializationResult,
    /// `R^w_{c_0}`; the yaw is left as in `c_0`.
    pub world_from_c0: Quat,
    pub states: Vec<FrameState>,
}

/// Runs [`solve_init`] and expresses the solution in a world frame whose
/// `z` axis is opposite to gravitational acceleration. Biases and offsets
/// start at zero.
pub fn bootstrap(
    poses: &VisionPoseSet,
    deltas: &[PreintegrationDelta],
    extr: &Extrinsics,
    config: &InitConfig,
) -> Result<Bootstrap> {
    let result = solve_init(poses, deltas, extr, config)?;
    let up = Unit::new_normalize(result.gravity);
    let world_from_c0 = Quat::rotation_between_axis(&up, &Vec3::z_axis()).unwrap_or_else(|| {
        // Gravity exactly along -z: any half turn about a horizontal axis.
        Quat::from_axis_angle(&Vec3::x_axis(), std::f64::consts::PI)
    });
    let rw = world_from_c0.to_rotation_matrix().into_inner();
    let r_cb = extr.rotation.inverse();
    let states = poses
        .entries
        .iter()
        .zip(&result.velocities)
        .map(|((t, q, p), v)| {
            let rot_c0 = q * r_cb;
            let pos_c0 = p * result.scale - rot_c0 * extr.translation;
            let rotation = crate::geometry::renormalize(&(world_from_c0 * rot_c0));
            let mut s = FrameState::at_rest(*t);
            s.pose = Pose::new(rotation, rw * pos_c0);
            s.velocity = rotation * v;
            s
        })
        .collect();
    Ok(Bootstrap {
        result,
        world_from_c0,
        states,
    })
}
