//! Residual blocks of the sliding-window cost and their analytic Jacobians.
//!
//! Jacobian columns are taken w.r.t. the error-state perturbations used by
//! the solver's retraction: additive for positions, velocities, biases,
//! offsets and landmarks, and `q ⊗ [δθ; 1]` for rotations. Because that
//! perturbation rotates by about `2·δθ`, every rotation column carries a
//! factor two relative to the usual tangent-space expressions.

use nalgebra::{DMatrix, DVector, Matrix2x3, SMatrix, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{
    exp_so3, quat_boxminus_jacobian, quat_left_matrix, quat_right_matrix, right_jacobian, skew, Extrinsics, FrameState, Mat3,
    Pose, Vec3,
};
use crate::integration_cache::CacheBank;
use crate::preintegration::{NoiseParams, PreintegrationDelta};

/// Identifies one variable block of the window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarId {
    /// `[p, v, θ, b_a, b_g]` of a frame.
    Motion(usize),
    /// Per-frame time offset.
    Offset(usize),
    /// One offset shared by all frames.
    SharedOffset,
    /// `[p^b_c, θ^b_c]`.
    Extrinsics,
    Landmark(usize),
}

impl VarId {
    pub fn dim(&self) -> usize {
        match self {
            VarId::Motion(_) => 15,
            VarId::Offset(_) | VarId::SharedOffset => 1,
            VarId::Extrinsics => 6,
            VarId::Landmark(_) => 3,
        }
    }
}

/// Value of a variable block, used as a linearization point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VarValue {
    Motion(FrameState),
    Offset(f64),
    Extrinsics(Extrinsics),
    Landmark(Vec3),
}

impl VarValue {
    /// `self ⊟ base` in the error-state coordinates of the block.
    pub fn boxminus(&self, base: &VarValue) -> Result<Vec<f64>> {
        match (self, base) {
            (VarValue::Motion(a), VarValue::Motion(b)) => Ok(a.motion_boxminus(b).to_vec()),
            (VarValue::Offset(a), VarValue::Offset(b)) => Ok(vec![a - b]),
            (VarValue::Extrinsics(a), VarValue::Extrinsics(b)) => Ok(a.boxminus(b).to_vec()),
            (VarValue::Landmark(a), VarValue::Landmark(b)) => Ok((a - b).as_slice().to_vec()),
            _ => Err(Error::DimensionMismatch {
                expected: base.dim(),
                got: self.dim(),
            }),
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            VarValue::Motion(_) => 15,
            VarValue::Offset(_) => 1,
            VarValue::Extrinsics(_) => 6,
            VarValue::Landmark(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ResidualKind {
    Inertial,
    BiasWalk,
    Visual,
    OffsetWalk,
    Prior,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JacobianBlock {
    pub var: VarId,
    pub matrix: DMatrix<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock {
    pub kind: ResidualKind,
    pub residual: DVector<f64>,
    /// Unwhitened Jacobians, one per touched variable.
    pub jacobians: Vec<JacobianBlock>,
    /// `Σ^{-1/2}`, so that the whitened residual is `sqrt_information · residual`.
    pub sqrt_information: DMatrix<f64>,
    /// Huber threshold on the whitened residual norm.
    pub huber: Option<f64>,
}

impl ResidualBlock {
    pub fn whitened(&self) -> DVector<f64> {
        &self.sqrt_information * &self.residual
    }

    /// Robust cost `ρ(‖r_w‖²)`; plain squared norm without a loss.
    pub fn cost(&self) -> f64 {
        let s = self.whitened().norm_squared();
        match self.huber {
            Some(k) if s > k * k => 2.0 * k * s.sqrt() - k * k,
            _ => s,
        }
    }

    /// Square root of the IRLS weight applied to the whitened system.
    pub fn robust_sqrt_weight(&self) -> f64 {
        let s = self.whitened().norm_squared();
        match self.huber {
            Some(k) if s > k * k => (k / s.sqrt()).sqrt(),
            _ => 1.0,
        }
    }

    pub fn jacobian(&self, var: VarId) -> Option<&DMatrix<f64>> {
        self.jacobians.iter().find(|j| j.var == var).map(|j| &j.matrix)
    }
}

/// A feature measurement in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VisualObservation {
    pub frame_id: usize,
    pub landmark_id: usize,
    pub uv: Vector2<f64>,
    pub sigma_uv: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeOffsetModel {
    /// s/√s
    pub sigma_offset_walk: f64,
}

impl Default for TimeOffsetModel {
    fn default() -> Self {
        Self {
            sigma_offset_walk: 0.01,
        }
    }
}

/// Body pose at the capture instant `t̃ = t_k + Δt^o` and its derivatives.
#[derive(Debug, Clone, Copy)]
pub struct OffsetPose {
    pub pose: Pose,
    /// `t_k → t̃` delta, bias-corrected to the frame biases.
    pub delta: PreintegrationDelta,
    /// `dp̃/dΔt^o`, world frame.
    pub dp_dt: Vec3,
    /// Body angular rate at `t̃`: `dR̃/dΔt^o = R̃·⌊ω⌋×`.
    pub omega: Vec3,
}

/// Propagates a frame state to its capture instant through the cache.
pub fn pose_at_offset(state: &FrameState, bank: &mut CacheBank, gravity: &Vec3) -> Result<OffsetPose> {
    let dt = state.time_offset;
    let t_k = state.timestamp;
    if !bank.contains(t_k) {
        bank.insert_frame(t_k, state.bias_accel, state.bias_gyro);
    }
    let it = bank.integrate_with_rates(t_k, t_k + dt, &state.bias_accel, &state.bias_gyro)?;
    let r = state.pose.rotation;
    let position =
        state.pose.position + state.velocity * dt - 0.5 * gravity * dt * dt + r * it.delta.alpha;
    let rotation = r * it.delta.dq;
    Ok(OffsetPose {
        pose: Pose::new(rotation, position),
        delta: it.delta,
        dp_dt: state.velocity - gravity * dt + r * it.rates.dalpha_dt,
        omega: it.rates.omega,
    })
}

fn to_dmatrix<const R: usize, const C: usize>(m: &SMatrix<f64, R, C>) -> DMatrix<f64> {
    DMatrix::from_column_slice(R, C, m.as_slice())
}

/// Reprojection residual at the capture instant.
///
/// `offset_var` names the variable that carries the frame's time offset
/// (a per-frame slot or the shared one).
pub fn visual_residual(
    state: &FrameState,
    offset_pose: &OffsetPose,
    extr: &Extrinsics,
    landmark: &Vec3,
    obs: &VisualObservation,
    offset_var: VarId,
    depth_epsilon: f64,
    huber: Option<f64>,
) -> Result<ResidualBlock> {
    let rt = offset_pose.pose.rotation.to_rotation_matrix().into_inner().transpose();
    let r_bc_t = extr.rotation.to_rotation_matrix().into_inner().transpose();
    let rel = landmark - offset_pose.pose.position;
    let f_b = rt * rel;
    let f_c = r_bc_t * (f_b - extr.translation);
    if f_c.z <= depth_epsilon {
        return Err(Error::BehindCamera { depth: f_c.z });
    }
    let z = f_c.z;
    let proj = Vector2::new(f_c.x / z, f_c.y / z);
    let residual = proj - obs.uv;
    let dproj = Matrix2x3::new(1.0 / z, 0.0, -f_c.x / (z * z), 0.0, 1.0 / z, -f_c.y / (z * z));

    let r = state.pose.rotation.to_rotation_matrix().into_inner();
    let d = offset_pose.delta.rotation_matrix();
    let dt = d.transpose();
    let m = r_bc_t * rt;
    let delta = &offset_pose.delta;
    let f_b_skew = skew(&f_b);

    // Motion block [p, v, θ, b_a, b_g].
    let mut d_motion = SMatrix::<f64, 3, 15>::zeros();
    d_motion.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-m));
    d_motion
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(-m * state.time_offset));
    let d_theta = 2.0 * r_bc_t * dt * (skew(&(r.transpose() * rel)) + skew(&delta.alpha));
    d_motion.fixed_view_mut::<3, 3>(0, 6).copy_from(&d_theta);
    d_motion
        .fixed_view_mut::<3, 3>(0, 9)
        .copy_from(&(-r_bc_t * dt * delta.jac_bias_accel_alpha));
    d_motion.fixed_view_mut::<3, 3>(0, 12).copy_from(
        &(r_bc_t * (f_b_skew * delta.jac_bias_gyro_theta - dt * delta.jac_bias_gyro_alpha)),
    );

    let mut d_extr = SMatrix::<f64, 3, 6>::zeros();
    d_extr.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r_bc_t));
    d_extr
        .fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&(2.0 * skew(&f_c)));

    let d_offset = r_bc_t * (f_b_skew * offset_pose.omega - rt * offset_pose.dp_dt);

    let sqrt_info = DMatrix::identity(2, 2) / obs.sigma_uv;
    Ok(ResidualBlock {
        kind: ResidualKind::Visual,
        residual: DVector::from_column_slice(residual.as_slice()),
        jacobians: vec![
            JacobianBlock {
                var: VarId::Motion(obs.frame_id),
                matrix: to_dmatrix(&(dproj * d_motion)),
            },
            JacobianBlock {
                var: offset_var,
                matrix: to_dmatrix(&(dproj * d_offset)),
            },
            JacobianBlock {
                var: VarId::Extrinsics,
                matrix: to_dmatrix(&(dproj * d_extr)),
            },
            JacobianBlock {
                var: VarId::Landmark(obs.landmark_id),
                matrix: to_dmatrix(&(dproj * m)),
            },
        ],
        sqrt_information: sqrt_info,
        huber,
    })
}

/// `Σ^{-1/2}` as the inverse Cholesky factor of `Σ`.
pub fn sqrt_information(cov: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = cov.clone().cholesky().ok_or(Error::NonPsdCovariance)?;
    let l = chol.l();
    l.try_inverse().ok_or(Error::NonPsdCovariance)
}

/// Inertial residual between consecutive frames `k` and `k + 1`.
///
/// `delta` spans `[t_k, t_{k+1}]` and is corrected to the biases of frame `k`
/// to first order through its bias Jacobians.
pub fn inertial_residual(
    state_k: &FrameState,
    state_k1: &FrameState,
    delta: &PreintegrationDelta,
    gravity: &Vec3,
    frame_ids: (usize, usize),
) -> Result<ResidualBlock> {
    let dba = state_k.bias_accel - delta.linearization_bias_accel;
    let dbg = state_k.bias_gyro - delta.linearization_bias_gyro;
    let alpha = delta.alpha + delta.jac_bias_accel_alpha * dba + delta.jac_bias_gyro_alpha * dbg;
    let beta = delta.beta + delta.jac_bias_accel_beta * dba + delta.jac_bias_gyro_beta * dbg;
    let phi = delta.jac_bias_gyro_theta * dbg;
    let corr = exp_so3(&phi);
    let q_hat = delta.dq * corr;

    let t = delta.dt;
    let q0 = state_k.pose.rotation;
    let q1 = state_k1.pose.rotation;
    let r0t = q0.to_rotation_matrix().into_inner().transpose();
    let p_term = r0t
        * (state_k1.pose.position - state_k.pose.position - state_k.velocity * t
            + 0.5 * gravity * t * t);
    let v_term = r0t * (state_k1.velocity - state_k.velocity + gravity * t);
    let b = q0.inverse() * q1;
    let e = q_hat.inverse() * b;
    let ev = e.imag();

    let mut res = SMatrix::<f64, 9, 1>::zeros();
    res.fixed_rows_mut::<3>(0).copy_from(&(p_term - alpha));
    res.fixed_rows_mut::<3>(3).copy_from(&(v_term - beta));
    res.fixed_rows_mut::<3>(6).copy_from(&(2.0 * ev));

    let mut j0 = SMatrix::<f64, 9, 15>::zeros();
    let mut j1 = SMatrix::<f64, 9, 15>::zeros();
    // Position row.
    j0.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-r0t));
    j0.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-r0t * t));
    j0.fixed_view_mut::<3, 3>(0, 6).copy_from(&(2.0 * skew(&p_term)));
    j0.fixed_view_mut::<3, 3>(0, 9).copy_from(&(-delta.jac_bias_accel_alpha));
    j0.fixed_view_mut::<3, 3>(0, 12).copy_from(&(-delta.jac_bias_gyro_alpha));
    j1.fixed_view_mut::<3, 3>(0, 0).copy_from(&r0t);
    // Velocity row.
    j0.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-r0t));
    j0.fixed_view_mut::<3, 3>(3, 6).copy_from(&(2.0 * skew(&v_term)));
    j0.fixed_view_mut::<3, 3>(3, 9).copy_from(&(-delta.jac_bias_accel_beta));
    j0.fixed_view_mut::<3, 3>(3, 12).copy_from(&(-delta.jac_bias_gyro_beta));
    j1.fixed_view_mut::<3, 3>(3, 3).copy_from(&r0t);
    // Rotation row.
    let lr = quat_left_matrix(&q_hat.inverse()) * quat_right_matrix(&b);
    j0.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(-2.0 * lr.fixed_view::<3, 3>(0, 0)));
    let re = quat_right_matrix(&e);
    j0.fixed_view_mut::<3, 3>(6, 12)
        .copy_from(&(-re.fixed_view::<3, 3>(0, 0) * right_jacobian(&phi) * delta.jac_bias_gyro_theta));
    j1.fixed_view_mut::<3, 3>(6, 6)
        .copy_from(&(2.0 * (Mat3::identity() * e.w + skew(&ev))));

    let cov = DMatrix::from_column_slice(9, 9, delta.covariance.as_slice());
    let sqrt_info = sqrt_information(&cov)?;
    Ok(ResidualBlock {
        kind: ResidualKind::Inertial,
        residual: DVector::from_column_slice(res.as_slice()),
        jacobians: vec![
            JacobianBlock {
                var: VarId::Motion(frame_ids.0),
                matrix: to_dmatrix(&j0),
            },
            JacobianBlock {
                var: VarId::Motion(frame_ids.1),
                matrix: to_dmatrix(&j1),
            },
        ],
        sqrt_information: sqrt_info,
        huber: None,
    })
}

/// Bias random-walk residual `[b_a1 − b_a0, b_g1 − b_g0]` over `dt`.
pub fn bias_walk_residual(
    state_k: &FrameState,
    state_k1: &FrameState,
    noise: &NoiseParams,
    dt: f64,
    frame_ids: (usize, usize),
) -> ResidualBlock {
    let mut r = DVector::zeros(6);
    r.rows_mut(0, 3)
        .copy_from(&(state_k1.bias_accel - state_k.bias_accel));
    r.rows_mut(3, 3)
        .copy_from(&(state_k1.bias_gyro - state_k.bias_gyro));
    let mut j0 = DMatrix::zeros(6, 15);
    let mut j1 = DMatrix::zeros(6, 15);
    for i in 0..6 {
        j0[(i, 9 + i)] = -1.0;
        j1[(i, 9 + i)] = 1.0;
    }
    let dt = dt.abs().max(1e-6);
    let mut s = DMatrix::zeros(6, 6);
    for i in 0..3 {
        s[(i, i)] = 1.0 / (noise.sigma_accel_walk * dt.sqrt());
        s[(i + 3, i + 3)] = 1.0 / (noise.sigma_gyro_walk * dt.sqrt());
    }
    ResidualBlock {
        kind: ResidualKind::BiasWalk,
        residual: r,
        jacobians: vec![
            JacobianBlock {
                var: VarId::Motion(frame_ids.0),
                matrix: j0,
            },
            JacobianBlock {
                var: VarId::Motion(frame_ids.1),
                matrix: j1,
            },
        ],
        sqrt_information: s,
        huber: None,
    }
}

/// Random-walk residual `Δt^o_{k+1} − Δt^o_k` with variance `dt·σ_o²`.
pub fn offset_walk_residual(
    state_k: &FrameState,
    state_k1: &FrameState,
    model: &TimeOffsetModel,
    frame_ids: (usize, usize),
) -> ResidualBlock {
    let dt = (state_k1.timestamp - state_k.timestamp).abs().max(1e-9);
    let weight = 1.0 / (dt * model.sigma_offset_walk * model.sigma_offset_walk).sqrt();
    ResidualBlock {
        kind: ResidualKind::OffsetWalk,
        residual: DVector::from_element(1, state_k1.time_offset - state_k.time_offset),
        jacobians: vec![
            JacobianBlock {
                var: VarId::Offset(frame_ids.0),
                matrix: DMatrix::from_element(1, 1, -1.0),
            },
            JacobianBlock {
                var: VarId::Offset(frame_ids.1),
                matrix: DMatrix::from_element(1, 1, 1.0),
            },
        ],
        sqrt_information: DMatrix::from_element(1, 1, weight),
        huber: None,
    }
}

/// Linear prior `‖H_p·(x ⊟ x_lin) − b_p‖²` with `H_p` frozen at `x_lin`.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFactor {
    pub vars: Vec<VarId>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub linearization: Vec<VarValue>,
}

impl PriorFactor {
    pub fn dim(&self) -> usize {
        self.vars.iter().map(VarId::dim).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.vars.is_empty() || self.h.nrows() == 0
    }
}

/// Evaluates a prior at the current values returned by `current`.
pub fn prior_residual(
    prior: &PriorFactor,
    current: impl Fn(VarId) -> Option<VarValue>,
) -> Result<ResidualBlock> {
    let n = prior.dim();
    if prior.h.ncols() != n || prior.h.nrows() != prior.b.len() {
        return Err(Error::DimensionMismatch {
            expected: n,
            got: prior.h.ncols(),
        });
    }
    if prior.linearization.len() != prior.vars.len() {
        return Err(Error::DimensionMismatch {
            expected: prior.vars.len(),
            got: prior.linearization.len(),
        });
    }
    let mut dx = DVector::zeros(n);
    let mut off = 0;
    let mut jacobians = Vec::with_capacity(prior.vars.len());
    for (var, lin) in prior.vars.iter().zip(&prior.linearization) {
        let value = current(*var).ok_or(Error::DimensionMismatch {
            expected: var.dim(),
            got: 0,
        })?;
        let d = value.boxminus(lin)?;
        dx.rows_mut(off, d.len()).copy_from_slice(&d);
        let mut matrix = prior.h.columns(off, var.dim()).into_owned();
        // Exact derivative of the boxminus; `H_p` itself stays frozen.
        let rot = match (&value, lin) {
            (VarValue::Motion(a), VarValue::Motion(b)) => Some((6, quat_boxminus_jacobian(&a.pose.rotation, &b.pose.rotation))),
            (VarValue::Extrinsics(a), VarValue::Extrinsics(b)) => Some((3, quat_boxminus_jacobian(&a.rotation, &b.rotation))),
            _ => None,
        };
        if let Some((c, d)) = rot {
            let cols = matrix.columns(c, 3) * to_dmatrix(&d);
            matrix.columns_mut(c, 3).copy_from(&cols);
        }
        jacobians.push(JacobianBlock { var: *var, matrix });
        off += var.dim();
    }
    let rows = prior.h.nrows();
    Ok(ResidualBlock {
        kind: ResidualKind::Prior,
        residual: &prior.h * dx - &prior.b,
        jacobians,
        sqrt_information: DMatrix::identity(rows, rows),
        huber: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::quat_from_xyzw;
    use crate::preintegration::{integrate_delta, propagate_state, ImuSample};

    fn obs(uv: (f64, f64)) -> VisualObservation {
        VisualObservation {
            frame_id: 0,
            landmark_id: 0,
            uv: Vector2::new(uv.0, uv.1),
            sigma_uv: 1.0,
        }
    }

    fn static_pose(state: &FrameState) -> OffsetPose {
        OffsetPose {
            pose: state.pose,
            delta: PreintegrationDelta::identity(Vec3::zeros(), Vec3::zeros()),
            dp_dt: Vec3::zeros(),
            omega: Vec3::zeros(),
        }
    }

    #[test]
    fn visual_residual_known_values() {
        let st = FrameState::at_rest(0.0);
        let op = static_pose(&st);
        let e = Extrinsics::identity();
        let r = visual_residual(&st, &op, &e, &Vec3::new(0.0, 0.0, 1.0), &obs((0.0, 0.0)), VarId::Offset(0), 1e-3, None)
            .unwrap();
        assert_eq!(r.residual.as_slice(), &[0.0, 0.0]);
        let r = visual_residual(&st, &op, &e, &Vec3::new(1.0, 1.0, 2.0), &obs((0.0, 0.0)), VarId::Offset(0), 1e-3, None)
            .unwrap();
        assert_eq!(r.residual.as_slice(), &[0.5, 0.5]);
        assert!(matches!(
            visual_residual(&st, &op, &e, &Vec3::new(0.0, 0.0, -1.0), &obs((0.0, 0.0)), VarId::Offset(0), 1e-3, None),
            Err(Error::BehindCamera { .. })
        ));
    }

    #[test]
    fn offset_walk_values() {
        let mut a = FrameState::at_rest(0.0);
        let mut b = FrameState::at_rest(0.05);
        let m = TimeOffsetModel::default();
        assert_eq!(offset_walk_residual(&a, &b, &m, (0, 1)).cost(), 0.0);
        a.time_offset = 0.010;
        b.time_offset = 0.013;
        let w = offset_walk_residual(&a, &b, &m, (0, 1)).whitened()[0];
        assert!((w - 0.003 / (0.05f64 * 1e-4).sqrt()).abs() < 1e-9);
        assert!((w - 1.342).abs() < 1e-3);
        b.timestamp = 0.10;
        let w2 = offset_walk_residual(&a, &b, &m, (0, 1)).whitened()[0];
        assert!((w2 - w / 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn prior_known_values() {
        let prior = PriorFactor {
            vars: vec![VarId::Landmark(3)],
            h: DMatrix::identity(3, 3),
            b: DVector::zeros(3),
            linearization: vec![VarValue::Landmark(Vec3::zeros())],
        };
        let r = prior_residual(&prior, |_| Some(VarValue::Landmark(Vec3::zeros()))).unwrap();
        assert_eq!(r.residual.norm(), 0.0);
        let r = prior_residual(&prior, |_| Some(VarValue::Landmark(Vec3::new(1.0, 2.0, 3.0)))).unwrap();
        assert_eq!(r.residual.as_slice(), &[1.0, 2.0, 3.0]);
        let bad = PriorFactor {
            h: DMatrix::identity(3, 2),
            ..prior
        };
        assert!(matches!(
            prior_residual(&bad, |_| Some(VarValue::Landmark(Vec3::zeros()))),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    fn imu(t0: f64, t1: f64) -> Vec<ImuSample> {
        let n = ((t1 - t0) * 200.0).round() as usize;
        (0..=n)
            .map(|i| {
                let t = t0 + i as f64 / 200.0;
                ImuSample {
                    timestamp: t,
                    gyro: Vec3::new(0.4 * t.sin(), 0.3, -0.2 * t.cos()),
                    accel: Vec3::new(t.cos(), 0.5, 9.8),
                }
            })
            .collect()
    }

    #[test]
    fn inertial_residual_zero_at_propagation() {
        let s = imu(0.0, 1.0);
        let g = Vec3::new(0.0, 0.0, 9.8);
        let ba = Vec3::new(0.01, 0.02, -0.01);
        let bg = Vec3::new(0.001, -0.002, 0.0);
        let d = integrate_delta(&s, &ba, &bg, 0.2, 0.45, &NoiseParams::default()).unwrap();
        let mut s0 = FrameState::at_rest(0.2);
        s0.pose = Pose::new(quat_from_xyzw(0.1, 0.2, 0.3, 0.9), Vec3::new(1.0, 2.0, 3.0));
        s0.velocity = Vec3::new(0.3, -0.1, 0.2);
        s0.bias_accel = ba;
        s0.bias_gyro = bg;
        let (pose, v) = propagate_state(&s0, &d, &g);
        let mut s1 = s0;
        s1.timestamp = 0.45;
        s1.pose = pose;
        s1.velocity = v;
        let r = inertial_residual(&s0, &s1, &d, &g, (0, 1)).unwrap();
        assert!(r.residual.norm() < 1e-12);

        let eps = 1e-3;
        s1.pose.position.x += eps;
        let r2 = inertial_residual(&s0, &s1, &d, &g, (0, 1)).unwrap();
        let expected = s0.pose.rotation.inverse() * Vec3::new(eps, 0.0, 0.0);
        assert!((r2.residual.rows(0, 3) - DVector::from_column_slice(expected.as_slice())).norm() < 1e-12);
    }

    #[test]
    fn static_trajectory_pose_unchanged() {
        // Level and stationary: specific force is the gravity reaction.
        let s: Vec<ImuSample> = (0..=400)
            .map(|i| ImuSample {
                timestamp: i as f64 / 200.0,
                gyro: Vec3::zeros(),
                accel: Vec3::new(0.0, 0.0, 9.8),
            })
            .collect();
        let mut bank = CacheBank::new(NoiseParams::default(), 0.1, 100).with_samples(s).unwrap();
        let g = Vec3::new(0.0, 0.0, 9.8);
        let mut st = FrameState::at_rest(1.0);
        st.pose.position = Vec3::new(0.5, -0.2, 1.0);
        for off in [0.0, 0.03, -0.047, 0.06] {
            st.time_offset = off;
            let op = pose_at_offset(&st, &mut bank, &g).unwrap();
            assert!((op.pose.position - st.pose.position).norm() < 1e-9);
            assert!(op.pose.rotation.angle_to(&st.pose.rotation) < 1e-9);
        }
    }
}
