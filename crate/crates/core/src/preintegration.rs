//! Mid-point preintegration of IMU samples into relative-motion deltas.
//!
//! An interval is cut at every IMU read-out time it contains; each piece is
//! one mid-point step whose endpoint signals are linearly interpolated from the
//! surrounding samples. Each step is itself a [`PreintegrationDelta`] and the
//! interval delta is the left fold of [`PreintegrationDelta::compose`] over the
//! steps, so a delta can be extended or split at any read-out time without
//! changing the result. A negative span integrates backward in time; the
//! result is the inverse of the forward delta over the same samples.

use nalgebra::SMatrix;

use crate::error::{Error, Result};
use crate::geometry::{
    exp_so3, renormalize, right_jacobian, skew, FrameState, Mat3, Pose, Quat, Vec3,
};

pub type Mat9 = SMatrix<f64, 9, 9>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImuSample {
    pub timestamp: f64,
    pub gyro: Vec3,
    pub accel: Vec3,
}

/// Continuous-time IMU noise densities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseParams {
    /// rad/s/√Hz
    pub sigma_gyro: f64,
    /// m/s²/√Hz
    pub sigma_accel: f64,
    /// rad/s²/√Hz
    pub sigma_gyro_walk: f64,
    /// m/s³/√Hz
    pub sigma_accel_walk: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sigma_gyro: 1.0e-3,
            sigma_accel: 1.0e-2,
            sigma_gyro_walk: 1.0e-5,
            sigma_accel_walk: 1.0e-4,
        }
    }
}

impl NoiseParams {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.sigma_gyro,
            self.sigma_accel,
            self.sigma_gyro_walk,
            self.sigma_accel_walk,
        ];
        if all.iter().all(|s| *s > 0.0 && s.is_finite()) {
            Ok(())
        } else {
            Err(Error::Config("noise densities must be strictly positive".into()))
        }
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            sigma_gyro: self.sigma_gyro * factor,
            sigma_accel: self.sigma_accel * factor,
            sigma_gyro_walk: self.sigma_gyro_walk * factor,
            sigma_accel_walk: self.sigma_accel_walk * factor,
        }
    }
}

/// Preintegrated `α`, `β`, `q` over `dt` with covariance ordered
/// `[δα, δβ, δθ]` and first-order bias Jacobians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreintegrationDelta {
    pub alpha: Vec3,
    pub beta: Vec3,
    pub dq: Quat,
    pub covariance: Mat9,
    pub jac_bias_accel_alpha: Mat3,
    pub jac_bias_gyro_alpha: Mat3,
    pub jac_bias_accel_beta: Mat3,
    pub jac_bias_gyro_beta: Mat3,
    pub jac_bias_gyro_theta: Mat3,
    pub linearization_bias_accel: Vec3,
    pub linearization_bias_gyro: Vec3,
    pub dt: f64,
}

impl PreintegrationDelta {
    pub fn identity(bias_accel: Vec3, bias_gyro: Vec3) -> Self {
        Self {
            alpha: Vec3::zeros(),
            beta: Vec3::zeros(),
            dq: Quat::identity(),
            covariance: Mat9::zeros(),
            jac_bias_accel_alpha: Mat3::zeros(),
            jac_bias_gyro_alpha: Mat3::zeros(),
            jac_bias_accel_beta: Mat3::zeros(),
            jac_bias_gyro_beta: Mat3::zeros(),
            jac_bias_gyro_theta: Mat3::zeros(),
            linearization_bias_accel: bias_accel,
            linearization_bias_gyro: bias_gyro,
            dt: 0.0,
        }
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.dq.to_rotation_matrix().into_inner()
    }

    /// `self` over `[t0, t1]` followed by `next` over `[t1, t2]`.
    ///
    /// Both deltas must share a linearization bias. The covariance treats the
    /// two pieces as independent.
    pub fn compose(&self, next: &PreintegrationDelta) -> PreintegrationDelta {
        let r1 = self.rotation_matrix();
        let r2t = next.rotation_matrix().transpose();
        let t2 = next.dt;
        let a_skew = skew(&next.alpha);
        let b_skew = skew(&next.beta);

        let mut a = Mat9::identity();
        a.fixed_view_mut::<3, 3>(0, 3).copy_from(&(Mat3::identity() * t2));
        a.fixed_view_mut::<3, 3>(0, 6).copy_from(&(-r1 * a_skew));
        a.fixed_view_mut::<3, 3>(3, 6).copy_from(&(-r1 * b_skew));
        a.fixed_view_mut::<3, 3>(6, 6).copy_from(&r2t);
        let mut b = Mat9::identity();
        b.fixed_view_mut::<3, 3>(0, 0).copy_from(&r1);
        b.fixed_view_mut::<3, 3>(3, 3).copy_from(&r1);
        let cov = a * self.covariance * a.transpose() + b * next.covariance * b.transpose();

        PreintegrationDelta {
            alpha: self.alpha + self.beta * t2 + r1 * next.alpha,
            beta: self.beta + r1 * next.beta,
            dq: renormalize(&(self.dq * next.dq)),
            covariance: 0.5 * (cov + cov.transpose()),
            jac_bias_accel_alpha: self.jac_bias_accel_alpha
                + self.jac_bias_accel_beta * t2
                + r1 * next.jac_bias_accel_alpha,
            jac_bias_gyro_alpha: self.jac_bias_gyro_alpha
                + self.jac_bias_gyro_beta * t2
                + r1 * next.jac_bias_gyro_alpha
                - r1 * a_skew * self.jac_bias_gyro_theta,
            jac_bias_accel_beta: self.jac_bias_accel_beta + r1 * next.jac_bias_accel_beta,
            jac_bias_gyro_beta: self.jac_bias_gyro_beta + r1 * next.jac_bias_gyro_beta
                - r1 * b_skew * self.jac_bias_gyro_theta,
            jac_bias_gyro_theta: r2t * self.jac_bias_gyro_theta + next.jac_bias_gyro_theta,
            linearization_bias_accel: self.linearization_bias_accel,
            linearization_bias_gyro: self.linearization_bias_gyro,
            dt: self.dt + t2,
        }
    }

    /// The delta that undoes `self`: integration over the same span in the
    /// opposite direction.
    pub fn inverse(&self) -> PreintegrationDelta {
        let r = self.rotation_matrix();
        let rt = r.transpose();
        let t = self.dt;
        let beta = -(rt * self.beta);
        let alpha = -(rt * (self.alpha - self.beta * t));
        let sa = skew(&alpha);
        let sb = skew(&beta);

        let mut m = Mat9::zeros();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-rt));
        m.fixed_view_mut::<3, 3>(0, 3).copy_from(&(rt * t));
        m.fixed_view_mut::<3, 3>(0, 6).copy_from(&sa);
        m.fixed_view_mut::<3, 3>(3, 3).copy_from(&(-rt));
        m.fixed_view_mut::<3, 3>(3, 6).copy_from(&sb);
        m.fixed_view_mut::<3, 3>(6, 6).copy_from(&(-r));
        let cov = m * self.covariance * m.transpose();

        PreintegrationDelta {
            alpha,
            beta,
            dq: self.dq.inverse(),
            covariance: 0.5 * (cov + cov.transpose()),
            jac_bias_accel_alpha: -rt * self.jac_bias_accel_alpha
                + rt * self.jac_bias_accel_beta * t,
            jac_bias_gyro_alpha: -rt * self.jac_bias_gyro_alpha
                + rt * self.jac_bias_gyro_beta * t
                + sa * self.jac_bias_gyro_theta,
            jac_bias_accel_beta: -rt * self.jac_bias_accel_beta,
            jac_bias_gyro_beta: -rt * self.jac_bias_gyro_beta + sb * self.jac_bias_gyro_theta,
            jac_bias_gyro_theta: -r * self.jac_bias_gyro_theta,
            linearization_bias_accel: self.linearization_bias_accel,
            linearization_bias_gyro: self.linearization_bias_gyro,
            dt: -t,
        }
    }

    /// Bias-Jacobian matrix of `[α, β, θ]` w.r.t. `[b_a, b_g]`.
    pub fn bias_jacobian(&self) -> SMatrix<f64, 9, 6> {
        let mut j = SMatrix::<f64, 9, 6>::zeros();
        j.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.jac_bias_accel_alpha);
        j.fixed_view_mut::<3, 3>(0, 3).copy_from(&self.jac_bias_gyro_alpha);
        j.fixed_view_mut::<3, 3>(3, 0).copy_from(&self.jac_bias_accel_beta);
        j.fixed_view_mut::<3, 3>(3, 3).copy_from(&self.jac_bias_gyro_beta);
        j.fixed_view_mut::<3, 3>(6, 3).copy_from(&self.jac_bias_gyro_theta);
        j
    }
}

/// Largest norm of the accel/gyro bias change relative to the linearization point.
pub fn bias_distance(delta: &PreintegrationDelta, bias_a: &Vec3, bias_g: &Vec3) -> f64 {
    (bias_a - delta.linearization_bias_accel)
        .norm()
        .max((bias_g - delta.linearization_bias_gyro).norm())
}

/// First-order correction of `delta` to new biases.
pub fn bias_correct(
    delta: &PreintegrationDelta,
    new_bias_a: &Vec3,
    new_bias_g: &Vec3,
    bound: f64,
) -> Result<PreintegrationDelta> {
    let distance = bias_distance(delta, new_bias_a, new_bias_g);
    if distance > bound {
        return Err(Error::BiasCorrectionOutOfRange { distance, bound });
    }
    let dba = new_bias_a - delta.linearization_bias_accel;
    let dbg = new_bias_g - delta.linearization_bias_gyro;
    if dba == Vec3::zeros() && dbg == Vec3::zeros() {
        return Ok(*delta);
    }
    let mut out = *delta;
    out.alpha += delta.jac_bias_accel_alpha * dba + delta.jac_bias_gyro_alpha * dbg;
    out.beta += delta.jac_bias_accel_beta * dba + delta.jac_bias_gyro_beta * dbg;
    out.dq = renormalize(&(delta.dq * exp_so3(&(delta.jac_bias_gyro_theta * dbg))));
    out.linearization_bias_accel = *new_bias_a;
    out.linearization_bias_gyro = *new_bias_g;
    Ok(out)
}

/// Propagates a frame state through `delta` under the model
/// `p' = p + vΔt − ½gΔt² + Rα`, `v' = v − gΔt + Rβ`, `q' = q ⊗ Δq`.
pub fn propagate_state(
    state: &FrameState,
    delta: &PreintegrationDelta,
    gravity: &Vec3,
) -> (Pose, Vec3) {
    let r = state.pose.rotation;
    let dt = delta.dt;
    let position = state.pose.position + state.velocity * dt - 0.5 * gravity * dt * dt
        + r * delta.alpha;
    let velocity = state.velocity - gravity * dt + r * delta.beta;
    let rotation = renormalize(&(r * delta.dq));
    (Pose::new(rotation, position), velocity)
}

/// Checks that sample timestamps are strictly increasing.
pub fn check_monotonic(samples: &[ImuSample]) -> Result<()> {
    for (i, w) in samples.windows(2).enumerate() {
        if !(w[1].timestamp > w[0].timestamp) {
            return Err(Error::NonMonotonicTimestamps { index: i + 1 });
        }
    }
    Ok(())
}

/// Raw IMU signal at one instant together with the slope of the linear
/// interpolant on the IMU interval used for the step.
#[derive(Debug, Clone, Copy)]
struct SignalPoint {
    gyro: Vec3,
    accel: Vec3,
}

/// Bias-corrected values and slopes of the final partial step of a delta;
/// used to differentiate an endpoint-dependent delta w.r.t. its end time.
#[derive(Debug, Clone, Copy)]
pub struct TailStep {
    /// Signed duration of the partial step.
    pub h: f64,
    pub gyro_start: Vec3,
    pub accel_start: Vec3,
    pub gyro_slope: Vec3,
    pub accel_slope: Vec3,
}

impl TailStep {
    pub fn gyro_end(&self) -> Vec3 {
        self.gyro_start + self.gyro_slope * self.h
    }

    pub fn accel_end(&self) -> Vec3 {
        self.accel_start + self.accel_slope * self.h
    }
}

/// Derivatives of an endpoint-dependent delta w.r.t. its end time.
#[derive(Debug, Clone, Copy)]
pub struct EndRates {
    /// `dα/dt` in the start frame.
    pub dalpha_dt: Vec3,
    /// Angular rate at the end, body frame, such that `dR/dt = R·⌊ω⌋×`.
    pub omega: Vec3,
}

/// Derivatives of `prefix ∘ tail(h)` w.r.t. `h`, exact for the discrete map.
pub fn end_rates(prefix: &PreintegrationDelta, tail: &TailStep) -> EndRates {
    let h = tail.h;
    let w_end = tail.gyro_end();
    let a_end = tail.accel_end();
    let phi = 0.5 * (tail.gyro_start + w_end) * h;
    let rs = exp_so3(&phi).to_rotation_matrix().into_inner();
    let jr = right_jacobian(&phi);
    let omega = jr * w_end;
    let dalpha_s = 0.5 * h * (tail.accel_start + rs * a_end)
        + 0.25 * h * h * rs * (tail.accel_slope - skew(&a_end) * omega);
    EndRates {
        dalpha_dt: prefix.beta + prefix.rotation_matrix() * dalpha_s,
        omega,
    }
}

/// Stateless mid-point integrator over a sorted sample slice.
#[derive(Debug, Clone, Copy)]
pub struct Integrator<'a> {
    samples: &'a [ImuSample],
    bias_a: Vec3,
    bias_g: Vec3,
    noise: NoiseParams,
}

impl<'a> Integrator<'a> {
    pub fn new(samples: &'a [ImuSample], bias_a: Vec3, bias_g: Vec3, noise: NoiseParams) -> Self {
        Self {
            samples,
            bias_a,
            bias_g,
            noise,
        }
    }

    pub fn samples(&self) -> &'a [ImuSample] {
        self.samples
    }

    pub fn bias(&self) -> (Vec3, Vec3) {
        (self.bias_a, self.bias_g)
    }

    pub fn identity(&self) -> PreintegrationDelta {
        PreintegrationDelta::identity(self.bias_a, self.bias_g)
    }

    pub fn check_coverage(&self, t0: f64, t1: f64) -> Result<()> {
        let (lo, hi) = if t0 <= t1 { (t0, t1) } else { (t1, t0) };
        match (self.samples.first(), self.samples.last()) {
            (Some(first), Some(last)) if first.timestamp <= lo && last.timestamp >= hi => Ok(()),
            _ => Err(Error::InsufficientImuData { start: lo, end: hi }),
        }
    }

    /// Index of the last sample with timestamp `≤ t`.
    pub fn floor_index(&self, t: f64) -> Option<usize> {
        let n = self.samples.partition_point(|s| s.timestamp <= t);
        n.checked_sub(1)
    }

    /// Index of the first sample with timestamp `≥ t`.
    pub fn ceil_index(&self, t: f64) -> Option<usize> {
        let n = self.samples.partition_point(|s| s.timestamp < t);
        (n < self.samples.len()).then_some(n)
    }

    /// Index pair `(i, i + 1)` of the IMU interval containing the open span
    /// between `a` and `b` (which must not straddle a sample).
    fn interval(&self, a: f64, b: f64) -> (usize, usize) {
        let mid = 0.5 * (a + b);
        let last = self.samples.len() - 1;
        let i = self.floor_index(mid).unwrap_or(0).min(last.saturating_sub(1));
        (i, (i + 1).min(last))
    }

    fn signal_in(&self, t: f64, (i, j): (usize, usize)) -> SignalPoint {
        let s0 = &self.samples[i];
        let s1 = &self.samples[j];
        if t == s0.timestamp || i == j {
            return SignalPoint {
                gyro: s0.gyro,
                accel: s0.accel,
            };
        }
        if t == s1.timestamp {
            return SignalPoint {
                gyro: s1.gyro,
                accel: s1.accel,
            };
        }
        let lambda = (t - s0.timestamp) / (s1.timestamp - s0.timestamp);
        SignalPoint {
            gyro: s0.gyro + (s1.gyro - s0.gyro) * lambda,
            accel: s0.accel + (s1.accel - s0.accel) * lambda,
        }
    }

    fn slopes(&self, (i, j): (usize, usize)) -> (Vec3, Vec3) {
        if i == j {
            return (Vec3::zeros(), Vec3::zeros());
        }
        let s0 = &self.samples[i];
        let s1 = &self.samples[j];
        let dt = s1.timestamp - s0.timestamp;
        ((s1.gyro - s0.gyro) / dt, (s1.accel - s0.accel) / dt)
    }

    /// One mid-point step between two instants inside a single IMU interval.
    pub fn step(&self, t0: f64, t1: f64) -> PreintegrationDelta {
        let h = t1 - t0;
        if h == 0.0 {
            return self.identity();
        }
        let iv = self.interval(t0, t1);
        let p0 = self.signal_in(t0, iv);
        let p1 = self.signal_in(t1, iv);
        midpoint_step(
            &(p0.gyro - self.bias_g),
            &(p0.accel - self.bias_a),
            &(p1.gyro - self.bias_g),
            &(p1.accel - self.bias_a),
            h,
            &self.noise,
            self.bias_a,
            self.bias_g,
        )
    }

    /// Bias-corrected start values and slopes of the step `t0 → t1`.
    pub fn tail(&self, t0: f64, t1: f64) -> TailStep {
        let iv = if t0 == t1 {
            // Zero-length tail: use the interval in the forward direction.
            let i = self.floor_index(t0).unwrap_or(0);
            let last = self.samples.len() - 1;
            (i.min(last.saturating_sub(1)), (i + 1).min(last))
        } else {
            self.interval(t0, t1)
        };
        let p0 = self.signal_in(t0, iv);
        let (gs, as_) = self.slopes(iv);
        TailStep {
            h: t1 - t0,
            gyro_start: p0.gyro - self.bias_g,
            accel_start: p0.accel - self.bias_a,
            gyro_slope: gs,
            accel_slope: as_,
        }
    }

    /// Sample timestamps strictly between `t0` and `t1`, in travel order.
    pub fn interior_knots(&self, t0: f64, t1: f64) -> Vec<f64> {
        if t1 >= t0 {
            let start = self.samples.partition_point(|s| s.timestamp <= t0);
            let end = self.samples.partition_point(|s| s.timestamp < t1);
            self.samples[start..end.max(start)]
                .iter()
                .map(|s| s.timestamp)
                .collect()
        } else {
            let start = self.samples.partition_point(|s| s.timestamp <= t1);
            let end = self.samples.partition_point(|s| s.timestamp < t0);
            self.samples[start..end.max(start)]
                .iter()
                .rev()
                .map(|s| s.timestamp)
                .collect()
        }
    }

    /// Integrates from `t0` to `t1` (either direction).
    pub fn integrate(&self, t0: f64, t1: f64) -> Result<(PreintegrationDelta, usize)> {
        self.check_coverage(t0, t1)?;
        let mut delta = self.identity();
        let mut prev = t0;
        let mut steps = 0;
        for knot in self.interior_knots(t0, t1).into_iter().chain(std::iter::once(t1)) {
            if knot != prev {
                delta = delta.compose(&self.step(prev, knot));
                steps += 1;
            }
            prev = knot;
        }
        delta.dt = t1 - t0;
        Ok((delta, steps))
    }
}

#[allow(clippy::too_many_arguments)]
fn midpoint_step(
    w0: &Vec3,
    a0: &Vec3,
    w1: &Vec3,
    a1: &Vec3,
    h: f64,
    noise: &NoiseParams,
    bias_a: Vec3,
    bias_g: Vec3,
) -> PreintegrationDelta {
    let phi = 0.5 * (w0 + w1) * h;
    let dq = exp_so3(&phi);
    let r = dq.to_rotation_matrix().into_inner();
    let jr = right_jacobian(&phi);
    let sum = a0 + r * a1;
    let beta = 0.5 * h * sum;
    let alpha = 0.25 * h * h * sum;

    let ra1 = r * skew(a1) * jr;
    let i_plus_r = Mat3::identity() + r;
    let j_ba_beta = -0.5 * h * i_plus_r;
    let j_ba_alpha = -0.25 * h * h * i_plus_r;
    let j_bg_beta = 0.5 * h * h * ra1;
    let j_bg_alpha = 0.25 * h * h * h * ra1;
    let j_bg_theta = -h * jr;

    let mut g_gyro = SMatrix::<f64, 9, 3>::zeros();
    g_gyro.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_bg_alpha);
    g_gyro.fixed_view_mut::<3, 3>(3, 0).copy_from(&j_bg_beta);
    g_gyro.fixed_view_mut::<3, 3>(6, 0).copy_from(&j_bg_theta);
    let mut g_accel = SMatrix::<f64, 9, 3>::zeros();
    g_accel.fixed_view_mut::<3, 3>(0, 0).copy_from(&j_ba_alpha);
    g_accel.fixed_view_mut::<3, 3>(3, 0).copy_from(&j_ba_beta);
    // White noise averaged over the step has variance σ²/|h|.
    let qg = noise.sigma_gyro * noise.sigma_gyro / h.abs();
    let qa = noise.sigma_accel * noise.sigma_accel / h.abs();
    let cov = g_gyro * g_gyro.transpose() * qg + g_accel * g_accel.transpose() * qa;

    PreintegrationDelta {
        alpha,
        beta,
        dq,
        covariance: 0.5 * (cov + cov.transpose()),
        jac_bias_accel_alpha: j_ba_alpha,
        jac_bias_gyro_alpha: j_bg_alpha,
        jac_bias_accel_beta: j_ba_beta,
        jac_bias_gyro_beta: j_bg_beta,
        jac_bias_gyro_theta: j_bg_theta,
        linearization_bias_accel: bias_a,
        linearization_bias_gyro: bias_g,
        dt: h,
    }
}

/// Integrates `samples` from `t_start` to `t_end` at fixed biases.
///
/// `t_end < t_start` integrates backward and yields the inverse of the
/// forward delta over the same span.
pub fn integrate_delta(
    samples: &[ImuSample],
    bias_a: &Vec3,
    bias_g: &Vec3,
    t_start: f64,
    t_end: f64,
    noise: &NoiseParams,
) -> Result<PreintegrationDelta> {
    check_monotonic(samples)?;
    let integrator = Integrator::new(samples, *bias_a, *bias_g, *noise);
    integrator.integrate(t_start, t_end).map(|(d, _)| d)
}
