//! Rotation algebra and the state containers shared by the estimator.
//!
//! Quaternions follow the Hamilton convention with `[x, y, z, w]` storage,
//! which is what `nalgebra::Quaternion` uses internally. Orientation states
//! are perturbed with the unnormalized error quaternion `q ⊗ [δθ; 1]`
//! (renormalized), so a small `δθ` rotates by approximately `2·δθ`.

use nalgebra::{Matrix3, Matrix4, Quaternion, UnitQuaternion, Vector3, Vector4};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;
pub type Quat = UnitQuaternion<f64>;

/// Standard gravity magnitude used by the estimator, m/s².
pub const GRAVITY_MAGNITUDE: f64 = 9.8;

/// The gravity vector `g^w` as it enters the propagation model.
pub fn gravity_vector(magnitude: f64) -> Vec3 {
    Vec3::new(0.0, 0.0, magnitude)
}

/// Composes `q ⊗ [δθ; 1]` and renormalizes.
pub fn quat_boxplus(q: &Quat, delta: &Vec3) -> Quat {
    let d = Quaternion::new(1.0, delta.x, delta.y, delta.z);
    let n = d.norm();
    let d = UnitQuaternion::new_unchecked(d / n);
    renormalize(&(q * d))
}

/// Inverse of [`quat_boxplus`]: the `δθ` with `quat_boxplus(b, δθ) = a`.
pub fn quat_boxminus(a: &Quat, b: &Quat) -> Vec3 {
    let d = canonicalize(&(b.inverse() * a));
    let q = d.quaternion();
    Vec3::new(q.i, q.j, q.k) / q.w
}

/// `∂ quat_boxminus(quat_boxplus(a, δ), b) / ∂δ` at `δ = 0`.
pub fn quat_boxminus_jacobian(a: &Quat, b: &Quat) -> Mat3 {
    let e = canonicalize(&(b.inverse() * a));
    let (v, w) = (e.imag(), e.w);
    (Mat3::identity() * w + skew(&v)) / w + v * v.transpose() / (w * w)
}

/// Resolves the double cover so that `w ≥ 0`.
pub fn canonicalize(q: &Quat) -> Quat {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        *q
    }
}

pub fn renormalize(q: &Quat) -> Quat {
    UnitQuaternion::new_normalize(q.into_inner())
}

/// Skew-symmetric cross-product matrix, `skew(v) * w = v × w`.
pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Exponential map of a rotation vector.
pub fn exp_so3(phi: &Vec3) -> Quat {
    UnitQuaternion::from_scaled_axis(*phi)
}

/// Rotation vector of a unit quaternion (shortest arc).
pub fn log_so3(q: &Quat) -> Vec3 {
    canonicalize(q).scaled_axis()
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ)·Exp(Jr(φ)·δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta2 = phi.norm_squared();
    let k = skew(phi);
    if theta2 < 1e-10 {
        return Mat3::identity() - 0.5 * k + k * k / 6.0;
    }
    let theta = theta2.sqrt();
    Mat3::identity() - (1.0 - theta.cos()) / theta2 * k
        + (theta - theta.sin()) / (theta2 * theta) * k * k
}

/// 4×4 matrix of left multiplication, `q ⊗ p = L(q)·p` in `[x, y, z, w]` order.
pub fn quat_left_matrix(q: &Quat) -> Matrix4<f64> {
    let v = q.imag();
    let w = q.w;
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(w * Mat3::identity() + skew(&v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m[(3, 3)] = w;
    m
}

/// 4×4 matrix of right multiplication, `q ⊗ p = R(p)·q` in `[x, y, z, w]` order.
pub fn quat_right_matrix(p: &Quat) -> Matrix4<f64> {
    let v = p.imag();
    let w = p.w;
    let mut m = Matrix4::zeros();
    m.fixed_view_mut::<3, 3>(0, 0)
        .copy_from(&(w * Mat3::identity() - skew(&v)));
    m.fixed_view_mut::<3, 1>(0, 3).copy_from(&v);
    m.fixed_view_mut::<1, 3>(3, 0).copy_from(&(-v.transpose()));
    m[(3, 3)] = w;
    m
}

/// `[x, y, z, w]` coefficients of a quaternion.
pub fn quat_coeffs(q: &Quat) -> Vector4<f64> {
    q.into_inner().coords
}

/// Builds a unit quaternion from `[x, y, z, w]`. Coefficients already unit
/// to rounding are kept as given, so printed quaternions read back exactly.
pub fn quat_from_xyzw(x: f64, y: f64, z: f64, w: f64) -> Quat {
    let q = Quaternion::new(w, x, y, z);
    if (q.norm_squared() - 1.0).abs() < 1e-14 {
        UnitQuaternion::new_unchecked(q)
    } else {
        UnitQuaternion::new_normalize(q)
    }
}

/// Rigid pose of a frame expressed in the world frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: Quat,
    pub position: Vec3,
}

impl Pose {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            position: Vec3::zeros(),
        }
    }

    pub fn new(rotation: Quat, position: Vec3) -> Self {
        Self { rotation, position }
    }

    pub fn inverse(&self) -> Self {
        let r = self.rotation.inverse();
        Self {
            rotation: r,
            position: -(r * self.position),
        }
    }

    /// `self ∘ other`.
    pub fn compose(&self, other: &Pose) -> Self {
        Self {
            rotation: renormalize(&(self.rotation * other.rotation)),
            position: self.position + self.rotation * other.position,
        }
    }

    pub fn transform_point(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.position
    }
}

/// Interpolates between two poses: slerp on the rotation, lerp on position.
pub fn slerp_pose(a: &Pose, b: &Pose, t: f64) -> Pose {
    let mut qb = b.rotation;
    if a.rotation.coords.dot(&qb.coords) < 0.0 {
        qb = UnitQuaternion::new_unchecked(-qb.into_inner());
    }
    let rel = a.rotation.inverse() * qb;
    let rotation = renormalize(&(a.rotation * exp_so3(&(rel.scaled_axis() * t))));
    Pose {
        rotation,
        position: a.position + (b.position - a.position) * t,
    }
}

/// Estimator sub-state of one frame at its recorded timestamp `t_k`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameState {
    /// Seconds since the dataset origin.
    pub timestamp: f64,
    pub pose: Pose,
    pub velocity: Vec3,
    pub bias_accel: Vec3,
    pub bias_gyro: Vec3,
    /// Camera-IMU time offset `Δt^o_k`, seconds.
    pub time_offset: f64,
}

impl FrameState {
    pub fn at_rest(timestamp: f64) -> Self {
        Self {
            timestamp,
            pose: Pose::identity(),
            velocity: Vec3::zeros(),
            bias_accel: Vec3::zeros(),
            bias_gyro: Vec3::zeros(),
            time_offset: 0.0,
        }
    }

    /// Applies a 15-dof motion update `[δp, δv, δθ, δb_a, δb_g]`.
    pub fn apply_motion_delta(&mut self, d: &[f64]) {
        debug_assert_eq!(d.len(), 15);
        let v = |i: usize| Vec3::new(d[i], d[i + 1], d[i + 2]);
        self.pose.position += v(0);
        self.velocity += v(3);
        self.pose.rotation = quat_boxplus(&self.pose.rotation, &v(6));
        self.bias_accel += v(9);
        self.bias_gyro += v(12);
    }

    /// Motion difference `self ⊟ base` in the same 15-dof layout.
    pub fn motion_boxminus(&self, base: &FrameState) -> [f64; 15] {
        let mut out = [0.0; 15];
        let parts = [
            self.pose.position - base.pose.position,
            self.velocity - base.velocity,
            quat_boxminus(&self.pose.rotation, &base.pose.rotation),
            self.bias_accel - base.bias_accel,
            self.bias_gyro - base.bias_gyro,
        ];
        for (i, p) in parts.iter().enumerate() {
            out[3 * i..3 * i + 3].copy_from_slice(p.as_slice());
        }
        out
    }
}

/// Camera-to-IMU extrinsics: `rotation = q^b_c`, `translation = p^b_c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Extrinsics {
    pub rotation: Quat,
    pub translation: Vec3,
}

impl Extrinsics {
    pub fn identity() -> Self {
        Self {
            rotation: Quat::identity(),
            translation: Vec3::zeros(),
        }
    }

    pub fn apply_delta(&mut self, d: &[f64]) {
        self.translation += Vec3::new(d[0], d[1], d[2]);
        self.rotation = quat_boxplus(&self.rotation, &Vec3::new(d[3], d[4], d[5]));
    }

    pub fn boxminus(&self, base: &Extrinsics) -> [f64; 6] {
        let t = self.translation - base.translation;
        let r = quat_boxminus(&self.rotation, &base.rotation);
        [t.x, t.y, t.z, r.x, r.y, r.z]
    }
}

/// Column layout of the stacked error state: motion blocks of every frame,
/// the extrinsic block, landmark blocks, then one offset slot per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ErrorStateLayout {
    pub n_frames: usize,
    pub n_landmarks: usize,
}

impl ErrorStateLayout {
    pub const MOTION_DIM: usize = 15;
    pub const EXTRINSIC_DIM: usize = 6;
    pub const LANDMARK_DIM: usize = 3;

    pub fn new(n_frames: usize, n_landmarks: usize) -> Self {
        Self {
            n_frames,
            n_landmarks,
        }
    }

    pub fn dim(&self) -> usize {
        16 * self.n_frames + Self::EXTRINSIC_DIM + 3 * self.n_landmarks
    }

    pub fn motion(&self, frame: usize) -> usize {
        Self::MOTION_DIM * frame
    }

    pub fn extrinsics(&self) -> usize {
        Self::MOTION_DIM * self.n_frames
    }

    pub fn landmark(&self, j: usize) -> usize {
        self.extrinsics() + Self::EXTRINSIC_DIM + Self::LANDMARK_DIM * j
    }

    pub fn offset(&self, frame: usize) -> usize {
        self.landmark(self.n_landmarks) + frame
    }
}

/// Converts integer-nanosecond timestamps to seconds relative to an origin.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeBase {
    pub origin_ns: i64,
}

impl TimeBase {
    pub fn new(origin_ns: i64) -> Self {
        Self { origin_ns }
    }

    pub fn to_seconds(&self, ns: i64) -> f64 {
        (ns - self.origin_ns) as f64 * 1e-9
    }

    pub fn to_ns(&self, seconds: f64) -> i64 {
        self.origin_ns + (seconds * 1e9).round() as i64
    }
}
