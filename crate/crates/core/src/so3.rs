//! Quaternion and rotation helpers.
//!
//! Conventions used throughout the crate:
//!
//! * Hamilton product, scalar-first storage (`w, x, y, z`).
//! * `q^AB` maps coordinates expressed in frame `B` into frame `A`, i.e.
//!   `v^A = R(q^AB) v^B`. Composition therefore reads `q^AC = q^AB ⊙ q^BC`.
//! * [`quat_exp`] / [`quat_log`] use the half-angle parametrisation: a rotation
//!   by `θ` about unit axis `n` is `quat_exp(θ/2 · n)`. The helpers
//!   [`exp_rotvec`] / [`log_rotvec`] work with full rotation vectors.
//! * Manifold perturbations are right-multiplied: `q ⊞ δ = q ⊙ Exp(δ)` with `δ`
//!   a rotation vector.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};

pub type Quat = UnitQuaternion<f64>;
pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

/// Below this norm the trigonometric maps switch to their Taylor expansions.
pub const SMALL_ANGLE: f64 = 1e-8;

pub fn identity() -> Quat {
    Quat::identity()
}

/// Builds a unit quaternion from scalar-first components, normalising on the way.
pub fn quat_from_wxyz(w: f64, x: f64, y: f64, z: f64) -> Quat {
    Quat::new_normalize(Quaternion::new(w, x, y, z))
}

pub fn quat_to_wxyz(q: &Quat) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// Hamilton product followed by renormalisation.
pub fn quat_mul(a: &Quat, b: &Quat) -> Quat {
    Quat::new_normalize(a.quaternion() * b.quaternion())
}

pub fn conj(q: &Quat) -> Quat {
    q.conjugate()
}

/// Flips the sign so that `w >= 0`.
pub fn canonical(q: &Quat) -> Quat {
    if q.w < 0.0 {
        Quat::new_unchecked(-q.into_inner())
    } else {
        *q
    }
}

/// `[cos‖v‖, sin‖v‖ · v/‖v‖]`.
pub fn quat_exp(v: &Vec3) -> Quat {
    let n = v.norm();
    if n < SMALL_ANGLE {
        let n2 = n * n;
        let s = 1.0 - n2 / 6.0;
        Quat::new_normalize(Quaternion::new(1.0 - n2 / 2.0, v.x * s, v.y * s, v.z * s))
    } else {
        let s = n.sin() / n;
        Quat::new_normalize(Quaternion::new(n.cos(), v.x * s, v.y * s, v.z * s))
    }
}

/// Inverse of [`quat_exp`] on the `w >= 0` hemisphere; `‖log q‖ <= π/2`.
pub fn quat_log(q: &Quat) -> Vec3 {
    let q = canonical(q);
    let v = q.imag();
    let n = v.norm();
    let w = q.w;
    if n < SMALL_ANGLE {
        // atan(n / w) / n ≈ (1 - n²/(3w²)) / w
        let w = w.max(f64::MIN_POSITIVE);
        v * ((1.0 - n * n / (3.0 * w * w)) / w)
    } else {
        v * (n.atan2(w) / n)
    }
}

/// Rotation vector (axis · angle) to quaternion.
pub fn exp_rotvec(phi: &Vec3) -> Quat {
    quat_exp(&(phi * 0.5))
}

/// Quaternion to rotation vector with angle in `[0, π]`.
pub fn log_rotvec(q: &Quat) -> Vec3 {
    quat_log(q) * 2.0
}

pub fn rotation_angle(q: &Quat) -> f64 {
    log_rotvec(q).norm()
}

pub fn axis_angle(axis: &Vec3, angle: f64) -> Quat {
    exp_rotvec(&(axis.normalize() * angle))
}

pub fn rot_x(angle: f64) -> Quat {
    axis_angle(&Vec3::x(), angle)
}

pub fn rot_y(angle: f64) -> Quat {
    axis_angle(&Vec3::y(), angle)
}

pub fn rot_z(angle: f64) -> Quat {
    axis_angle(&Vec3::z(), angle)
}

pub fn quat_to_rotmat(q: &Quat) -> Mat3 {
    q.to_rotation_matrix().into_inner()
}

pub fn rotate(q: &Quat, v: &Vec3) -> Vec3 {
    q.transform_vector(v)
}

pub fn rotate_inv(q: &Quat, v: &Vec3) -> Vec3 {
    q.inverse_transform_vector(v)
}

/// Absolute angular offset `|2 arccos [a ⊙ conj(b)]_w|` in degrees, in `[0°, 180°]`.
pub fn angular_offset(a: &Quat, b: &Quat) -> f64 {
    let d = quat_mul(a, &b.conjugate());
    let w = d.w.abs().min(1.0);
    // 2·atan2 keeps precision near 0° where arccos is flat.
    (2.0 * d.imag().norm().atan2(w)).to_degrees()
}

pub fn skew(v: &Vec3) -> Mat3 {
    Mat3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Right Jacobian of SO(3): `Exp(φ + δ) ≈ Exp(φ) Exp(Jr(φ) δ)`.
pub fn right_jacobian(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Mat3::identity() - 0.5 * k + k * k / 6.0;
    }
    let t2 = theta * theta;
    Mat3::identity() - (1.0 - theta.cos()) / t2 * k + (theta - theta.sin()) / (t2 * theta) * k * k
}

/// Inverse right Jacobian: `Log(Exp(φ) Exp(δ)) ≈ φ + Jr⁻¹(φ) δ`.
pub fn right_jacobian_inv(phi: &Vec3) -> Mat3 {
    let theta = phi.norm();
    let k = skew(phi);
    if theta < 1e-6 {
        return Mat3::identity() + 0.5 * k + k * k / 12.0;
    }
    let t2 = theta * theta;
    let c = 1.0 / t2 - (1.0 + theta.cos()) / (2.0 * theta * theta.sin());
    Mat3::identity() + 0.5 * k + c * k * k
}

/// Applies the right perturbation `q ⊙ Exp(δ)`.
pub fn retract(q: &Quat, delta: &Vec3) -> Quat {
    quat_mul(q, &exp_rotvec(delta))
}
