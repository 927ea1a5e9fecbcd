//! Quaternion and 3-vector math.
//!
//! Quaternions are stored as `(w, x, y, z)`, right-handed, and act on column
//! vectors: `q.rotate(v) = q v q*`.

use std::ops::{Add, AddAssign, Mul, Neg, Sub};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RotError {
    #[error("vectors are antiparallel; a hint axis is required")]
    AntiparallelAmbiguity,
    #[error("zero-length vector")]
    ZeroVector,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 0.0 };
    pub const X: Vec3 = Vec3 { x: 1.0, y: 0.0, z: 0.0 };
    pub const Y: Vec3 = Vec3 { x: 0.0, y: 1.0, z: 0.0 };
    pub const Z: Vec3 = Vec3 { x: 0.0, y: 0.0, z: 1.0 };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Self::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_sq(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn normalized(self) -> Result<Vec3, RotError> {
        let n = self.norm();
        if n < 1e-12 || !n.is_finite() {
            return Err(RotError::ZeroVector);
        }
        Ok(self * (1.0 / n))
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Any unit vector perpendicular to `self`.
    pub fn any_orthogonal(self) -> Vec3 {
        let a = if self.x.abs() < 0.9 { Vec3::X } else { Vec3::Y };
        let c = self.cross(a);
        c * (1.0 / c.norm())
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Default for Quat {
    fn default() -> Self {
        Quat::IDENTITY
    }
}

const RENORM_DRIFT: f64 = 1e-6;

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Quat {
        let n = axis.norm();
        if n < 1e-15 {
            return Quat::IDENTITY;
        }
        let (s, c) = (0.5 * angle).sin_cos();
        let k = s / n;
        Quat::new(c, axis.x * k, axis.y * k, axis.z * k)
    }

    pub fn about_x(angle: f64) -> Quat {
        Quat::from_axis_angle(Vec3::X, angle)
    }

    pub fn about_y(angle: f64) -> Quat {
        Quat::from_axis_angle(Vec3::Y, angle)
    }

    pub fn about_z(angle: f64) -> Quat {
        Quat::from_axis_angle(Vec3::Z, angle)
    }

    /// Inverse of `from_rotation_vector`: axis scaled by angle.
    pub fn from_rotation_vector(r: Vec3) -> Quat {
        let angle = r.norm();
        if angle < 1e-15 {
            return Quat::IDENTITY;
        }
        Quat::from_axis_angle(r, angle)
    }

    pub fn vector(self) -> Vec3 {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn conj(self) -> Quat {
        Quat::new(self.w, -self.x, -self.y, -self.z)
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn normalize(self) -> Quat {
        let n = self.norm();
        if n < 1e-300 {
            return Quat::IDENTITY;
        }
        let k = 1.0 / n;
        Quat::new(self.w * k, self.x * k, self.y * k, self.z * k)
    }

    /// Representative with `w >= 0`. For `w == 0` the first nonzero vector
    /// component is made positive, so `q` and `-q` always map to the same bits.
    pub fn canonicalize(self) -> Quat {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else if self.x != 0.0 {
            self.x < 0.0
        } else if self.y != 0.0 {
            self.y < 0.0
        } else {
            self.z < 0.0
        };
        let q = if flip { -self } else { self };
        // normalise negative zeros so bit patterns agree
        Quat::new(q.w + 0.0, q.x + 0.0, q.y + 0.0, q.z + 0.0)
    }

    pub fn rotate(self, v: Vec3) -> Vec3 {
        // v' = v + 2w(u x v) + 2u x (u x v)
        let u = self.vector();
        let t = u.cross(v) * 2.0;
        v + t * self.w + u.cross(t)
    }

    /// Returns `(unit axis, angle in [0, pi])`. Identity yields the x axis.
    pub fn to_axis_angle(self) -> (Vec3, f64) {
        let q = self.canonicalize();
        let s = q.vector().norm();
        if s < 1e-15 {
            return (Vec3::X, 0.0);
        }
        let angle = 2.0 * s.atan2(q.w);
        (q.vector() * (1.0 / s), angle)
    }

    pub fn rotation_vector(self) -> Vec3 {
        let (axis, angle) = self.to_axis_angle();
        axis * angle
    }

    /// Shortest-arc spherical interpolation.
    pub fn slerp(self, other: Quat, t: f64) -> Quat {
        let a = self.canonicalize();
        let mut b = other.canonicalize();
        let mut d = a.dot(b);
        if d < 0.0 {
            b = -b;
            d = -d;
        }
        if d > 1.0 - 1e-12 {
            let q = Quat::new(
                a.w + t * (b.w - a.w),
                a.x + t * (b.x - a.x),
                a.y + t * (b.y - a.y),
                a.z + t * (b.z - a.z),
            );
            return q.normalize();
        }
        let theta = d.min(1.0).acos();
        let s = theta.sin();
        let ka = ((1.0 - t) * theta).sin() / s;
        let kb = (t * theta).sin() / s;
        Quat::new(
            ka * a.w + kb * b.w,
            ka * a.x + kb * b.x,
            ka * a.y + kb * b.y,
            ka * a.z + kb * b.z,
        )
        .normalize()
    }

    /// Signed angle of the twist component of `self` about unit `axis`.
    pub fn twist_angle(self, axis: Vec3) -> f64 {
        let p = self.vector().dot(axis);
        let a = 2.0 * p.atan2(self.w);
        wrap_angle(a)
    }

    /// Decomposes `self = swing * twist` with `twist` about unit `axis`.
    pub fn swing_twist(self, axis: Vec3) -> (Quat, Quat) {
        let p = self.vector().dot(axis);
        let twist = Quat::new(self.w, axis.x * p, axis.y * p, axis.z * p);
        let twist = if twist.norm() < 1e-15 {
            Quat::IDENTITY
        } else {
            twist.normalize()
        };
        let swing = quat_mul(self, twist.conj());
        (swing, twist)
    }

    pub fn is_finite(self) -> bool {
        self.w.is_finite() && self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

impl Mul for Quat {
    type Output = Quat;
    fn mul(self, o: Quat) -> Quat {
        quat_mul(self, o)
    }
}

/// Hamilton product `a * b` (apply `b` first, then `a`).
pub fn quat_mul(a: Quat, b: Quat) -> Quat {
    let q = Quat::new(
        a.w * b.w - a.x * b.x - a.y * b.y - a.z * b.z,
        a.w * b.x + a.x * b.w + a.y * b.z - a.z * b.y,
        a.w * b.y - a.x * b.z + a.y * b.w + a.z * b.x,
        a.w * b.z + a.x * b.y - a.y * b.x + a.z * b.w,
    );
    if (q.norm() - 1.0).abs() > RENORM_DRIFT {
        q.normalize()
    } else {
        q
    }
}

/// `r` such that `a * r = b`.
pub fn relative_rotation(a: Quat, b: Quat) -> Quat {
    quat_mul(a.conj(), b)
}

/// Minimal-angle rotation taking the direction of `u` onto the direction of `v`.
pub fn rotation_between(u: Vec3, v: Vec3) -> Result<Quat, RotError> {
    let a = u.normalized()?;
    let b = v.normalized()?;
    let d = a.dot(b);
    if d < -1.0 + 1e-9 {
        return Err(RotError::AntiparallelAmbiguity);
    }
    let c = a.cross(b);
    // half-angle construction: q = (1 + d, a x b) normalised
    Ok(Quat::new(1.0 + d, c.x, c.y, c.z).normalize())
}

/// Like [`rotation_between`], but resolves the antiparallel case with a
/// half-turn about `hint` (projected orthogonal to `u`).
pub fn rotation_between_with_hint(u: Vec3, v: Vec3, hint: Vec3) -> Result<Quat, RotError> {
    match rotation_between(u, v) {
        Err(RotError::AntiparallelAmbiguity) => {
            let a = u.normalized()?;
            let h = hint - a * hint.dot(a);
            let axis = h.normalized().unwrap_or_else(|_| a.any_orthogonal());
            Ok(Quat::from_axis_angle(axis, std::f64::consts::PI))
        }
        r => r,
    }
}

/// Unsigned angle in `[0, pi]`.
pub fn angle_between(u: Vec3, v: Vec3) -> Result<f64, RotError> {
    let a = u.normalized()?;
    let b = v.normalized()?;
    // atan2 form stays accurate near 0 and pi
    Ok(a.cross(b).norm().atan2(a.dot(b)))
}

/// Wraps into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a % (2.0 * PI);
    if r <= -PI {
        r += 2.0 * PI;
    } else if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Euler-style decomposition about an orthonormal triple
/// `(a1, a2, a1 x a2)`: returns `(t1, t2, t3)` with
/// `q = R(a1, t1) * R(a2, t2) * R(a3, t3)`.
pub fn decompose_about_axes(q: Quat, a1: Vec3, a2: Vec3) -> Result<[f64; 3], RotError> {
    let e1 = a1.normalized()?;
    let e2 = (a2 - e1 * a2.dot(e1)).normalized()?;
    let e3 = e1.cross(e2);
    // rotation matrix entries in the (e1, e2, e3) basis
    let m = |i: Vec3, j: Vec3| i.dot(q.rotate(j));
    let r13 = m(e1, e3);
    let r23 = m(e2, e3);
    let r33 = m(e3, e3);
    let r12 = m(e1, e2);
    let r11 = m(e1, e1);
    // R = Rx(t1) Ry(t2) Rz(t3) in the local basis
    let t2 = r13.clamp(-1.0, 1.0).asin();
    let (t1, t3) = if r13.abs() < 1.0 - 1e-12 {
        ((-r23).atan2(r33), (-r12).atan2(r11))
    } else {
        // gimbal lock: fold everything into t1
        let r32 = m(e3, e2);
        let r22 = m(e2, e2);
        (r32.atan2(r22), 0.0)
    };
    Ok([t1, t2, t3])
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn close(a: Quat, b: Quat, tol: f64) -> bool {
        let (a, b) = (a.canonicalize(), b.canonicalize());
        (a.w - b.w).abs() < tol
            && (a.x - b.x).abs() < tol
            && (a.y - b.y).abs() < tol
            && (a.z - b.z).abs() < tol
    }

    #[test]
    fn identity_product() {
        let q = Quat::from_axis_angle(Vec3::new(1.0, 2.0, 3.0), 0.7);
        assert_eq!(quat_mul(Quat::IDENTITY, q), q);
    }

    #[test]
    fn quarter_turn_about_z() {
        let q = Quat::new(0.7071067811865476, 0.0, 0.0, 0.7071067811865476);
        let v = q.rotate(Vec3::X);
        assert!((v - Vec3::Y).norm() < 1e-6);
    }

    #[test]
    fn inverse_composition() {
        let q = Quat::from_axis_angle(Vec3::new(-0.3, 0.2, 0.9), 2.1);
        assert!(close(q * q.conj(), Quat::IDENTITY, 1e-9));
    }

    #[test]
    fn relative_rotation_cases() {
        let q = Quat::about_x(0.4) * Quat::about_z(-1.0);
        assert!(close(relative_rotation(q, q), Quat::IDENTITY, 1e-12));
        assert!(close(relative_rotation(Quat::IDENTITY, q), q, 1e-12));
        let r = relative_rotation(Quat::about_z(30f64.to_radians()), Quat::about_z(80f64.to_radians()));
        let (axis, angle) = r.to_axis_angle();
        assert!((axis - Vec3::Z).norm() < 1e-6);
        assert!((angle - 50f64.to_radians()).abs() < 1e-6);
    }

    #[test]
    fn rotation_between_cases() {
        assert!(close(rotation_between(Vec3::X, Vec3::X).unwrap(), Quat::IDENTITY, 1e-12));
        let q = rotation_between(Vec3::X, Vec3::Y).unwrap();
        assert!(close(q, Quat::about_z(FRAC_PI_2), 1e-6));
        assert_eq!(
            rotation_between(Vec3::X, -Vec3::X),
            Err(RotError::AntiparallelAmbiguity)
        );
        let h = rotation_between_with_hint(Vec3::X, -Vec3::X, Vec3::Z).unwrap();
        assert!((h.rotate(Vec3::X) + Vec3::X).norm() < 1e-12);
    }

    #[test]
    fn angle_between_cases() {
        let d = Vec3::new(0.0, 0.0, -1.0);
        assert_eq!(angle_between(d, d).unwrap(), 0.0);
        assert!((angle_between(Vec3::X, Vec3::Y).unwrap() - FRAC_PI_2).abs() < 1e-15);
        let v = Vec3::new(-1.0, 1.0, 0.0).normalized().unwrap();
        // oracle: acos of the dot product
        let expected = (Vec3::X.dot(v)).acos();
        assert!((expected - 0.75 * PI).abs() < 1e-12);
        assert!((angle_between(Vec3::X, v).unwrap() - expected).abs() < 1e-9);
        assert_eq!(angle_between(Vec3::ZERO, Vec3::X), Err(RotError::ZeroVector));
    }

    #[test]
    fn canonicalize_sign_cases() {
        let q = Quat::new(0.0, -0.6, 0.8, 0.0);
        assert_eq!(q.canonicalize(), (-q).canonicalize());
        assert!(q.canonicalize().x > 0.0);
    }

    #[test]
    fn swing_twist_recomposes() {
        let q = Quat::about_y(0.5) * Quat::about_x(0.2);
        let (swing, twist) = q.swing_twist(Vec3::Y);
        assert!(close(swing * twist, q, 1e-12));
        assert!((twist.twist_angle(Vec3::Y) - q.twist_angle(Vec3::Y)).abs() < 1e-12);
        assert!(swing.vector().dot(Vec3::Y).abs() < 1e-12);
    }

    #[test]
    fn decompose_recomposes() {
        let q = Quat::about_x(0.3) * Quat::about_y(-0.7) * Quat::about_z(1.1);
        let [a, b, c] = decompose_about_axes(q, Vec3::X, Vec3::Y).unwrap();
        assert!((a - 0.3).abs() < 1e-9 && (b + 0.7).abs() < 1e-9 && (c - 1.1).abs() < 1e-9);
    }

    #[test]
    fn slerp_midpoint() {
        let m = Quat::IDENTITY.slerp(Quat::about_z(FRAC_PI_2), 0.5);
        assert!(close(m, Quat::about_z(PI / 4.0), 1e-9));
        // takes the short way round even when given -b
        let m2 = Quat::IDENTITY.slerp(-Quat::about_z(FRAC_PI_2), 0.5);
        assert!(close(m2, Quat::about_z(PI / 4.0), 1e-9));
    }
}
