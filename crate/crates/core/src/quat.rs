//! Unit quaternions and the boxplus/boxminus manifold operators.
//!
//! Conventions:
//! * components are ordered `(w, x, y, z)`;
//! * Hamilton product, right-handed: `a * b` applies `b` first, then `a`;
//! * a quaternion describes the rotation *world-from-device*;
//! * every value is kept in the canonical hemisphere `w >= 0`, so the
//!   logarithm always takes the short geodesic.
//!
//! Tangent vectors are full rotation vectors (axis times angle, radians):
//! `q ⊞ δ = q ⊗ exp(δ/2)` and `q1 ⊟ q2 = 2·log(q2⁻¹ ⊗ q1)`. The increment is
//! applied on the right, i.e. `δ` lives in the body frame of `q`.

use std::fmt;
use std::ops::Mul;

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Rotation vector (axis × angle, radians) in the tangent space of a unit quaternion.
pub type TangentVector = Vector3<f64>;

/// Below this magnitude `sinc` and `atan(s/w)/s` switch to their Taylor series.
const SERIES_THRESHOLD: f64 = 1e-6;

/// `sin(x)/x`, with the removable singularity at 0 handled.
pub fn sinc(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

#[derive(Clone, Copy, PartialEq)]
pub struct UnitQuaternion {
    w: f64,
    v: Vec3,
}

impl fmt::Debug for UnitQuaternion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "UnitQuaternion({:.12}, {:.12}, {:.12}, {:.12})",
            self.w, self.v.x, self.v.y, self.v.z
        )
    }
}

impl Default for UnitQuaternion {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl UnitQuaternion {
    pub const IDENTITY: UnitQuaternion = UnitQuaternion {
        w: 1.0,
        v: Vector3::new(0.0, 0.0, 0.0),
    };

    /// Normalizes `(w, x, y, z)` onto the unit sphere, canonical hemisphere.
    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Result<Self> {
        let n = (w * w + x * x + y * y + z * z).sqrt();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::Domain(format!(
                "cannot normalize quaternion ({w}, {x}, {y}, {z})"
            )));
        }
        Ok(Self::from_normalized(w / n, Vector3::new(x / n, y / n, z / n)))
    }

    /// Builds from components that are already unit norm (up to rounding).
    /// Only the hemisphere is canonicalized.
    fn from_normalized(w: f64, v: Vec3) -> Self {
        if w < 0.0 {
            UnitQuaternion { w: -w, v: -v }
        } else {
            UnitQuaternion { w, v }
        }
    }

    fn renormalized(w: f64, v: Vec3) -> Self {
        let n = (w * w + v.norm_squared()).sqrt();
        Self::from_normalized(w / n, v / n)
    }

    pub fn from_array(c: [f64; 4]) -> Result<Self> {
        Self::new(c[0], c[1], c[2], c[3])
    }

    /// Accepts stored components whose norm is within `max_drift` of one.
    /// Components already unit to 1e-12 are kept bit-for-bit; larger drift
    /// is renormalized.
    pub fn from_stored(c: [f64; 4], max_drift: f64) -> Result<Self> {
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if !n.is_finite() || (n - 1.0).abs() > max_drift {
            return Err(Error::Domain(format!(
                "quaternion norm {n} drifts more than {max_drift} from 1"
            )));
        }
        let v = Vector3::new(c[1], c[2], c[3]);
        if (n - 1.0).abs() <= 1e-12 {
            Ok(Self::from_normalized(c[0], v))
        } else {
            Ok(Self::renormalized(c[0], v))
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized internally).
    pub fn from_axis_angle(axis: &Vec3, angle: f64) -> Self {
        let n = axis.norm();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        Self::exp(&(axis * (angle / (2.0 * n)))).expect("finite axis-angle")
    }

    /// Rotation about z.
    pub fn from_yaw(yaw: f64) -> Self {
        Self::from_axis_angle(&Vector3::z(), yaw)
    }

    /// Z-Y-X intrinsic Euler angles (yaw, then pitch, then roll).
    pub fn from_euler(roll: f64, pitch: f64, yaw: f64) -> Self {
        Self::from_yaw(yaw) * Self::from_axis_angle(&Vector3::y(), pitch) * Self::from_axis_angle(&Vector3::x(), roll)
    }

    /// Minimal rotation taking direction `from` onto direction `to`.
    pub fn rotation_between(from: &Vec3, to: &Vec3) -> Result<Self> {
        let a = from
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Domain("zero-length vector".into()))?;
        let b = to
            .try_normalize(1e-12)
            .ok_or_else(|| Error::Domain("zero-length vector".into()))?;
        let c = a.dot(&b);
        if c < -1.0 + 1e-12 {
            // Antiparallel: any perpendicular axis works.
            let helper = if a.x.abs() < 0.9 { Vector3::x() } else { Vector3::y() };
            let axis = a.cross(&helper).normalize();
            return Ok(Self::from_axis_angle(&axis, std::f64::consts::PI));
        }
        let axis = a.cross(&b);
        Self::new(1.0 + c, axis.x, axis.y, axis.z)
    }

    #[inline]
    pub fn w(&self) -> f64 {
        self.w
    }

    #[inline]
    pub fn v(&self) -> Vec3 {
        self.v
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.w, self.v.x, self.v.y, self.v.z]
    }

    pub fn inverse(&self) -> Self {
        UnitQuaternion { w: self.w, v: -self.v }
    }

    /// Hamilton product, renormalized.
    pub fn mul(&self, rhs: &UnitQuaternion) -> UnitQuaternion {
        let (w, v) = hamilton(self.w, &self.v, rhs.w, &rhs.v);
        Self::renormalized(w, v)
    }

    /// `exp(δ) = [cos‖δ‖; sinc(‖δ‖)·δ]`.
    pub fn exp(delta: &TangentVector) -> Result<Self> {
        if !delta.iter().all(|c| c.is_finite()) {
            return Err(Error::Domain(format!("non-finite tangent vector {delta:?}")));
        }
        let n = delta.norm();
        Ok(Self::renormalized(n.cos(), delta * sinc(n)))
    }

    /// Quaternion logarithm (half-angle vector); zero when `v = 0`.
    ///
    /// At `w = 0` the value is the limit `π/2 · v/‖v‖`.
    pub fn log(&self) -> TangentVector {
        let s = self.v.norm();
        if s == 0.0 {
            return Vector3::zeros();
        }
        let w = self.w;
        let k = if s < SERIES_THRESHOLD && w > 0.0 {
            (1.0 - s * s / (3.0 * w * w)) / w
        } else {
            s.atan2(w) / s
        };
        self.v * k
    }

    /// `q ⊞ δ = q ⊗ exp(δ/2)`.
    pub fn boxplus(&self, delta: &TangentVector) -> UnitQuaternion {
        let e = Self::exp(&(delta * 0.5)).expect("boxplus: non-finite increment");
        self.mul(&e)
    }

    /// `self ⊟ other = 2·log(other⁻¹ ⊗ self)`: the body-frame rotation vector
    /// that carries `other` onto `self`. Norm is at most π.
    pub fn boxminus(&self, other: &UnitQuaternion) -> TangentVector {
        (other.inverse() * *self).log() * 2.0
    }

    /// Geodesic angle between two orientations, in `[0, π]`.
    pub fn angular_distance(&self, other: &UnitQuaternion) -> f64 {
        self.boxminus(other).norm()
    }

    /// Rotates `u` from the device frame into the world frame.
    pub fn rotate(&self, u: &Vec3) -> Vec3 {
        let t = self.v.cross(u) * 2.0;
        u + t * self.w + self.v.cross(&t)
    }

    /// Rotates `u` from the world frame into the device frame.
    pub fn inverse_rotate(&self, u: &Vec3) -> Vec3 {
        self.inverse().rotate(u)
    }

    pub fn to_rotation_matrix(&self) -> Matrix3<f64> {
        let (w, x, y, z) = (self.w, self.v.x, self.v.y, self.v.z);
        Matrix3::new(
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        )
    }

    /// Heading of the device x-axis projected on the horizontal plane.
    pub fn yaw(&self) -> f64 {
        let r = self.to_rotation_matrix();
        r[(1, 0)].atan2(r[(0, 0)])
    }

    pub fn is_finite(&self) -> bool {
        self.w.is_finite() && self.v.iter().all(|c| c.is_finite())
    }
}

impl Mul for UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: UnitQuaternion) -> UnitQuaternion {
        UnitQuaternion::mul(&self, &rhs)
    }
}

impl Mul<&UnitQuaternion> for &UnitQuaternion {
    type Output = UnitQuaternion;

    fn mul(self, rhs: &UnitQuaternion) -> UnitQuaternion {
        UnitQuaternion::mul(self, rhs)
    }
}

#[inline]
fn hamilton(aw: f64, av: &Vec3, bw: f64, bv: &Vec3) -> (f64, Vec3) {
    (aw * bw - av.dot(bv), bv * aw + av * bw + av.cross(bv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn close(a: &UnitQuaternion, b: &UnitQuaternion, tol: f64) -> bool {
        let (x, y) = (a.to_array(), b.to_array());
        let same = x.iter().zip(&y).all(|(p, q)| (p - q).abs() < tol);
        let flip = x.iter().zip(&y).all(|(p, q)| (p + q).abs() < tol);
        same || flip
    }

    fn z90() -> UnitQuaternion {
        UnitQuaternion::new(FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin()).unwrap()
    }

    #[test]
    fn identity_and_inverse_products() {
        let q = UnitQuaternion::new(0.3, -0.2, 0.7, 0.1).unwrap();
        assert!(close(&(UnitQuaternion::IDENTITY * q), &q, 1e-15));
        assert!(close(&(q * q.inverse()), &UnitQuaternion::IDENTITY, 1e-15));
    }

    #[test]
    fn quarter_turns_compose_to_half_turn() {
        // Rz(90)·Rz(90) = Rz(180) = diag(-1,-1,1) -> (0, 0, 0, 1).
        let half = z90() * z90();
        let expected = UnitQuaternion::new(0.0, 0.0, 0.0, 1.0).unwrap();
        assert!(close(&half, &expected, 1e-15));
        let m = half.to_rotation_matrix();
        assert!((m - Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0))).norm() < 1e-15);
    }

    #[test]
    fn exp_and_log_examples() {
        assert_eq!(
            UnitQuaternion::exp(&Vector3::zeros()).unwrap(),
            UnitQuaternion::IDENTITY
        );
        let e = UnitQuaternion::exp(&Vector3::new(0.0, 0.0, FRAC_PI_4)).unwrap();
        assert!(close(&e, &z90(), 1e-15));
        assert_eq!(UnitQuaternion::IDENTITY.log(), Vector3::zeros());
        let l = z90().log();
        assert!((l - Vector3::new(0.0, 0.0, FRAC_PI_4)).norm() < 1e-15);
    }

    #[test]
    fn exp_rejects_non_finite() {
        assert!(UnitQuaternion::exp(&Vector3::new(f64::NAN, 0.0, 0.0)).is_err());
        assert!(UnitQuaternion::exp(&Vector3::new(f64::INFINITY, 0.0, 0.0)).is_err());
    }

    #[test]
    fn log_at_zero_real_part_takes_limit() {
        let q = UnitQuaternion::new(0.0, 1.0, 0.0, 0.0).unwrap();
        assert!((q.log() - Vector3::new(FRAC_PI_2, 0.0, 0.0)).norm() < 1e-15);
    }

    #[test]
    fn log_series_branch_is_continuous() {
        for &s in &[1e-9, 5e-7, 9.99e-7, 1.01e-6, 1e-5] {
            let delta = Vector3::new(s, -0.5 * s, 0.25 * s);
            let q = UnitQuaternion::exp(&delta).unwrap();
            assert!((q.log() - delta).norm() < 1e-15 * (1.0 + s), "s={s}");
        }
    }

    #[test]
    fn boxplus_boxminus_examples() {
        let q = UnitQuaternion::new(0.9, 0.1, -0.3, 0.2).unwrap();
        assert!(close(&q.boxplus(&Vector3::zeros()), &q, 1e-15));
        let p = UnitQuaternion::IDENTITY.boxplus(&Vector3::new(0.0, 0.0, FRAC_PI_2));
        assert!(close(&p, &z90(), 1e-15));
        assert!(q.boxminus(&q).norm() < 1e-15);
        let d = z90().boxminus(&UnitQuaternion::IDENTITY);
        assert!((d - Vector3::new(0.0, 0.0, FRAC_PI_2)).norm() < 1e-15);
        let q2 = UnitQuaternion::new(-0.2, 0.5, 0.5, 0.1).unwrap();
        assert!(close(&q.boxplus(&q2.boxminus(&q)), &q2, 1e-14));
        assert!((q.boxminus(&q2).norm() - q2.boxminus(&q).norm()).abs() < 1e-14);
    }

    #[test]
    fn rotation_examples() {
        let u = Vector3::new(0.3, -2.0, 5.0);
        assert_eq!(UnitQuaternion::IDENTITY.rotate(&u), u);
        let r = z90().rotate(&Vector3::x());
        assert!((r - Vector3::y()).norm() < 1e-15);
        let q = UnitQuaternion::new(0.1, 0.4, -0.8, 0.3).unwrap();
        assert!((q.rotate(&u).norm() - u.norm()).abs() < 1e-12);
        assert!((q.inverse_rotate(&q.rotate(&u)) - u).norm() < 1e-12);
    }

    #[test]
    fn angular_distance_examples() {
        let q = UnitQuaternion::new(0.1, 0.4, -0.8, 0.3).unwrap();
        assert_eq!(q.angular_distance(&q), 0.0);
        let x180 = UnitQuaternion::from_axis_angle(&Vector3::x(), PI);
        assert!((UnitQuaternion::IDENTITY.angular_distance(&x180) - PI).abs() < 1e-12);
    }

    #[test]
    fn rotation_between_aligns_vectors() {
        let a = Vector3::new(0.2, -0.4, 1.0);
        let b = Vector3::new(-1.0, 0.3, 0.1);
        let q = UnitQuaternion::rotation_between(&a, &b).unwrap();
        assert!((q.rotate(&a).normalize() - b.normalize()).norm() < 1e-12);
        let q = UnitQuaternion::rotation_between(&a, &(-a)).unwrap();
        assert!((q.rotate(&a) + a).norm() < 1e-12);
        assert!(UnitQuaternion::rotation_between(&Vector3::zeros(), &a).is_err());
    }

    #[test]
    fn euler_and_yaw() {
        let q = UnitQuaternion::from_euler(0.0, 0.0, 1.2);
        assert!((q.yaw() - 1.2).abs() < 1e-14);
        let q = UnitQuaternion::from_euler(0.1, -0.05, -2.0);
        assert!((q.yaw() + 2.0).abs() < 1e-12);
    }

    #[test]
    fn new_rejects_zero() {
        assert!(UnitQuaternion::new(0.0, 0.0, 0.0, 0.0).is_err());
        assert!(UnitQuaternion::new(f64::NAN, 0.0, 0.0, 1.0).is_err());
        let q = UnitQuaternion::new(-2.0, 0.0, 0.0, 0.0).unwrap();
        assert_eq!(q, UnitQuaternion::IDENTITY);
    }
}
