//! Unit quaternions for probe orientation, stored `(w, x, y, z)`.

use serde::{Deserialize, Serialize};

/// Tolerance on `| |q| - 1 |` for a quaternion to count as unit.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum QuatError {
    #[error("quaternion {0:?} is not unit length (norm {1})")]
    NotUnit([f64; 4], f64),
    #[error("quaternion {0:?} cannot be normalized")]
    Degenerate([f64; 4]),
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        Self::new(a[0], a[1], a[2], a[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.w, self.x, self.y, self.z]
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn dot(self, o: Quat) -> f64 {
        self.w * o.w + self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn is_unit(self) -> bool {
        (self.norm() - 1.0).abs() <= UNIT_TOLERANCE
    }

    /// Fails unless the quaternion is already unit within [`UNIT_TOLERANCE`].
    pub fn check_unit(self) -> Result<Self, QuatError> {
        let n = self.norm();
        if (n - 1.0).abs() <= UNIT_TOLERANCE {
            Ok(self)
        } else {
            Err(QuatError::NotUnit(self.to_array(), n))
        }
    }

    pub fn normalized(self) -> Result<Self, QuatError> {
        let n = self.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(QuatError::Degenerate(self.to_array()));
        }
        Ok(Self::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }

    /// Picks the representative with `w >= 0`. For `w == 0` the first nonzero
    /// of `x, y, z` is made positive so the choice is still unique.
    pub fn canonical(self) -> Self {
        let flip = if self.w != 0.0 {
            self.w < 0.0
        } else {
            [self.x, self.y, self.z]
                .into_iter()
                .find(|v| *v != 0.0)
                .is_some_and(|v| v < 0.0)
        };
        if flip {
            -self
        } else {
            self
        }
    }

    /// Rotation of `angle` radians about `axis` (normalized here).
    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n == 0.0 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle / 2.0).sin_cos();
        Self::new(c, s * axis[0] / n, s * axis[1] / n, s * axis[2] / n)
    }

    /// Rotation vector (axis * angle) to quaternion.
    pub fn exp(v: [f64; 3]) -> Self {
        let angle = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        Self::from_axis_angle(v, angle)
    }

    /// Quaternion to rotation vector, taking the short way round.
    pub fn log(self) -> [f64; 3] {
        let q = self.canonical();
        let s = (q.x * q.x + q.y * q.y + q.z * q.z).sqrt();
        if s < 1e-12 {
            return [2.0 * q.x, 2.0 * q.y, 2.0 * q.z];
        }
        let angle = 2.0 * s.atan2(q.w);
        [q.x / s * angle, q.y / s * angle, q.z / s * angle]
    }

    pub fn conjugate(self) -> Self {
        Self::new(self.w, -self.x, -self.y, -self.z)
    }

    /// Hamilton product `self * o`.
    pub fn mul(self, o: Quat) -> Self {
        Self::new(
            self.w * o.w - self.x * o.x - self.y * o.y - self.z * o.z,
            self.w * o.x + self.x * o.w + self.y * o.z - self.z * o.y,
            self.w * o.y - self.x * o.z + self.y * o.w + self.z * o.x,
            self.w * o.z + self.x * o.y - self.y * o.x + self.z * o.w,
        )
    }

    pub fn rotate(self, v: [f64; 3]) -> [f64; 3] {
        let m = self.to_matrix();
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Row-major rotation matrix of a unit quaternion.
    pub fn to_matrix(self) -> [[f64; 3]; 3] {
        let Quat { w, x, y, z } = self;
        [
            [
                1.0 - 2.0 * (y * y + z * z),
                2.0 * (x * y - w * z),
                2.0 * (x * z + w * y),
            ],
            [
                2.0 * (x * y + w * z),
                1.0 - 2.0 * (x * x + z * z),
                2.0 * (y * z - w * x),
            ],
            [
                2.0 * (x * z - w * y),
                2.0 * (y * z + w * x),
                1.0 - 2.0 * (x * x + y * y),
            ],
        ]
    }

    /// Rotation angle away from the identity, in `[0, pi]`.
    pub fn angle(self) -> f64 {
        2.0 * self.w.abs().min(1.0).acos()
    }
}

impl std::ops::Neg for Quat {
    type Output = Quat;
    fn neg(self) -> Quat {
        Quat::new(-self.w, -self.x, -self.y, -self.z)
    }
}

/// Geodesic angle between the rotations `p` and `q`: `2 acos |<p, q>|`, in `[0, pi]`.
///
/// Evaluated as `4 atan2(|p - q|, |p + q|)` after aligning signs, which is the
/// same quantity without the loss of precision of `acos` near 1.
pub fn quat_distance(p: Quat, q: Quat) -> Result<f64, QuatError> {
    let (p, q) = (p.check_unit()?, q.check_unit()?);
    let q = if p.dot(q) < 0.0 { -q } else { q };
    let diff = Quat::new(p.w - q.w, p.x - q.x, p.y - q.y, p.z - q.z).norm();
    let sum = Quat::new(p.w + q.w, p.x + q.x, p.y + q.y, p.z + q.z).norm();
    Ok(4.0 * diff.atan2(sum))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::{FRAC_PI_2, PI};

    fn unit() -> impl Strategy<Value = Quat> {
        (-1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0, -1.0f64..1.0)
            .prop_filter("non-degenerate", |(w, x, y, z)| w * w + x * x + y * y + z * z > 1e-3)
            .prop_map(|(w, x, y, z)| Quat::new(w, x, y, z).normalized().unwrap())
    }

    #[test]
    fn distance_basics() {
        let q = Quat::from_axis_angle([0.3, -0.2, 0.9], 1.1);
        assert_eq!(quat_distance(q, q).unwrap(), 0.0);
        assert_eq!(quat_distance(q, -q).unwrap(), 0.0);
        let rx = Quat::from_axis_angle([1.0, 0.0, 0.0], FRAC_PI_2);
        let d = quat_distance(Quat::IDENTITY, rx).unwrap();
        assert!((d - FRAC_PI_2).abs() < 1e-12);
    }

    #[test]
    fn non_unit_inputs_are_rejected() {
        let bad = Quat::new(1.0, 0.1, 0.0, 0.0);
        assert!(matches!(
            quat_distance(bad, Quat::IDENTITY),
            Err(QuatError::NotUnit(..))
        ));
        assert!(Quat::new(0.0, 0.0, 0.0, 0.0).normalized().is_err());
    }

    #[test]
    fn rotation_matches_axis_angle() {
        // 90 degrees about z maps x onto y
        let q = Quat::from_axis_angle([0.0, 0.0, 1.0], FRAC_PI_2);
        let v = q.rotate([1.0, 0.0, 0.0]);
        assert!((v[0]).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn canonical_form_has_nonnegative_w(q in unit()) {
            let c = q.canonical();
            prop_assert!(c.w >= 0.0);
            prop_assert!(quat_distance(c, q).unwrap() < 1e-6);
        }

        #[test]
        fn distance_is_a_metric_on_rotations(p in unit(), q in unit(), r in unit()) {
            let d = |a, b| quat_distance(a, b).unwrap();
            prop_assert!((d(p, q) - d(q, p)).abs() < 1e-12);
            prop_assert!(d(p, q) >= 0.0 && d(p, q) <= PI + 1e-12);
            prop_assert!(d(p, r) <= d(p, q) + d(q, r) + 1e-9);
        }

        #[test]
        fn agrees_with_acos_form(p in unit(), q in unit()) {
            let acos_form = 2.0 * p.dot(q).abs().min(1.0).acos();
            prop_assert!((quat_distance(p, q).unwrap() - acos_form).abs() < 1e-6);
        }

        #[test]
        fn log_exp_round_trip(q in unit()) {
            let back = Quat::exp(q.log());
            prop_assert!(quat_distance(back, q).unwrap() < 1e-6);
        }
    }
}
