//! Rigid-body transforms for SE(2) and SE(3).
//!
//! Tangent vectors are always laid out as `[angular; linear]`: `[ω, ρx, ρy]`
//! for SE(2) and `[ωx, ωy, ωz, ρx, ρy, ρz]` for SE(3). The same ordering is
//! used by the closed-chain residual and by every task Jacobian in
//! [`crate::kinematics`].

use nalgebra::{DVector, Matrix2, Matrix3, Matrix4, Vector2, Vector3};
use std::f64::consts::PI;

/// Below this rotation angle, exp/log switch to Taylor forms.
pub const SMALL_ANGLE: f64 = 1e-7;

/// Logarithm refuses rotations closer than this to π.
pub const LOG_SINGULARITY_GUARD: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, thiserror::Error)]
pub enum GeometryError {
    #[error("cannot combine an {left:?} element with an {right:?} element")]
    GroupMismatch { left: GroupTag, right: GroupTag },
    #[error("rotation angle {angle} is too close to pi for a unique logarithm")]
    LogSingularity { angle: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupTag {
    Se2,
    Se3,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

/// Skew-symmetric matrix of a 3-vector.
pub fn hat(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Inverse of [`hat`]; reads the antisymmetric part of `m`.
pub fn vee(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(
        0.5 * (m[(2, 1)] - m[(1, 2)]),
        0.5 * (m[(0, 2)] - m[(2, 0)]),
        0.5 * (m[(1, 0)] - m[(0, 1)]),
    )
}

/// Planar rigid transform stored as a scalar heading and a translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se2 {
    angle: f64,
    pub translation: Vector2<f64>,
}

impl Se2 {
    pub fn identity() -> Self {
        Self::new(0.0, Vector2::zeros())
    }

    pub fn new(angle: f64, translation: Vector2<f64>) -> Self {
        Self {
            angle: wrap_angle(angle),
            translation,
        }
    }

    pub fn from_xy_theta(x: f64, y: f64, theta: f64) -> Self {
        Self::new(theta, Vector2::new(x, y))
    }

    pub fn angle(&self) -> f64 {
        self.angle
    }

    pub fn rotation(&self) -> Matrix2<f64> {
        let (s, c) = self.angle.sin_cos();
        Matrix2::new(c, -s, s, c)
    }

    pub fn compose(&self, other: &Se2) -> Se2 {
        Se2::new(
            self.angle + other.angle,
            self.translation + self.rotation() * other.translation,
        )
    }

    pub fn inverse(&self) -> Se2 {
        let rt = self.rotation().transpose();
        Se2::new(-self.angle, -(rt * self.translation))
    }

    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        self.translation + self.rotation() * p
    }

    /// Homogeneous 3×3 matrix.
    pub fn to_matrix(&self) -> Matrix3<f64> {
        let r = self.rotation();
        Matrix3::new(
            r[(0, 0)],
            r[(0, 1)],
            self.translation.x,
            r[(1, 0)],
            r[(1, 1)],
            self.translation.y,
            0.0,
            0.0,
            1.0,
        )
    }

    pub fn log(&self) -> Result<Twist2, GeometryError> {
        let th = self.angle;
        if PI - th.abs() < LOG_SINGULARITY_GUARD {
            return Err(GeometryError::LogSingularity { angle: th });
        }
        // V^{-1} = (th/2) cot(th/2) I - (th/2) J
        let half = 0.5 * th;
        let a = if th.abs() < SMALL_ANGLE {
            1.0 - th * th / 12.0
        } else {
            half * half.cos() / half.sin()
        };
        let t = self.translation;
        let linear = Vector2::new(a * t.x + half * t.y, -half * t.x + a * t.y);
        Ok(Twist2 {
            angular: th,
            linear,
        })
    }
}

/// Tangent element of SE(2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist2 {
    pub angular: f64,
    pub linear: Vector2<f64>,
}

impl Twist2 {
    pub fn exp(&self) -> Se2 {
        let th = self.angular;
        // V = (sin th / th) I + ((1 - cos th) / th) J
        let (a, b) = if th.abs() < SMALL_ANGLE {
            (1.0 - th * th / 6.0, 0.5 * th)
        } else {
            let half = 0.5 * th;
            (th.sin() / th, 2.0 * half.sin() * half.sin() / th)
        };
        let v = self.linear;
        Se2::new(th, Vector2::new(a * v.x - b * v.y, b * v.x + a * v.y))
    }
}

/// Spatial rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Se3 {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Se3 {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_translation(t: Vector3<f64>) -> Self {
        Self::new(Matrix3::identity(), t)
    }

    pub fn rot_x(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
    }

    pub fn rot_y(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
    }

    pub fn rot_z(a: f64) -> Matrix3<f64> {
        let (s, c) = a.sin_cos();
        Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
    }

    /// Rotation `Rz(yaw) Ry(pitch) Rx(roll)`.
    pub fn from_rpy(roll: f64, pitch: f64, yaw: f64, translation: Vector3<f64>) -> Self {
        Self::new(
            Self::rot_z(yaw) * Self::rot_y(pitch) * Self::rot_x(roll),
            translation,
        )
    }

    pub fn compose(&self, other: &Se3) -> Se3 {
        Se3 {
            rotation: self.rotation * other.rotation,
            translation: self.translation + self.rotation * other.translation,
        }
    }

    pub fn inverse(&self) -> Se3 {
        let rt = self.rotation.transpose();
        Se3 {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.translation + self.rotation * p
    }

    pub fn to_matrix(&self) -> Matrix4<f64> {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&self.rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&self.translation);
        m
    }

    pub fn from_matrix(m: &Matrix4<f64>) -> Self {
        Self::new(
            m.fixed_view::<3, 3>(0, 0).into_owned(),
            m.fixed_view::<3, 1>(0, 3).into_owned(),
        )
    }

    /// Roll and pitch of the ZYX (yaw-pitch-roll) decomposition.
    pub fn roll_pitch(&self) -> (f64, f64) {
        let r = &self.rotation;
        let pitch = (-r[(2, 0)]).atan2((r[(0, 0)] * r[(0, 0)] + r[(1, 0)] * r[(1, 0)]).sqrt());
        let roll = r[(2, 1)].atan2(r[(2, 2)]);
        (roll, pitch)
    }

    pub fn log(&self) -> Result<Twist3, GeometryError> {
        let omega = so3_log(&self.rotation)?;
        let th = omega.norm();
        let w = hat(&omega);
        // V^{-1} = I - W/2 + c W^2, c = (1 - (th/2) cot(th/2)) / th^2
        let c = if th < 1e-3 {
            1.0 / 12.0 + th * th / 720.0
        } else {
            let half = 0.5 * th;
            (1.0 - half * half.cos() / half.sin()) / (th * th)
        };
        let v_inv = Matrix3::identity() - 0.5 * w + c * w * w;
        Ok(Twist3 {
            angular: omega,
            linear: v_inv * self.translation,
        })
    }
}

/// Rotation vector of `r`; errors when the angle is within the guard of π.
pub fn so3_log(r: &Matrix3<f64>) -> Result<Vector3<f64>, GeometryError> {
    let axis2 = 2.0 * vee(r);
    let sin_th = 0.5 * axis2.norm();
    let cos_th = 0.5 * (r.trace() - 1.0);
    let th = sin_th.atan2(cos_th);
    if PI - th < LOG_SINGULARITY_GUARD {
        return Err(GeometryError::LogSingularity { angle: th });
    }
    if th < SMALL_ANGLE {
        // second order: th / sin th ~ 1 + th^2 / 6
        return Ok(0.5 * axis2 * (1.0 + th * th / 6.0));
    }
    Ok(axis2 * (0.5 * th / sin_th))
}

/// Rodrigues formula.
pub fn so3_exp(omega: &Vector3<f64>) -> Matrix3<f64> {
    let th = omega.norm();
    let w = hat(omega);
    let (a, b) = if th < SMALL_ANGLE {
        (1.0 - th * th / 6.0, 0.5 - th * th / 24.0)
    } else {
        let half = 0.5 * th;
        (th.sin() / th, 2.0 * half.sin() * half.sin() / (th * th))
    };
    Matrix3::identity() + a * w + b * w * w
}

/// Tangent element of SE(3).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist3 {
    pub angular: Vector3<f64>,
    pub linear: Vector3<f64>,
}

impl Twist3 {
    pub fn exp(&self) -> Se3 {
        let th = self.angular.norm();
        let w = hat(&self.angular);
        let (b, c) = if th < SMALL_ANGLE {
            (0.5 - th * th / 24.0, 1.0 / 6.0 - th * th / 120.0)
        } else {
            let half = 0.5 * th;
            (
                2.0 * half.sin() * half.sin() / (th * th),
                (th - th.sin()) / (th * th * th),
            )
        };
        let v = Matrix3::identity() + b * w + c * w * w;
        Se3 {
            rotation: so3_exp(&self.angular),
            translation: v * self.linear,
        }
    }
}

/// A group element tagged with its group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Transform {
    Se2(Se2),
    Se3(Se3),
}

/// A tangent element tagged with its group.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Twist {
    Se2(Twist2),
    Se3(Twist3),
}

impl Transform {
    pub fn tag(&self) -> GroupTag {
        match self {
            Transform::Se2(_) => GroupTag::Se2,
            Transform::Se3(_) => GroupTag::Se3,
        }
    }

    pub fn identity(tag: GroupTag) -> Self {
        match tag {
            GroupTag::Se2 => Transform::Se2(Se2::identity()),
            GroupTag::Se3 => Transform::Se3(Se3::identity()),
        }
    }

    pub fn compose(&self, other: &Transform) -> Result<Transform, GeometryError> {
        match (self, other) {
            (Transform::Se2(a), Transform::Se2(b)) => Ok(Transform::Se2(a.compose(b))),
            (Transform::Se3(a), Transform::Se3(b)) => Ok(Transform::Se3(a.compose(b))),
            _ => Err(GeometryError::GroupMismatch {
                left: self.tag(),
                right: other.tag(),
            }),
        }
    }

    pub fn inverse(&self) -> Transform {
        match self {
            Transform::Se2(a) => Transform::Se2(a.inverse()),
            Transform::Se3(a) => Transform::Se3(a.inverse()),
        }
    }

    pub fn log(&self) -> Result<Twist, GeometryError> {
        match self {
            Transform::Se2(a) => a.log().map(Twist::Se2),
            Transform::Se3(a) => a.log().map(Twist::Se3),
        }
    }

    /// Position of the frame origin, padded with z = 0 for SE(2).
    pub fn position3(&self) -> Vector3<f64> {
        match self {
            Transform::Se2(a) => Vector3::new(a.translation.x, a.translation.y, 0.0),
            Transform::Se3(a) => a.translation,
        }
    }

    /// Orientation error `[angular]` of `self` relative to `goal`, expressed in
    /// the world frame, together with the translation error.
    pub fn pose_error(&self, goal: &Transform) -> Result<DVector<f64>, GeometryError> {
        match (self, goal) {
            (Transform::Se2(a), Transform::Se2(g)) => Ok(DVector::from_vec(vec![
                wrap_angle(a.angle() - g.angle()),
                a.translation.x - g.translation.x,
                a.translation.y - g.translation.y,
            ])),
            (Transform::Se3(a), Transform::Se3(g)) => {
                let w = so3_log(&(a.rotation * g.rotation.transpose()))?;
                let d = a.translation - g.translation;
                Ok(DVector::from_vec(vec![w.x, w.y, w.z, d.x, d.y, d.z]))
            }
            _ => Err(GeometryError::GroupMismatch {
                left: self.tag(),
                right: goal.tag(),
            }),
        }
    }
}

impl Twist {
    pub fn exp(&self) -> Transform {
        match self {
            Twist::Se2(x) => Transform::Se2(x.exp()),
            Twist::Se3(x) => Transform::Se3(x.exp()),
        }
    }

    /// `[angular; linear]` as a flat vector.
    pub fn to_vector(&self) -> DVector<f64> {
        match self {
            Twist::Se2(x) => DVector::from_vec(vec![x.angular, x.linear.x, x.linear.y]),
            Twist::Se3(x) => DVector::from_vec(vec![
                x.angular.x,
                x.angular.y,
                x.angular.z,
                x.linear.x,
                x.linear.y,
                x.linear.z,
            ]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn se3_from_twist(w: [f64; 3], v: [f64; 3]) -> Se3 {
        Twist3 {
            angular: Vector3::from(w),
            linear: Vector3::from(v),
        }
        .exp()
    }

    /// exp of the 4×4 twist matrix by scaling and squaring with a long Taylor series.
    fn expm_oracle(x: &Twist3) -> Matrix4<f64> {
        let mut a = Matrix4::zeros();
        a.fixed_view_mut::<3, 3>(0, 0).copy_from(&hat(&x.angular));
        a.fixed_view_mut::<3, 1>(0, 3).copy_from(&x.linear);
        let s = 10;
        let scaled = a / f64::from(1 << s);
        let mut term = Matrix4::identity();
        let mut sum = Matrix4::identity();
        for k in 1..25 {
            term = term * scaled / k as f64;
            sum += term;
        }
        for _ in 0..s {
            sum = sum * sum;
        }
        sum
    }

    /// Matrix logarithm by repeated square roots (Denman-Beavers) followed by a
    /// 10th-order series of log(I + X).
    fn logm_oracle(m: &Matrix4<f64>) -> Matrix4<f64> {
        let k = 8;
        let mut y = *m;
        for _ in 0..k {
            let mut z = Matrix4::identity();
            for _ in 0..60 {
                let yi = y.try_inverse().unwrap();
                let zi = z.try_inverse().unwrap();
                let ny = 0.5 * (y + zi);
                z = 0.5 * (z + yi);
                y = ny;
            }
        }
        let x = y - Matrix4::identity();
        let mut pow = x;
        let mut sum = Matrix4::zeros();
        for n in 1..=10 {
            let sign = if n % 2 == 1 { 1.0 } else { -1.0 };
            sum += pow * (sign / n as f64);
            pow *= x;
        }
        sum * f64::from(1 << k)
    }

    #[test]
    fn identity_compose_is_noop() {
        let t = Transform::Se3(se3_from_twist([0.1, -0.2, 0.3], [0.4, 0.5, -0.6]));
        let id = Transform::identity(GroupTag::Se3);
        assert_eq!(id.compose(&t).unwrap(), t);
    }

    #[test]
    fn compose_with_inverse_is_identity() {
        let t = se3_from_twist([0.7, -0.2, 0.3], [0.4, 0.5, -0.6]);
        let e = t.compose(&t.inverse()).to_matrix() - Matrix4::identity();
        assert!(e.abs().max() < 1e-9);
        let p = Se2::from_xy_theta(0.3, -0.1, 2.0);
        let e2 = p.compose(&p.inverse());
        assert!(e2.angle().abs() < 1e-12 && e2.translation.norm() < 1e-12);
    }

    #[test]
    fn compose_matches_homogeneous_product() {
        let a = se3_from_twist([0.3, 1.1, -0.4], [0.2, -0.7, 0.1]);
        let b = se3_from_twist([-0.9, 0.2, 0.5], [1.0, 0.3, -0.2]);
        let direct = a.to_matrix() * b.to_matrix();
        let e = a.compose(&b).to_matrix() - direct;
        assert!(e.abs().max() < 1e-12);
        let p = Se2::from_xy_theta(0.3, -0.1, 2.0);
        let q = Se2::from_xy_theta(-1.0, 0.4, -0.7);
        let e2 = p.compose(&q).to_matrix() - p.to_matrix() * q.to_matrix();
        assert!(e2.abs().max() < 1e-12);
    }

    #[test]
    fn mixed_groups_are_rejected() {
        let a = Transform::identity(GroupTag::Se2);
        let b = Transform::identity(GroupTag::Se3);
        assert!(matches!(
            a.compose(&b),
            Err(GeometryError::GroupMismatch { .. })
        ));
    }

    #[test]
    fn log_of_identity_is_zero() {
        for tag in [GroupTag::Se2, GroupTag::Se3] {
            let v = Transform::identity(tag).log().unwrap().to_vector();
            assert_eq!(v.norm(), 0.0);
        }
    }

    #[test]
    fn log_of_pure_translation() {
        let t = Se3::from_translation(Vector3::new(0.3, 0.0, 0.0));
        let x = t.log().unwrap();
        assert_eq!(x.angular, Vector3::zeros());
        assert_relative_eq!(x.linear, Vector3::new(0.3, 0.0, 0.0), epsilon = 1e-15);
        let p = Se2::from_xy_theta(0.3, 0.0, 0.0).log().unwrap();
        assert_eq!(p.angular, 0.0);
        assert_relative_eq!(p.linear, Vector2::new(0.3, 0.0), epsilon = 1e-15);
    }

    #[test]
    fn log_matches_matrix_log_series() {
        let t = Se3::new(Se3::rot_z(0.5), Vector3::new(0.1, 0.2, 0.0));
        let x = t.log().unwrap();
        let l = logm_oracle(&t.to_matrix());
        let w = vee(&l.fixed_view::<3, 3>(0, 0).into_owned());
        let v = l.fixed_view::<3, 1>(0, 3).into_owned();
        assert!((x.angular - w).norm() < 1e-10, "{} vs {}", x.angular, w);
        assert!((x.linear - v).norm() < 1e-10, "{} vs {}", x.linear, v);
        let back = x.exp().to_matrix() - t.to_matrix();
        assert!(back.abs().max() < 1e-12);

        let p = Se2::from_xy_theta(0.1, 0.2, 0.5);
        let xp = p.log().unwrap();
        assert!((xp.angular - w.z).abs() < 1e-10);
        assert!((xp.linear - Vector2::new(v.x, v.y)).norm() < 1e-10);
    }

    #[test]
    fn log_rejects_half_turn() {
        let t = Se3::new(Se3::rot_x(PI), Vector3::zeros());
        assert!(matches!(t.log(), Err(GeometryError::LogSingularity { .. })));
        let p = Se2::from_xy_theta(0.0, 0.0, PI - 1e-8);
        assert!(matches!(p.log(), Err(GeometryError::LogSingularity { .. })));
    }

    #[test]
    fn exp_of_zero_is_identity() {
        let t = Twist3 {
            angular: Vector3::zeros(),
            linear: Vector3::zeros(),
        }
        .exp();
        assert_eq!(t, Se3::identity());
    }

    #[test]
    fn exp_full_turn_is_identity_rotation() {
        let t = Twist3 {
            angular: Vector3::new(0.0, 0.0, 2.0 * PI),
            linear: Vector3::zeros(),
        }
        .exp();
        assert!((t.rotation - Matrix3::identity()).abs().max() < 1e-12);
        let p = Twist2 {
            angular: 2.0 * PI,
            linear: Vector2::zeros(),
        }
        .exp();
        assert!(p.angle().abs() < 1e-12);
    }

    #[test]
    fn exp_matches_scaling_and_squaring() {
        let cases = [
            ([0.3, -0.8, 1.2], [0.5, 0.1, -0.4]),
            ([1e-9, 2e-9, -1e-9], [0.2, 0.3, 0.4]),
            ([2.5, 0.4, -0.3], [-1.0, 0.0, 2.0]),
        ];
        for (w, v) in cases {
            let x = Twist3 {
                angular: Vector3::from(w),
                linear: Vector3::from(v),
            };
            let e = x.exp().to_matrix() - expm_oracle(&x);
            assert!(e.abs().max() < 1e-10, "{e}");
        }
    }

    #[test]
    fn roll_pitch_matches_nalgebra_euler() {
        let t = Se3::from_rpy(0.2, -0.3, 1.1, Vector3::zeros());
        let (r, p) = t.roll_pitch();
        let (er, ep, _) = nalgebra::Rotation3::from_matrix_unchecked(t.rotation).euler_angles();
        assert_relative_eq!(r, er, epsilon = 1e-12);
        assert_relative_eq!(p, ep, epsilon = 1e-12);
        assert_relative_eq!(r, 0.2, epsilon = 1e-12);
        assert_relative_eq!(p, -0.3, epsilon = 1e-12);
    }

    fn twist3_strategy(max_angle: f64) -> impl Strategy<Value = Twist3> {
        (
            prop::array::uniform3(-1.0f64..1.0),
            0.0..max_angle,
            prop::array::uniform3(-2.0f64..2.0),
        )
            .prop_filter("nonzero axis", |(a, _, _)| {
                Vector3::from(*a).norm() > 1e-3
            })
            .prop_map(|(a, th, v)| Twist3 {
                angular: Vector3::from(a).normalize() * th,
                linear: Vector3::from(v),
            })
    }

    proptest! {
        #[test]
        fn se3_log_exp_roundtrip(x in twist3_strategy(PI - 1e-3)) {
            let t = x.exp();
            let back = t.log().unwrap().exp();
            let e = (back.to_matrix() - t.to_matrix()).abs().max();
            prop_assert!(e < 1e-8, "roundtrip error {}", e);
            prop_assert!((t.rotation.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn se2_log_exp_roundtrip(th in -(PI - 1e-3)..(PI - 1e-3), x in -2.0f64..2.0, y in -2.0f64..2.0) {
            let t = Se2::from_xy_theta(x, y, th);
            let back = t.log().unwrap().exp();
            prop_assert!(wrap_angle(back.angle() - t.angle()).abs() < 1e-8);
            prop_assert!((back.translation - t.translation).norm() < 1e-8);
        }

        #[test]
        fn compose_is_associative(a in twist3_strategy(3.0), b in twist3_strategy(3.0), c in twist3_strategy(3.0)) {
            let (a, b, c) = (a.exp(), b.exp(), c.exp());
            let l = a.compose(&b).compose(&c).to_matrix();
            let r = a.compose(&b.compose(&c)).to_matrix();
            prop_assert!((l - r).abs().max() < 1e-10);
            prop_assert!((a.compose(&b).rotation.determinant() - 1.0).abs() < 1e-9);
        }
    }
}
