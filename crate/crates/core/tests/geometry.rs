//! Rigid-transform algebra: exp/log round trips, rotation validity, and the
//! group laws on random elements of SE(2) and SE(3).

use mcmppi_core::geometry::{so3_exp, so3_log, wrap_angle, Se2, Se3, Transform, Twist2, Twist3};
use nalgebra::{Vector2, Vector3};
use proptest::prelude::*;

fn twist3(max_angle: f64) -> impl Strategy<Value = Twist3> {
    (prop::array::uniform3(-1.0f64..1.0), 0.0..max_angle, prop::array::uniform3(-2.0f64..2.0)).prop_map(
        |(axis, angle, v)| {
            let a = Vector3::from(axis);
            let dir = if a.norm() < 1e-6 { Vector3::z() } else { a.normalize() };
            Twist3 {
                angular: dir * angle,
                linear: Vector3::from(v),
            }
        },
    )
}

fn se3(max_angle: f64) -> impl Strategy<Value = Se3> {
    twist3(max_angle).prop_map(|t| t.exp())
}

fn se2() -> impl Strategy<Value = Se2> {
    (-3.0f64..3.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, x, y)| Se2::new(a, Vector2::new(x, y)))
}

fn se3_gap(a: &Se3, b: &Se3) -> f64 {
    (a.to_matrix() - b.to_matrix()).amax()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn se3_log_exp_round_trip(t in se3(std::f64::consts::PI - 1e-3)) {
        let back = t.log().unwrap().exp();
        prop_assert!(se3_gap(&t, &back) < 1e-8);
    }

    #[test]
    fn se3_exp_log_round_trip_on_twists(w in twist3(std::f64::consts::PI - 1e-3)) {
        let back = w.exp().log().unwrap();
        prop_assert!((back.angular - w.angular).amax() < 1e-8);
        prop_assert!((back.linear - w.linear).amax() < 1e-8);
    }

    #[test]
    fn small_rotations_round_trip(w in twist3(1e-6)) {
        let back = w.exp().log().unwrap();
        prop_assert!((back.angular - w.angular).amax() < 1e-12);
        prop_assert!((back.linear - w.linear).amax() < 1e-12);
    }

    #[test]
    fn se2_log_exp_round_trip(t in se2()) {
        let back = t.log().unwrap().exp();
        prop_assert!((t.to_matrix() - back.to_matrix()).amax() < 1e-10);
    }

    #[test]
    fn rotations_stay_special_orthogonal(a in se3(3.1), b in se3(3.1)) {
        for r in [a.compose(&b).rotation, a.inverse().rotation, so3_exp(&so3_log(&a.rotation).unwrap())] {
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
            prop_assert!((r.transpose() * r - nalgebra::Matrix3::identity()).amax() < 1e-9);
        }
    }

    #[test]
    fn se3_compose_is_associative(a in se3(3.1), b in se3(3.1), c in se3(3.1)) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!(se3_gap(&left, &right) < 1e-10);
    }

    #[test]
    fn se2_compose_is_associative(a in se2(), b in se2(), c in se2()) {
        let left = a.compose(&b).compose(&c);
        let right = a.compose(&b.compose(&c));
        prop_assert!((left.to_matrix() - right.to_matrix()).amax() < 1e-10);
    }

    #[test]
    fn se2_matches_planar_se3(t in se2(), p in prop::array::uniform2(-1.0f64..1.0)) {
        let lifted = Se3::new(Se3::rot_z(t.angle()), Vector3::new(t.translation.x, t.translation.y, 0.0));
        let q2 = t.transform_point(&Vector2::from(p));
        let q3 = lifted.transform_point(&Vector3::new(p[0], p[1], 0.0));
        prop_assert!((q2.x - q3.x).abs() < 1e-12 && (q2.y - q3.y).abs() < 1e-12 && q3.z == 0.0);
    }

    #[test]
    fn pose_error_vanishes_only_at_the_goal(a in se3(3.0), w in twist3(1.0)) {
        let ta = Transform::Se3(a);
        prop_assert!(ta.pose_error(&ta).unwrap().amax() < 1e-12);
        let moved = Transform::Se3(a.compose(&w.exp()));
        let e = moved.pose_error(&ta).unwrap();
        prop_assert!(e.norm() > 0.0 || w.angular.norm() + w.linear.norm() < 1e-12);
    }

    #[test]
    fn wrapped_angles_are_principal(a in -100.0f64..100.0) {
        let w = wrap_angle(a);
        prop_assert!(w > -std::f64::consts::PI - 1e-12 && w <= std::f64::consts::PI + 1e-12);
        prop_assert!(((a - w) / (2.0 * std::f64::consts::PI)).fract().abs().min(
            1.0 - ((a - w) / (2.0 * std::f64::consts::PI)).fract().abs()) < 1e-9);
    }
}

#[test]
fn near_half_turn_log_is_an_explicit_error() {
    let r = Se3::new(Se3::rot_x(std::f64::consts::PI), Vector3::zeros());
    assert!(r.log().is_err());
    let planar = Twist2 {
        angular: 0.5,
        linear: Vector2::new(0.1, 0.2),
    };
    assert!(planar.exp().log().is_ok());
}
