//! Property tests for the geometric and algebraic invariants.

use nalgebra::{DMatrix, Quaternion, UnitQuaternion, Vector3};
use proptest::prelude::*;
use uscal_core::polyengine::{self, PolyError, QuadraticSystem};
use uscal_core::{line_point_distance, planes_from_line, Line3, Similarity};

fn vec3(half_width: f64) -> impl Strategy<Value = Vector3<f64>> {
    (
        -half_width..half_width,
        -half_width..half_width,
        -half_width..half_width,
    )
        .prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

fn rotation() -> impl Strategy<Value = UnitQuaternion<f64>> {
    (
        -1.0f64..1.0,
        -1.0f64..1.0,
        -1.0f64..1.0,
        -1.0f64..1.0,
    )
        .prop_filter("nonzero quaternion", |(w, x, y, z)| {
            (w * w + x * x + y * y + z * z) > 1e-3
        })
        .prop_map(|(w, x, y, z)| UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z)))
}

fn similarity() -> impl Strategy<Value = Similarity> {
    (rotation(), vec3(200.0), 0.05f64..0.6)
        .prop_map(|(r, t, s)| Similarity::new(r, t, s))
}

proptest! {
    #[test]
    fn similarity_preserves_shape_up_to_scale(
        a in similarity(),
        x in vec3(500.0),
        y in vec3(500.0),
    ) {
        let lhs = (a.apply(x) - a.apply(y)).norm();
        let rhs = a.scale * (x - y).norm();
        prop_assert!((lhs - rhs).abs() <= 1e-9 * rhs.max(1.0));
    }

    #[test]
    fn distance_invariant_under_line_reparameterization(
        p0 in vec3(100.0),
        d in vec3(50.0).prop_filter("usable direction", |d| d.norm() > 0.1),
        p in vec3(100.0),
        stretch in 0.2f64..5.0,
    ) {
        let line = Line3::new(p0, p0 + d).unwrap();
        let base = line_point_distance(&line, p);
        let swapped = Line3::new(p0 + d, p0).unwrap();
        let stretched = Line3::new(p0, p0 + stretch * d).unwrap();
        prop_assert!((line_point_distance(&swapped, p) - base).abs() < 1e-9 * (1.0 + base));
        prop_assert!((line_point_distance(&stretched, p) - base).abs() < 1e-9 * (1.0 + base));
    }

    #[test]
    fn plane_pair_contains_line_and_is_orthogonal(
        p0 in vec3(150.0),
        d in vec3(80.0).prop_filter("usable direction", |d| d.norm() > 0.5),
        anchor in vec3(150.0),
    ) {
        let line = Line3::new(p0, p0 + d).unwrap();
        prop_assume!(line_point_distance(&line, anchor) > 1.0);
        let (pi, pi_star) = planes_from_line(&line, anchor).unwrap();
        for plane in [&pi, &pi_star] {
            prop_assert!(plane.signed_distance(line.p0()).abs() < 1e-10);
            prop_assert!(plane.signed_distance(line.p1()).abs() < 1e-10);
        }
        prop_assert!(pi.signed_distance(anchor).abs() < 1e-10);
        prop_assert!(pi.normal().dot(&pi_star.normal()).abs() < 1e-10);
    }

    #[test]
    fn nullspace_vectors_annihilate_constraints(
        entries in proptest::collection::vec(-1.0f64..1.0, 7 * 13),
    ) {
        let m = DMatrix::from_row_slice(7, 13, &entries);
        // Random dense matrices are full rank almost surely; skip the rest.
        match polyengine::nullspace(&m, 6) {
            Ok(ns) => {
                prop_assert_eq!(ns.vectors.len(), 6);
                for v in &ns.vectors {
                    prop_assert!((&m * v).norm() < 1e-8 * m.norm());
                    prop_assert!((v.norm() - 1.0).abs() < 1e-10);
                }
                for i in 0..6 {
                    for j in i + 1..6 {
                        prop_assert!(ns.vectors[i].dot(&ns.vectors[j]).abs() < 1e-10);
                    }
                }
            }
            Err(PolyError::RankDeficient) => {}
            Err(other) => prop_assert!(false, "unexpected error {:?}", other),
        }
    }

    #[test]
    fn two_conic_solutions_satisfy_both_equations(
        coeffs in proptest::collection::vec(-1.0f64..1.0, 2 * 6),
    ) {
        let monomials = {
            // degree-2 monomials of (a, b, c) in the engine's pair order
            let mut m = Vec::new();
            for k in 0..3u8 {
                for l in k..3 {
                    let mut e = vec![0u8; 3];
                    e[k as usize] += 1;
                    e[l as usize] += 1;
                    m.push(polyengine::Monomial(e));
                }
            }
            m
        };
        let sys = QuadraticSystem {
            coeffs: DMatrix::from_row_slice(2, 6, &coeffs),
            monomials,
            nvars: 3,
        };
        match polyengine::solve_two_conics(&sys) {
            Ok(solutions) => {
                prop_assert!(solutions.len() <= 4);
                for s in &solutions {
                    prop_assert!(sys.relative_residual(s) < 1e-6);
                }
            }
            Err(PolyError::NoRealSolutions) => {}
            Err(other) => prop_assert!(false, "unexpected error {:?}", other),
        }
    }

    #[test]
    fn rotation_error_is_symmetric_and_bounded(
        qa in rotation(),
        qb in rotation(),
    ) {
        let ra = qa.to_rotation_matrix().into_inner();
        let rb = qb.to_rotation_matrix().into_inner();
        let ab = uscal_core::rotation_error(&ra, &rb);
        let ba = uscal_core::rotation_error(&rb, &ra);
        prop_assert!((ab - ba).abs() < 1e-9);
        prop_assert!((0.0..=std::f64::consts::PI + 1e-12).contains(&ab));
    }
}
