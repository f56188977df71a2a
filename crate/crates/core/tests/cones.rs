use std::f64::consts::{FRAC_1_SQRT_2, PI};

use socx::cones::{
    adjacent_cone, decompose_multipliers, distance_oracle, normal_cone_membership, second_order_adjacent,
    second_order_normal_membership, ConeDescriptor, Constraint, SmoothConstraints,
};
use socx::fixtures::{cross_set, lens_set, two_circles_set};
use socx::Error;
use proptest::prelude::*;

const TOL: f64 = 1e-7;

fn disc() -> ConeDescriptor {
    ConeDescriptor::Smooth(SmoothConstraints::new(2, vec![], vec![Constraint::sphere(&[0.0, 0.0], 1.0)], true))
}

fn circle(center: &[f64]) -> SmoothConstraints {
    SmoothConstraints::new(2, vec![Constraint::sphere(center, 1.0)], vec![], false)
}

fn mesh() -> Vec<Vec<f64>> {
    (0..72)
        .map(|i| {
            let a = i as f64 * PI / 36.0;
            vec![a.cos(), a.sin()]
        })
        .collect()
}

#[test]
fn lens_cone_at_the_corner() {
    let t = adjacent_cone(&lens_set(), &[0.0, 0.0]).unwrap();
    // Generated by (0,1) and (1,1): v2 >= v1 >= 0.
    for v in mesh() {
        let inside = v[1] >= v[0] - 1e-12 && v[0] >= -1e-12;
        assert_eq!(t.contains(&v, TOL), inside, "{v:?}");
    }
}

#[test]
fn two_circles_cone_at_the_touching_point() {
    let t = adjacent_cone(&two_circles_set(), &[0.0, 0.0]).unwrap();
    for v in mesh() {
        assert_eq!(t.contains(&v, TOL), v[0].abs() < 1e-12, "{v:?}");
    }
}

#[test]
fn cross_cone_at_the_tip() {
    let t = adjacent_cone(&cross_set(), &[1.0, 0.0]).unwrap();
    for v in mesh() {
        assert_eq!(t.contains(&v, TOL), v[1].abs() < 1e-12 && v[0] <= 0.0, "{v:?}");
    }
    // At the centre every axis direction is admissible.
    let t = adjacent_cone(&cross_set(), &[0.0, 0.0]).unwrap();
    for v in mesh() {
        assert_eq!(t.contains(&v, TOL), v[0].abs() < 1e-12 || v[1].abs() < 1e-12, "{v:?}");
    }
}

#[test]
fn second_order_sets_of_the_benchmarks() {
    let up = [0.0, 1.0];
    let t = second_order_adjacent(&two_circles_set(), &[0.0, 0.0], &up).unwrap();
    assert!(t.contains(&[0.5, 0.0], TOL) && t.contains(&[-0.5, 3.0], TOL));
    assert!(!t.contains(&[0.0, 0.0], TOL));
    let t = second_order_adjacent(&lens_set(), &[0.0, 0.0], &up).unwrap();
    assert!(t.contains(&[0.5, 0.0], TOL) && t.contains(&[2.0, -4.0], TOL));
    assert!(!t.contains(&[0.4, 0.0], TOL));
    assert!(matches!(
        second_order_adjacent(&lens_set(), &[0.0, 0.0], &[1.0, 0.0]),
        Err(Error::NotTangent { .. })
    ));
}

#[test]
fn second_order_set_along_zero_is_the_adjacent_cone() {
    for (set, x) in [(cross_set(), vec![1.0, 0.0]), (lens_set(), vec![0.0, 0.0]), (disc(), vec![0.0, 1.0])] {
        let t1 = adjacent_cone(&set, &x).unwrap();
        let t2 = second_order_adjacent(&set, &x, &[0.0, 0.0]).unwrap();
        for v in mesh() {
            assert_eq!(t1.contains(&v, TOL), t2.contains(&v, TOL), "{x:?} {v:?}");
        }
    }
}

#[test]
fn normal_cone_examples() {
    let x = [1.0, 0.0];
    let yes = normal_cone_membership(&cross_set(), &x, &[1.0, 5.0]).unwrap();
    assert!(yes.member && yes.value == 0.0);
    let no = normal_cone_membership(&cross_set(), &x, &[-1.0, 0.0]).unwrap();
    assert!(!no.member);
    assert!((no.value - 1.0).abs() < 1e-9 && (no.maximizer[0] + 1.0).abs() < 1e-9);
    // Interior points only admit zero.
    assert!(normal_cone_membership(&disc(), &[0.2, 0.1], &[0.0, 0.0]).unwrap().member);
    assert!(!normal_cone_membership(&disc(), &[0.2, 0.1], &[0.0, 1e-3]).unwrap().member);
    // At the lens corner the normal cone is generated by (-1,0) and (-1,1)/sqrt2 rotated outward.
    assert!(normal_cone_membership(&lens_set(), &[0.0, 0.0], &[-1.0, 0.0]).unwrap().member);
    assert!(normal_cone_membership(&lens_set(), &[0.0, 0.0], &[FRAC_1_SQRT_2, -FRAC_1_SQRT_2]).unwrap().member);
    assert!(!normal_cone_membership(&lens_set(), &[0.0, 0.0], &[0.0, 1.0]).unwrap().member);
}

#[test]
fn second_order_normal_examples() {
    let single = ConeDescriptor::Singleton { point: vec![0.5, 0.5] };
    for z in [[1.0, 0.0, 0.0, 1.0], [100.0, 3.0, 3.0, -7.0]] {
        let v = second_order_normal_membership(&single, &[0.5, 0.5], &[2.0, -1.0], &z, 16).unwrap();
        assert!(v.member);
    }
    let x = [1.0, 0.0];
    let xi = [1.0, 0.0];
    let v = second_order_normal_membership(&disc(), &x, &xi, &[1.0, 0.0, 0.0, 1.0], 16).unwrap();
    assert!(v.member, "{v:?}");
    let v = second_order_normal_membership(&disc(), &x, &xi, &[1.0, 0.0, 0.0, 1.0 + 1e-3], 16).unwrap();
    assert!(!v.member);
    let (w, h) = v.witness.unwrap();
    assert!(w[0].abs() < 1e-9 && w[1].abs() > 0.0);
    // The witness is a genuine second-order tangent direction.
    assert!(second_order_adjacent(&disc(), &x, &w).unwrap().contains(&h, 1e-6));
    assert!(matches!(
        second_order_normal_membership(&disc(), &x, &[-1.0, 0.0], &[0.0; 4], 16),
        Err(Error::NotNormal { .. })
    ));
}

#[test]
fn distance_examples() {
    let ball = ConeDescriptor::Ball {
        center: vec![1.0, 0.0],
        radius: 1.0,
    };
    let d = distance_oracle(&ball, &[3.0, 0.0]);
    assert!((d.distance - 1.0).abs() < 1e-12);
    assert!((d.nearest[0] - 2.0).abs() < 1e-12 && d.nearest[1].abs() < 1e-12);
    assert_eq!(distance_oracle(&two_circles_set(), &[0.0, 0.0]).distance, 0.0);
    assert_eq!(distance_oracle(&ball, &[1.5, 0.5]).distance, 0.0);
}

#[test]
fn lens_distance_matches_brute_force() {
    let y = [1.0, 1.0];
    let centers = [[1.0, 0.0], [-FRAC_1_SQRT_2, FRAC_1_SQRT_2]];
    let inside = |p: [f64; 2]| centers.iter().all(|c| (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2) <= 1.0 + 1e-12);
    let mut best = f64::INFINITY;
    let samples = 500_000;
    for c in centers {
        for i in 0..samples {
            let a = 2.0 * PI * i as f64 / samples as f64;
            let p = [c[0] + a.cos(), c[1] + a.sin()];
            if inside(p) {
                best = best.min(((p[0] - y[0]).powi(2) + (p[1] - y[1]).powi(2)).sqrt());
            }
        }
    }
    let d = distance_oracle(&lens_set(), &y);
    assert!((d.distance - best).abs() < 1e-6, "{} vs {best}", d.distance);
}

#[test]
fn multiplier_examples() {
    let s = circle(&[0.0, 0.0]);
    let u = vec![vec![1.0, 0.0], vec![0.6, 0.8]];
    let zero = decompose_multipliers(&s, &u, &[vec![0.0, 0.0], vec![0.0, 0.0]], None).unwrap();
    assert!(zero.mu.iter().all(|m| m[0].abs() < 1e-12));
    // H_u = c u on the unit circle: mu = c/2.
    let c = 3.0;
    let hu: Vec<Vec<f64>> = u.iter().map(|x| x.iter().map(|a| c * a).collect()).collect();
    let m = decompose_multipliers(&s, &u, &hu, None).unwrap();
    assert!(m.mu.iter().all(|mu| (mu[0] - c / 2.0).abs() < 1e-9), "{:?}", m.mu);
    assert!(m.max_residual < 1e-9);
    // The gradient vanishes at the centre.
    let bad = decompose_multipliers(&circle(&[1.0, 0.0]), &[vec![1.0, 0.0]], &[vec![0.0, 0.0]], None);
    assert!(matches!(bad, Err(Error::LicqFails { step: 0 })));
    // Inequalities get nonnegative multipliers.
    let half = SmoothConstraints::new(2, vec![], vec![Constraint::linear(&[0.0, -1.0], 0.0)], true);
    let m = decompose_multipliers(&half, &[vec![0.3, 0.0]], &[vec![0.0, -2.0]], None).unwrap();
    assert!((m.lambda[0][0] - 2.0).abs() < 1e-9);
    assert_eq!(m.active[0], vec![0]);
}

proptest! {
    #[test]
    fn box_and_ball_distances_match_closed_forms(y0 in -4.0f64..4.0, y1 in -4.0f64..4.0, r in 0.1f64..2.0) {
        let y = [y0, y1];
        let ball = ConeDescriptor::Ball { center: vec![0.5, -0.5], radius: r };
        let want = (((y0 - 0.5).powi(2) + (y1 + 0.5).powi(2)).sqrt() - r).max(0.0);
        let d = distance_oracle(&ball, &y);
        prop_assert!((d.distance - want).abs() < 1e-9);
        prop_assert!(ball.contains(&d.nearest, 1e-9));

        let bx = ConeDescriptor::Box { lower: vec![-1.0, 0.0], upper: vec![1.0, r] };
        let clamped = [y0.clamp(-1.0, 1.0), y1.clamp(0.0, r)];
        let want = ((y0 - clamped[0]).powi(2) + (y1 - clamped[1]).powi(2)).sqrt();
        let d = distance_oracle(&bx, &y);
        prop_assert!((d.distance - want).abs() < 1e-9);
        prop_assert!((d.nearest[0] - clamped[0]).abs() < 1e-9 && (d.nearest[1] - clamped[1]).abs() < 1e-9);
    }

    #[test]
    fn tangent_cone_of_a_box_is_sign_constrained(a in -1.0f64..1.0, v0 in -1.0f64..1.0, v1 in -1.0f64..1.0) {
        // On the bottom edge of the unit box: v2 >= 0, v1 free in the interior of the edge.
        let x = [a.clamp(-0.99, 0.99), -1.0];
        let t = adjacent_cone(&ConeDescriptor::unit_box(2), &x).unwrap();
        prop_assert_eq!(t.contains(&[v0, v1], 1e-12), v1 >= 0.0);
    }
}
