use socx::fixtures;
use socx::sde::{fundamental_matrix, simulate_state, BrownianBundle, TimeGrid};
use socx::variational::{
    cost_difference_quotient, decay_status, explicit_first_variation, log_slope, remainder_probe_first,
    remainder_probe_second, solve_first_variation, solve_second_variation, DecayRow, DecayStatus, ProbeOptions,
    VariationDirection,
};
use socx::Error;

const N: usize = 64;

fn bundle(paths: usize) -> BrownianBundle {
    BrownianBundle::new(9, paths, TimeGrid::new(1.0, N).unwrap())
}

fn quick() -> ProbeOptions {
    ProbeOptions {
        paths: 400,
        steps: 128,
        ..ProbeOptions::default()
    }
}

#[test]
fn zero_direction_has_zero_variation() {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let b = simulate_state(&ex.problem, c, &[0.0, 0.0], &bundle(20)).unwrap();
    let d = VariationDirection::constant(&[0.0, 0.0], 2);
    let y = solve_first_variation(&ex.problem, &b, &d).unwrap();
    assert!(y.y1.iter().all(|&v| v == 0.0));
    let y2 = solve_second_variation(&ex.problem, &b, &d, &y).unwrap();
    assert!(y2.y2.unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn ex31_first_variation_is_a_double_integral() {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let b = simulate_state(&ex.problem, c, &[0.0, 0.0], &bundle(5)).unwrap();
    let d = VariationDirection::constant(&[1.0, 0.0], 2);
    let y = solve_first_variation(&ex.problem, &b, &d).unwrap();
    let dt = b.grid.dt();
    for p in 0..5 {
        for k in 0..=N {
            let t = b.grid.t(k);
            assert!((y.y1(p, k)[1] - t).abs() < 1e-12);
            // Left Riemann sums of s on [0, t].
            assert!((y.y1(p, k)[0] - t * (t - dt) / 2.0).abs() < 1e-12);
        }
    }
    // The control enters the noise through u2, so v = (0,1) gives y1_2 = W.
    let y = solve_first_variation(&ex.problem, &b, &VariationDirection::constant(&[0.0, 1.0], 2)).unwrap();
    for k in 0..=N {
        assert!((y.y1(3, k)[1] - b.w(3, k)).abs() < 1e-12);
    }
}

#[test]
fn explicit_formula_agrees_to_first_order_in_the_step() {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let d = VariationDirection::constant(&[0.3, -0.7], 2);
    let gap = |steps: usize| {
        let bb = BrownianBundle::with_base(9, 20, TimeGrid::new(1.0, steps).unwrap(), 1024).unwrap();
        let b = simulate_state(&ex.problem, c, &[0.0, 0.0], &bb).unwrap();
        let phi = fundamental_matrix(&ex.problem, &b).unwrap();
        let e = explicit_first_variation(&ex.problem, &b, &phi, &d).unwrap();
        let s = solve_first_variation(&ex.problem, &b, &d).unwrap();
        e.y1.iter().zip(&s.y1).map(|(a, z)| (a - z).abs()).fold(0.0, f64::max)
    };
    let (coarse, fine) = (gap(64), gap(256));
    assert!(coarse < 0.1 && fine < coarse / 3.0, "{coarse} {fine}");
}

#[test]
fn ex42_noise_direction_is_invisible_to_first_order() {
    let ex = fixtures::ex42();
    let c = ex.candidate("zero").unwrap();
    let b = simulate_state(&ex.problem, c, &[0.0, 0.0], &bundle(10)).unwrap();
    let d = VariationDirection::constant(&[0.0, 1.0], 2);
    let y = solve_first_variation(&ex.problem, &b, &d).unwrap();
    assert!(y.y1.iter().all(|&v| v == 0.0));
    let y2 = solve_second_variation(&ex.problem, &b, &d, &y).unwrap();
    assert!(y2.y2.unwrap().iter().all(|&v| v == 0.0));
}

#[test]
fn ex41_second_variation_follows_h() {
    let ex = fixtures::ex41();
    let c = ex.candidate("zero").unwrap();
    let b = simulate_state(&ex.problem, c, &[0.0, 0.0], &bundle(3)).unwrap();
    let d = VariationDirection::constant(&[0.0, 0.0], 2).with_h(&[0.5, 0.0]);
    let y = solve_first_variation(&ex.problem, &b, &d).unwrap();
    let y2 = solve_second_variation(&ex.problem, &b, &d, &y).unwrap();
    for k in 0..=N {
        let got = y2.y2(2, k).unwrap();
        assert!((got[0] - b.grid.t(k)).abs() < 1e-12 && got[1] == 0.0, "{got:?}");
    }
}

#[test]
fn second_variation_rejects_a_foreign_first_variation() {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let d = VariationDirection::constant(&[1.0, 0.0], 2);
    let b1 = simulate_state(&ex.problem, c, &[0.0, 0.0], &bundle(3)).unwrap();
    let b2 = simulate_state(&ex.problem, c, &[0.0, 0.0], &bundle(4)).unwrap();
    let y = solve_first_variation(&ex.problem, &b1, &d).unwrap();
    assert!(matches!(solve_second_variation(&ex.problem, &b2, &d, &y), Err(Error::GridMismatch(_))));
}

#[test]
fn linear_dynamics_sit_at_the_floor() {
    let ex = fixtures::ex31();
    let c = ex.candidate("optimal").unwrap();
    let v = VariationDirection::constant(&[-1.0, 0.0], 2);
    let t = remainder_probe_first(&ex.problem, &ex.constraints, c, &v, &quick()).unwrap();
    assert_eq!(t.status, DecayStatus::AtFloor);
    let zero = VariationDirection::constant(&[0.0, 0.0], 2);
    let t = remainder_probe_second(&ex.problem, &ex.constraints, c, &zero, &quick()).unwrap();
    assert!(t.rows.iter().all(|r| r.norm_beta1 == 0.0 && r.norm_beta2 == 0.0));
}

#[test]
fn nonlinear_drift_remainder_decreases() {
    let force = ProbeOptions { force: true, ..quick() };
    let ex = fixtures::ex41_with([[0.0, 0.0], [0.0, 0.5]], true);
    let c = ex.candidate("zero").unwrap();
    let d = VariationDirection::constant(&[0.0, 1.0], 2).with_h(&[0.5, 0.0]);
    let t = remainder_probe_second(&ex.problem, &ex.constraints, c, &d, &force).unwrap();
    assert_eq!(t.status, DecayStatus::Decreasing, "{t:?}");
    let (first, last) = (t.rows[0].norm_beta2, t.rows.last().unwrap().norm_beta2);
    assert!(last < first / 2.0, "{first} -> {last}");

    let ex = fixtures::ex42();
    let t = remainder_probe_first(&ex.problem, &ex.constraints, ex.candidate("zero").unwrap(), &d, &force).unwrap();
    assert!(t.slope.unwrap() >= 0.8, "{:?}", t.slope);
}

#[test]
fn leaving_the_control_set_is_an_error_unless_forced() {
    let ex = fixtures::ex41();
    let c = ex.candidate("zero").unwrap();
    let d = VariationDirection::constant(&[0.0, 0.0], 2).with_h(&[-5.0, 0.0]);
    match remainder_probe_second(&ex.problem, &ex.constraints, c, &d, &quick()) {
        Err(Error::InadmissiblePerturbation { distance, .. }) => assert!(distance > 0.0),
        other => panic!("{other:?}"),
    }
    let forced = ProbeOptions { force: true, ..quick() };
    let t = remainder_probe_second(&ex.problem, &ex.constraints, c, &d, &forced).unwrap();
    assert!(t.max_membership_defect > 0.0 && !t.offenders.is_empty());
    let empty = ProbeOptions { eps: vec![], ..quick() };
    assert!(matches!(remainder_probe_first(&ex.problem, &ex.constraints, c, &d, &empty), Err(Error::Invalid(_))));
}

#[test]
fn decay_helpers() {
    let row = |eps: f64, v: f64| DecayRow {
        eps,
        norm_beta1: v,
        norm_beta2: v,
        std_err: 0.0,
    };
    let rows: Vec<DecayRow> = [0.2, 0.1, 0.05].iter().map(|&e| row(e, e * e)).collect();
    assert!((log_slope(&rows).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(decay_status(&rows, 1e-6), DecayStatus::Decreasing);
    assert_eq!(decay_status(&rows, 1.0), DecayStatus::AtFloor);
    let up: Vec<DecayRow> = [0.2, 0.1, 0.05].iter().map(|&e| row(e, 1.0 / e)).collect();
    assert_eq!(decay_status(&up, 1e-6), DecayStatus::NotDecreasing);
    assert_eq!(log_slope(&[row(0.1, 0.0), row(0.2, 0.0)]), None);
}

#[test]
fn ex31_cost_quotient_matches_the_gradient() {
    // dJ along v = (1,0) at u = 0 is E int H_u v dt with H_u = -P1_2 = -(1 - t)/2, so -1/4.
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let d = VariationDirection::constant(&[1.0, 0.0], 2);
    let q = cost_difference_quotient(&ex.problem, &[0.0, 0.0], c, &d, &bundle(4000), 1e-3).unwrap();
    assert!((q.mean + 0.25).abs() < 0.01 + 4.0 * q.std_err, "{q:?}");
}
