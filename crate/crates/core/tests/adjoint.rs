use socx::adjoint::{
    duality_check, eval_hamiltonian, martingale_residual, second_order_duality, singular_matrix, solve_adjoints,
    solve_first_adjoint, solve_second_adjoint, AdjointMethod, AdjointOptions,
};
use socx::fixtures;
use socx::sde::{simulate_state, BrownianBundle, TimeGrid};
use socx::variational::{solve_first_variation, VariationDirection};

fn bundle(paths: usize) -> BrownianBundle {
    BrownianBundle::new(42, paths, TimeGrid::new(1.0, 256).unwrap())
}

fn opts(method: AdjointMethod) -> AdjointOptions {
    AdjointOptions {
        method,
        ..AdjointOptions::default()
    }
}

#[test]
fn ex31_zero_first_adjoint_both_tiers() {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let x0 = &ex.constraints.initial_point;
    let b = simulate_state(&ex.problem, c, x0, &bundle(20_000)).unwrap();
    let ode = solve_first_adjoint(&ex.problem, &b, &opts(AdjointMethod::Ode)).unwrap();
    let reg = solve_first_adjoint(&ex.problem, &b, &opts(AdjointMethod::Regression)).unwrap();
    let (mut p, mut q) = (vec![0.0; 2], vec![0.0; 2]);
    let mut e_ode: f64 = 0.0;
    let mut e_reg: f64 = 0.0;
    for path in 0..200 {
        for k in 0..=256 {
            let t = k as f64 / 256.0;
            let (x, w) = (b.x(path, k), b.w(path, k));
            ode.p1(k, x, w, &mut p);
            // The terminal value carries the O(dt) Euler offset of x1(1) - W(1).
            if k < 256 {
                e_ode = e_ode.max((p[1] - (1.0 - t) / 2.0).abs()).max((p[0] - 0.5).abs());
            }
            reg.p1(k, x, w, &mut p);
            reg.q1(k, x, w, &mut q);
            e_reg = e_reg.max((p[1] - (1.0 - t) / 2.0).abs()).max(q[1].abs());
        }
    }
    assert!(e_ode < 1e-8, "ode error {e_ode}");
    assert!(e_reg < 0.02, "regression error {e_reg}");
    assert_eq!(ode.meta.first_method, "deterministic-ode");
    assert_eq!(reg.meta.first_method, "regression-mc");
    let auto = solve_first_adjoint(&ex.problem, &b, &opts(AdjointMethod::Auto)).unwrap();
    assert_eq!(auto.meta.first_method, "deterministic-ode");
    let mc = martingale_residual(&ex.problem, &b, &reg, &AdjointOptions::default()).unwrap();
    assert!(mc.passed, "{mc:?}");
}

#[test]
fn ex43_second_adjoint_and_s() {
    let ex = fixtures::ex43();
    let c = ex.candidate("optimal").unwrap();
    let adj = solve_adjoints(&ex.problem, c, &ex.constraints.initial_point, &bundle(1000), &AdjointOptions::default(), true)
        .unwrap();
    assert_eq!(adj.meta.second_method.as_deref(), Some("deterministic-ode"));
    let b = simulate_state(&ex.problem, c, &ex.constraints.initial_point, &bundle(4)).unwrap();
    let s = singular_matrix(&ex.problem, &b, &adj).unwrap();
    assert!(s.deterministic);
    let mut p2 = vec![0.0; 4];
    let mut err: f64 = 0.0;
    let mut err_s: f64 = 0.0;
    for k in 0..=256 {
        let t = k as f64 / 256.0;
        adj.p2(k, b.x(0, k), b.w(0, k), &mut p2);
        let want = [-1.0, t - 1.0, t - 1.0, -(t - 1.0) * (t - 1.0)];
        for i in 0..4 {
            err = err.max((p2[i] - want[i]).abs());
        }
        let want_s = [t - 1.0, -(t - 1.0) * (t - 1.0), 0.0, 0.0];
        for i in 0..4 {
            err_s = err_s.max((s.s(1, k)[i] - want_s[i]).abs());
        }
    }
    assert!(err < 1e-6, "P2 error {err}");
    assert!(err_s < 1e-6, "S error {err_s}");
}

#[test]
fn ex31_hamiltonian_and_duality() {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let x0 = &ex.constraints.initial_point;
    let b = simulate_state(&ex.problem, c, x0, &bundle(5000)).unwrap();
    let adj = solve_first_adjoint(&ex.problem, &b, &AdjointOptions::default()).unwrap();
    let h = eval_hamiltonian(&ex.problem, &b, &adj).unwrap();
    for k in 0..256 {
        let t = k as f64 / 256.0;
        assert!((h.h_u(3, k)[0] - (1.0 - t) / 2.0).abs() < 1e-8);
        assert!(h.h_u(3, k)[1].abs() < 1e-12);
    }
    let dir = VariationDirection::constant(&[1.0, 0.0], 2);
    let y1 = solve_first_variation(&ex.problem, &b, &dir).unwrap();
    let d = duality_check(&ex.problem, &b, &dir, &y1, &adj).unwrap();
    assert!(d.gap.abs() < 3.0 * d.std_err + 0.01, "{d:?}");
    assert!((d.lhs + 0.25).abs() < 0.01, "{d:?}");
}

#[test]
fn gbm_regression_matches_closed_form() {
    let (a, s) = (0.1, 0.3);
    let ex = fixtures::gbm(a, s);
    let c = ex.candidate("zero").unwrap();
    let x0 = &ex.constraints.initial_point;
    let b = simulate_state(&ex.problem, c, x0, &bundle(20_000)).unwrap();
    assert!(solve_first_adjoint(&ex.problem, &b, &opts(AdjointMethod::Ode)).is_err());
    let first = solve_first_adjoint(&ex.problem, &b, &AdjointOptions::default()).unwrap();
    assert_eq!(first.meta.first_method, "regression-mc");
    let full = solve_second_adjoint(&ex.problem, &b, first, &AdjointOptions::default()).unwrap();
    assert_eq!(full.meta.second_method.as_deref(), Some("deterministic-ode"));
    // Regression extrapolates at the tails, so the per-node error is averaged over paths.
    let mut p = vec![0.0; 1];
    let mut worst_mean: f64 = 0.0;
    let mut worst: f64 = 0.0;
    for k in 0..=256 {
        let t = k as f64 / 256.0;
        let mut mean = 0.0;
        for path in 0..1000 {
            full.p1(k, b.x(path, k), b.w(path, k), &mut p);
            let e = (p[0] - fixtures::gbm_p1(a, s, t, b.x(path, k)[0])).abs();
            mean += e / 1000.0;
            worst = worst.max(e);
        }
        worst_mean = worst_mean.max(mean);
    }
    assert!(worst_mean < 0.01, "gbm mean error {worst_mean}");
    assert!(worst < 0.15, "gbm worst error {worst}");
    let mut p2 = vec![0.0];
    full.p2(0, &[1.0], 0.0, &mut p2);
    assert!((p2[0] + (2.0 * a + s * s).exp()).abs() < 1e-6);
    let dir = VariationDirection::constant(&[1.0], 1);
    let y1 = solve_first_variation(&ex.problem, &b, &dir).unwrap();
    let d1 = duality_check(&ex.problem, &b, &dir, &y1, &full).unwrap();
    assert!(d1.gap.abs() < 3.0 * d1.std_err + 0.01, "{d1:?}");
    let d2 = second_order_duality(&ex.problem, &b, &dir, &y1, &full).unwrap();
    assert!(d2.gap.abs() < 3.0 * d2.std_err + 0.01, "{d2:?}");
}

#[test]
fn ex31_optimum_has_vanishing_first_adjoint() {
    let ex = fixtures::ex31();
    let c = ex.candidate("optimal").unwrap();
    let b = simulate_state(&ex.problem, c, &ex.constraints.initial_point, &bundle(50)).unwrap();
    let adj = solve_first_adjoint(&ex.problem, &b, &AdjointOptions::default()).unwrap();
    let paths = adj.materialize(&b).unwrap();
    let mut worst: f64 = 0.0;
    for path in 0..50 {
        for k in 0..256 {
            worst = worst.max(paths.p1(path, k).iter().chain(paths.q1(path, k)).fold(0.0, |a, x| a.max(x.abs())));
        }
    }
    assert!(worst < 5e-3, "{worst}");
}

#[test]
fn zero_problem_has_zero_adjoints() {
    let ex = fixtures::zero_problem();
    let c = ex.candidate("zero").unwrap();
    let x0 = &ex.constraints.initial_point;
    let adj = solve_adjoints(&ex.problem, c, x0, &bundle(20), &AdjointOptions::default(), true).unwrap();
    let b = simulate_state(&ex.problem, c, x0, &bundle(20)).unwrap();
    let h = eval_hamiltonian(&ex.problem, &b, &adj).unwrap();
    let s = singular_matrix(&ex.problem, &b, &adj).unwrap();
    let all_zero = |v: &[f64]| v.iter().all(|&x| x == 0.0);
    assert!(all_zero(&h.h) && all_zero(&h.h_u) && all_zero(&s.values));
    let paths = adj.materialize(&b).unwrap();
    for k in 0..=256 {
        assert!(all_zero(paths.p1(7, k)) && all_zero(paths.p2(7, k).unwrap()));
    }
}

#[test]
fn ex41_gradient_points_out_of_the_lens() {
    let ex = fixtures::ex41();
    let c = ex.candidate("zero").unwrap();
    let x0 = &ex.constraints.initial_point;
    let adj = solve_adjoints(&ex.problem, c, x0, &bundle(20), &AdjointOptions::default(), true).unwrap();
    let b = simulate_state(&ex.problem, c, x0, &bundle(20)).unwrap();
    let h = eval_hamiltonian(&ex.problem, &b, &adj).unwrap();
    let s = singular_matrix(&ex.problem, &b, &adj).unwrap();
    let paths = adj.materialize(&b).unwrap();
    let (mut q2, mut p2) = (vec![0.0; 4], vec![0.0; 4]);
    for k in 0..=256 {
        assert!((h.h_u(2, k)[0] + 1.0).abs() < 1e-12 && h.h_u(2, k)[1].abs() < 1e-12);
        assert!(s.s(2, k).iter().all(|x| x.abs() < 1e-12));
        adj.q2(k, b.x(2, k), b.w(2, k), &mut q2);
        p2.copy_from_slice(paths.p2(2, k).unwrap());
        assert!(q2.iter().chain(&p2).all(|x| x.abs() < 1e-12));
    }
}

#[test]
fn duality_along_zero_is_trivial() {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let b = simulate_state(&ex.problem, c, &ex.constraints.initial_point, &bundle(200)).unwrap();
    let adj = solve_first_adjoint(&ex.problem, &b, &AdjointOptions::default()).unwrap();
    let dir = VariationDirection::constant(&[0.0, 0.0], 2);
    let y1 = solve_first_variation(&ex.problem, &b, &dir).unwrap();
    let d = duality_check(&ex.problem, &b, &dir, &y1, &adj).unwrap();
    assert_eq!((d.lhs, d.rhs, d.gap), (0.0, 0.0, 0.0));
}
