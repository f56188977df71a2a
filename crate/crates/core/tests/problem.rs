use std::sync::Arc;

use socx::cones::ConeDescriptor;
use socx::fixtures::{self, builtin_example};
use socx::problem::{validate_problem, ConstraintSpec, ControlProblem, SecondDerivatives};
use socx::Error;

fn scalar(name: &str, gx_sign: f64) -> ControlProblem {
    ControlProblem::builder(name, 1, 1, 1.0)
        .drift(|_, _, _, out| out[0] = 0.0)
        .diffusion(|_, _, _, out| out[0] = 0.0)
        .running_cost(|_, _, _| 0.0)
        .terminal_cost(|x, _| 3.0 * x[0])
        .b_x(|_, _, _, out| out[0] = 0.0)
        .b_u(|_, _, _, out| out[0] = 0.0)
        .sigma_x(|_, _, _, out| out[0] = 0.0)
        .sigma_u(|_, _, _, out| out[0] = 0.0)
        .f_x(|_, _, _, out| out[0] = 0.0)
        .f_u(|_, _, _, out| out[0] = 0.0)
        .g_x(move |_, _, out| out[0] = 3.0 * gx_sign)
        .second(SecondDerivatives::zero())
        .build()
        .unwrap()
}

fn spec1() -> ConstraintSpec {
    ConstraintSpec::fixed_start(ConeDescriptor::unit_box(1), vec![0.0])
}

#[test]
fn builtin_derivatives_agree_with_finite_differences() {
    for name in ["ex31", "ex41", "ex42", "ex43", "zero", "gbm", "sphere", "counter"] {
        let ex = builtin_example(name).unwrap();
        let r = validate_problem(&ex.problem, &ex.constraints).unwrap();
        assert!(r.passed(), "{name}: {:?}", r.checks.iter().filter(|c| !c.passed).collect::<Vec<_>>());
    }
    let ex = fixtures::ex31();
    let r = validate_problem(&ex.problem, &ex.constraints).unwrap();
    assert_eq!(r.samples, 100);
    assert!(r.checks.iter().all(|c| c.max_abs_error < 1e-6), "{:?}", r.checks);
}

#[test]
fn negated_terminal_gradient_is_flagged() {
    let r = validate_problem(&scalar("flip", -1.0), &spec1()).unwrap();
    assert!(!r.passed());
    let g = r.get("g_x").unwrap();
    assert!(!g.passed);
    assert!((g.max_abs_error - 6.0).abs() < 1e-6, "{}", g.max_abs_error);
}

#[test]
fn trivial_problem_has_zero_discrepancies() {
    let p = ControlProblem::builder("nothing", 1, 1, 1.0)
        .drift(|_, _, _, out| out[0] = 0.0)
        .diffusion(|_, _, _, out| out[0] = 0.0)
        .running_cost(|_, _, _| 0.0)
        .terminal_cost(|_, _| 0.0)
        .b_x(|_, _, _, out| out[0] = 0.0)
        .b_u(|_, _, _, out| out[0] = 0.0)
        .sigma_x(|_, _, _, out| out[0] = 0.0)
        .sigma_u(|_, _, _, out| out[0] = 0.0)
        .f_x(|_, _, _, out| out[0] = 0.0)
        .f_u(|_, _, _, out| out[0] = 0.0)
        .g_x(|_, _, out| out[0] = 0.0)
        .build()
        .unwrap();
    let r = validate_problem(&p, &spec1()).unwrap();
    assert!(r.passed());
    assert!(r.checks.iter().all(|c| c.max_abs_error == 0.0));
    assert!(validate_problem(&scalar("ok", 1.0), &spec1()).unwrap().passed());
}

#[test]
fn wrong_output_dimension_is_reported() {
    let mut p = scalar("wide", 1.0);
    p.drift = Arc::new(|_, _, _, out: &mut [f64]| out.copy_from_slice(&[0.0, 0.0]));
    match validate_problem(&p, &spec1()) {
        Err(Error::DimensionMismatch { callback, .. }) | Err(Error::CallbackPanic { callback, .. }) => {
            assert_eq!(callback, "drift")
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn missing_callbacks_fail_to_build() {
    assert!(ControlProblem::builder("half", 1, 1, 1.0)
        .drift(|_, _, _, out| out[0] = 0.0)
        .build()
        .is_err());
}

#[test]
fn builtin_examples_have_the_stated_data() {
    let ex = fixtures::ex31();
    let p = &ex.problem;
    let (mut b, mut s) = ([0.0; 2], [0.0; 2]);
    (p.drift)(0.3, &[0.2, 0.7], &[0.4, -0.6], &mut b);
    (p.diffusion)(0.3, &[0.2, 0.7], &[0.4, -0.6], &mut s);
    assert_eq!(b, [0.7 - 0.5, 0.4]);
    assert_eq!(s, [1.0, -0.6]);
    assert_eq!((p.terminal_cost)(&[1.5, 0.0], 0.5), 0.5);

    let ex = fixtures::ex41();
    for (u, inside) in [([0.0, 0.0], true), ([0.1, 0.3], true), ([0.0, -0.1], false), ([1.0, 0.0], false)] {
        assert_eq!(ex.constraints.control_set.contains(&u, 1e-12), inside, "{u:?}");
    }

    let ex = fixtures::ex42();
    let p = &ex.problem;
    (p.diffusion)(0.0, &[0.0, 0.0], &[0.0, 0.5], &mut s);
    assert_eq!(s[1], 0.0625);
    assert_eq!((p.running_cost)(0.0, &[0.0, 0.0], &[0.0, 0.5]), 0.0625);
    for u in [[0.0, 0.0], [2.0, 0.0], [-1.0, 1.0], [1.0, -1.0]] {
        assert!(ex.constraints.control_set.contains(&u, 1e-12), "{u:?}");
    }
    assert!(!ex.constraints.control_set.contains(&[0.5, 0.0], 1e-6));
}

#[test]
fn unknown_candidate_is_an_error() {
    let ex = fixtures::ex31();
    assert!(matches!(ex.candidate("best"), Err(Error::UnknownCandidate { .. })));
}
