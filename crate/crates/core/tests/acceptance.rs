//! Acceptance run: one line per criterion, nonzero exit if any fails.
//! `cargo test --test acceptance -- 3 7` runs a subset.

use std::f64::consts::FRAC_1_SQRT_2;
use std::panic::{self, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use socx::adjoint::{
    duality_check, singular_matrix, solve_adjoints, solve_first_adjoint, AdjointMethod, AdjointOptions,
};
use socx::conditions::*;
use socx::cones::{direction_mesh, distance_oracle, ConeDescriptor, Constraint, SmoothConstraints};
use socx::config::RunConfig;
use socx::fixtures::{self, Example};
use socx::problem::{CandidateControl, ControlLaw};
use socx::run;
use socx::sde::{estimate_cost_streaming, simulate_state, BrownianBundle, TimeGrid, DEFAULT_PATHS, DEFAULT_SEED, DEFAULT_STEPS};
use socx::variational::{remainder_probe_first, remainder_probe_second, DecayTable, ProbeOptions, VariationDirection};

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg)
    }
}

fn grid() -> TimeGrid {
    TimeGrid::new(1.0, DEFAULT_STEPS).unwrap()
}

fn checks(ex: &Example, cand: &str, paths: usize, second: bool) -> (CandidateControl, CheckOptions, bool) {
    let c = ex.candidate(cand).unwrap().clone();
    let o = CheckOptions {
        paths,
        ..CheckOptions::default()
    };
    (c, o, second)
}

fn opts(method: AdjointMethod) -> AdjointOptions {
    AdjointOptions {
        method,
        ..AdjointOptions::default()
    }
}

fn adjoint_golden_ex31() -> Outcome {
    let ex = fixtures::ex31();
    let c = ex.candidate("zero").unwrap();
    let b = simulate_state(&ex.problem, c, &ex.constraints.initial_point, &BrownianBundle::new(DEFAULT_SEED, 20_000, grid())).unwrap();
    let ode = solve_first_adjoint(&ex.problem, &b, &opts(AdjointMethod::Ode)).unwrap();
    let reg = solve_first_adjoint(&ex.problem, &b, &opts(AdjointMethod::Regression)).unwrap();
    let mut p = [0.0; 2];
    let (mut e_ode, mut e_reg) = (0.0f64, 0.0f64);
    let n = DEFAULT_STEPS;
    // The ODE tier is deterministic: one path carries every node value.
    for k in 0..n {
        let t = k as f64 / n as f64;
        ode.p1(k, b.x(0, k), b.w(0, k), &mut p);
        e_ode = e_ode.max((p[1] - (1.0 - t) / 2.0).abs());
    }
    for path in 0..b.paths {
        for k in 0..=n {
            let t = k as f64 / n as f64;
            reg.p1(k, b.x(path, k), b.w(path, k), &mut p);
            e_reg = e_reg.max((p[1] - (1.0 - t) / 2.0).abs());
        }
    }
    ensure(e_ode < 1e-8, format!("ode error {e_ode:.2e}"))?;
    ensure(e_reg < 0.02, format!("regression error {e_reg:.2e}"))?;
    Ok(format!("ode max error {e_ode:.1e}, regression max error {e_reg:.1e} over {} paths", b.paths))
}

fn adjoint_golden_ex43() -> Outcome {
    let ex = fixtures::ex43();
    let c = ex.candidate("optimal").unwrap();
    let x0 = &ex.constraints.initial_point;
    let brownian = BrownianBundle::new(DEFAULT_SEED, 2000, grid());
    let adj = solve_adjoints(&ex.problem, c, x0, &brownian, &opts(AdjointMethod::Ode), true).unwrap();
    let b = simulate_state(&ex.problem, c, x0, &brownian.with_paths(4)).unwrap();
    let s = singular_matrix(&ex.problem, &b, &adj).unwrap();
    let mut p2 = [0.0; 4];
    let (mut e_p2, mut e_s) = (0.0f64, 0.0f64);
    for path in 0..4 {
        for k in 0..=DEFAULT_STEPS {
            let t = k as f64 / DEFAULT_STEPS as f64;
            adj.p2(k, b.x(path, k), b.w(path, k), &mut p2);
            let want = [-1.0, t - 1.0, t - 1.0, -(t - 1.0) * (t - 1.0)];
            let want_s = [t - 1.0, -(t - 1.0) * (t - 1.0), 0.0, 0.0];
            for i in 0..4 {
                e_p2 = e_p2.max((p2[i] - want[i]).abs());
                e_s = e_s.max((s.s(path, k)[i] - want_s[i]).abs());
            }
        }
    }
    ensure(e_p2 < 1e-6, format!("P2 error {e_p2:.2e}"))?;
    ensure(e_s < 1e-6, format!("S error {e_s:.2e}"))?;
    Ok(format!("P2 max error {e_p2:.1e}, S max error {e_s:.1e}"))
}

fn first_order_violation() -> Outcome {
    let ex = fixtures::ex31();
    let (c, o, s) = checks(&ex, "zero", DEFAULT_PATHS, false);
    let ctx = CheckContext::new(&ex.problem, &ex.constraints, &c, o, s).unwrap();
    let r = first_order_integral_check(&ctx, &Directions::Battery).unwrap();
    let tol = 3.0 * r.std_err + 0.01;
    ensure((r.value - 0.25).abs() <= tol, format!("integral value {}", r.value))?;
    ensure(r.verdict == Verdict::Violated, format!("verdict {}", r.verdict))?;
    let label = r.witness.as_ref().and_then(|w| w["label"].as_str()).unwrap_or("");
    ensure(label == "v=(1,0)", format!("witness {label}"))?;
    let pw = first_order_pointwise_check(&ctx).unwrap();
    let series = &pw.details["series"];
    let (t, flagged) = (series["t"].as_array().unwrap(), series["flagged"].as_array().unwrap());
    let early: Vec<bool> = t
        .iter()
        .zip(flagged)
        .filter(|(t, _)| t.as_f64().unwrap() < 0.95)
        .map(|(_, f)| f.as_f64().unwrap() > 0.0)
        .collect();
    let frac = early.iter().filter(|b| **b).count() as f64 / early.len() as f64;
    ensure(frac > 0.95, format!("pointwise flags {frac:.3} of nodes"))?;
    Ok(format!("value {:.4} (tol {tol:.3}), witness {label}, pointwise flags {:.1}% of nodes t<0.95", r.value, 100.0 * frac))
}

fn first_order_pass() -> Outcome {
    let ex = fixtures::ex31();
    let (c, o, s) = checks(&ex, "optimal", DEFAULT_PATHS, false);
    let x0 = &ex.constraints.initial_point;
    let cost = estimate_cost_streaming(&ex.problem, &c, x0, &BrownianBundle::new(DEFAULT_SEED, DEFAULT_PATHS, grid())).unwrap();
    ensure(cost.mean.abs() <= 3.0 * cost.std_err + 0.01, format!("cost {}", cost.mean))?;
    let ctx = CheckContext::new(&ex.problem, &ex.constraints, &c, o, s).unwrap();
    let b = simulate_state(&ex.problem, &c, x0, &ctx.brownian().with_paths(1000)).unwrap();
    let mut p = [0.0; 2];
    let mut worst = 0.0f64;
    for path in 0..b.paths {
        for k in 0..=DEFAULT_STEPS {
            ctx.adjoint().p1(k, b.x(path, k), b.w(path, k), &mut p);
            worst = worst.max(p[0].abs()).max(p[1].abs());
        }
    }
    ensure(worst < 0.02, format!("P1 reaches {worst}"))?;
    let r = first_order_integral_check(&ctx, &Directions::Battery).unwrap();
    ensure(r.verdict == Verdict::Pass, format!("verdict {} value {}", r.verdict, r.value))?;
    Ok(format!("J = {:.2e} (se {:.1e}), sup |P1| = {worst:.1e}, verdict PASS", cost.mean, cost.std_err))
}

fn second_order_violation() -> Outcome {
    let ex = fixtures::ex42();
    let (c, o, s) = checks(&ex, "zero", DEFAULT_PATHS, true);
    let ctx = CheckContext::new(&ex.problem, &ex.constraints, &c, o, s).unwrap();
    let dir = VariationDirection::constant(&[0.0, 1.0], 2).with_h(&[0.5, 0.0]);
    let dirs = Directions::User(vec![dir]);
    ctx.prefetch(&[ConditionId::FirstIntegral, ConditionId::SecondIntegral], &dirs).unwrap();
    let r = second_order_integral_check(&ctx, &dirs).unwrap();
    ensure((r.value - 0.125).abs() <= 0.0125, format!("value {}", r.value))?;
    ensure(r.verdict == Verdict::Violated, format!("verdict {}", r.verdict))?;
    let first = first_order_integral_check(&ctx, &Directions::Battery).unwrap();
    ensure(first.verdict == Verdict::Pass, format!("first-order verdict {}", first.verdict))?;
    Ok(format!("value {:.4} VIOLATED, first order PASS", r.value))
}

fn second_order_non_violation() -> Outcome {
    let ex = fixtures::ex41();
    let (c, o, s) = checks(&ex, "zero", 20_000, true);
    let ctx = CheckContext::new(&ex.problem, &ex.constraints, &c, o, s).unwrap();
    let dirs = Directions::User(vec![VariationDirection::constant(&[0.0, 1.0], 2).with_h(&[0.5, 0.0])]);
    let r = second_order_integral_check(&ctx, &dirs).unwrap();
    let d = &r.directions[0];
    let hu_h = d.components["hu_h"];
    ensure(((2.0 * hu_h) + 1.0).abs() <= 0.05, format!("2 E int <H_u, h> = {}", 2.0 * hu_h))?;
    let (_, convex) = convex_benchmark_check(&ctx, &dirs).unwrap();
    ensure(convex.value.abs() < 1e-12 && convex.verdict == Verdict::Pass, format!("convex value {}", convex.value))?;
    Ok(format!("2 E int <H_u,h> dt = {:.4}, convex benchmark value {} PASS", 2.0 * hu_h, convex.value))
}

fn singular_pointwise() -> Outcome {
    let ex = fixtures::ex43();
    let (c, o, s) = checks(&ex, "optimal", DEFAULT_PATHS, true);
    let ctx = CheckContext::new(&ex.problem, &ex.constraints, &c, o, s).unwrap();
    let st = singularity_test(&ctx).unwrap();
    ensure(st.details["singular"] == true, format!("classification {}", st.details["classification"]))?;
    let r = pointwise_second_order_check(&ctx).unwrap();
    let t = r.details["t"].as_array().unwrap();
    let vals = r.details["values_by_direction"]["(-1,0)"]
        .as_array()
        .ok_or("no values for v=(-1,0)")?;
    let mut worst = 0.0f64;
    for (t, v) in t.iter().zip(vals) {
        let (t, v) = (t.as_f64().unwrap(), v.as_f64().unwrap());
        worst = worst.max((v + (t - 1.0) * (t - 1.0)).abs());
    }
    ensure(worst < 0.02, format!("max deviation {worst}"))?;
    ensure(r.verdict == Verdict::Pass, format!("verdict {}", r.verdict))?;
    Ok(format!("SINGULAR, max |value + (t-1)^2| = {worst:.1e} over {} nodes, PASS", t.len()))
}

fn random_direction(rng: &mut ChaCha8Rng, i: usize) -> VariationDirection {
    let mut g = || rng.sample::<f64, _>(StandardNormal);
    if i % 2 == 0 {
        VariationDirection::constant(&[g(), g()], 2)
    } else {
        let brk: f64 = 0.2 + 0.6 * (g().abs() / 3.0).min(1.0);
        let law = ControlLaw::Step {
            breaks: vec![brk],
            values: vec![vec![g(), g()], vec![g(), g()]],
        };
        VariationDirection::new(law, 2)
    }
}

fn duality() -> Outcome {
    let ex = fixtures::ex31();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst = f64::NEG_INFINITY;
    for cand in ["zero", "optimal"] {
        let c = ex.candidate(cand).unwrap();
        let x0 = &ex.constraints.initial_point;
        let brownian = BrownianBundle::new(DEFAULT_SEED, 10_000, grid());
        let b = simulate_state(&ex.problem, c, x0, &brownian).unwrap();
        let adj = solve_adjoints(&ex.problem, c, x0, &brownian, &AdjointOptions::default(), false).unwrap();
        for i in 0..20 {
            let dir = random_direction(&mut rng, i);
            let y1 = socx::variational::solve_first_variation(&ex.problem, &b, &dir).unwrap();
            let d = duality_check(&ex.problem, &b, &dir, &y1, &adj).unwrap();
            let slack = d.gap.abs() - (3.0 * d.std_err + 0.01);
            ensure(slack <= 0.0, format!("{cand} direction {i}: gap {} se {}", d.gap, d.std_err))?;
            worst = worst.max(slack);
        }
    }
    Ok(format!("40 identities hold, tightest margin {:.2e}", -worst))
}

fn decreasing(t: &DecayTable, col: fn(&socx::variational::DecayRow) -> f64) -> Result<(), String> {
    let mut inversions = 0;
    for w in t.rows.windows(2) {
        let (a, b) = (col(&w[0]), col(&w[1]));
        if b >= a {
            inversions += 1;
            ensure(b - a <= 2.0 * (w[0].std_err + w[1].std_err), format!("inversion {a} -> {b} beyond 2 sigma"))?;
        }
    }
    ensure(inversions <= 1, format!("{inversions} inversions"))
}

fn remainder_decay() -> Outcome {
    let force = ProbeOptions {
        force: true,
        ..ProbeOptions::default()
    };
    let ex = fixtures::ex42();
    let c = ex.candidate("zero").unwrap();
    let v = VariationDirection::constant(&[0.0, 1.0], 2);
    let r1 = remainder_probe_first(&ex.problem, &ex.constraints, c, &v, &force).unwrap();
    let r2 = remainder_probe_second(&ex.problem, &ex.constraints, c, &v.clone().with_h(&[0.5, 0.0]), &force).unwrap();
    for t in [&r1, &r2] {
        decreasing(t, |r| r.norm_beta1)?;
        decreasing(t, |r| r.norm_beta2)?;
    }
    let lin = fixtures::ex31();
    let c = lin.candidate("optimal").unwrap();
    let v = VariationDirection::constant(&[-1.0, 0.0], 2);
    let floor = 5.0 * grid().dt();
    let l1 = remainder_probe_first(&lin.problem, &lin.constraints, c, &v, &ProbeOptions::default()).unwrap();
    let l2 = remainder_probe_second(&lin.problem, &lin.constraints, c, &v, &ProbeOptions::default()).unwrap();
    let lin_max = l1
        .rows
        .iter()
        .chain(&l2.rows)
        .map(|r| r.norm_beta1.max(r.norm_beta2))
        .fold(0.0, f64::max);
    ensure(lin_max < floor, format!("linear remainder {lin_max}"))?;
    Ok(format!(
        "ex42 slopes {:.2}/{:.2}, linear fixture max remainder {lin_max:.1e} < {floor:.3}",
        r1.slope.unwrap_or(f64::NAN),
        r2.slope.unwrap_or(f64::NAN)
    ))
}

fn builtin_sets() -> Vec<(&'static str, ConeDescriptor, Vec<Vec<f64>>)> {
    let s = FRAC_1_SQRT_2;
    let disc = ConeDescriptor::Smooth(SmoothConstraints::new(2, vec![], vec![Constraint::sphere(&[0.0, 0.0], 1.0)], true));
    vec![
        ("box", ConeDescriptor::unit_box(2), vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![1.0, 1.0], vec![-1.0, 0.3]]),
        (
            "ball",
            ConeDescriptor::Ball {
                center: vec![0.0, 0.0],
                radius: 1.0,
            },
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![0.6, -0.8]],
        ),
        ("singleton", ConeDescriptor::Singleton { point: vec![0.5, 0.5] }, vec![vec![0.5, 0.5]]),
        (
            "cross",
            fixtures::cross_set(),
            vec![vec![0.0, 0.0], vec![0.5, 0.0], vec![1.0, 0.0], vec![0.0, -1.0], vec![0.0, 0.3]],
        ),
        (
            "lens",
            fixtures::lens_set(),
            vec![vec![0.0, 0.0], vec![1.0 - s, s], vec![0.15, 0.35], vec![1.0 - 0.8, 0.6]],
        ),
        (
            "two-circles",
            fixtures::two_circles_set(),
            vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![-1.0, 1.0], vec![1.0 + 0.6, -0.8]],
        ),
        (
            "upper-half-disc",
            fixtures::upper_half_disc(),
            vec![vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0], vec![0.0, 0.5], vec![0.6, 0.8]],
        ),
        ("disc", disc, vec![vec![0.6, 0.8], vec![0.0, 0.0]]),
    ]
}

fn rotate(v: &[f64], a: f64) -> Vec<f64> {
    let (s, c) = a.sin_cos();
    vec![c * v[0] - s * v[1], s * v[0] + c * v[1]]
}

/// Definitional membership: `dist(x + eps v + eps^2 h, U) / eps^order` is small.
fn oracle(d: &ConeDescriptor, x: &[f64], v: &[f64], h: Option<&[f64]>) -> bool {
    let (eps, tol): (f64, f64) = if h.is_some() { (1e-3, 1e-2) } else { (1e-4, 1e-2) };
    let y: Vec<f64> = (0..2)
        .map(|i| x[i] + eps * v[i] + h.map_or(0.0, |h| eps * eps * h[i]))
        .collect();
    let scale = if h.is_some() { eps * eps } else { eps };
    distance_oracle(d, &y).distance / scale < tol
}

const BAND: f64 = 0.05;

fn cone_oracles() -> Outcome {
    let mesh = direction_mesh(2, 64);
    let (mut agree, mut total, mut banded) = (0usize, 0usize, 0usize);
    let mut first_bad = None;
    for (name, d, bases) in builtin_sets() {
        for x in &bases {
            let cone = d.adjacent_cone(x).map_err(|e| format!("{name} at {x:?}: {e}"))?;
            for v in &mesh {
                let o = oracle(&d, x, v, None);
                if [BAND, -BAND].iter().any(|a| oracle(&d, x, &rotate(v, *a), None) != o) {
                    banded += 1;
                    continue;
                }
                total += 1;
                if cone.contains(v, 1e-9) == o {
                    agree += 1;
                } else if first_bad.is_none() {
                    first_bad = Some(format!("{name} x={x:?} v={v:?}"));
                }
            }
            let mut vs = cone.sample_directions(64);
            vs.push(vec![0.0, 0.0]);
            for v in &vs {
                let second = d.second_order_adjacent(x, v).map_err(|e| format!("{name} at {x:?} v={v:?}: {e}"))?;
                for r in [0.5, 1.0, 2.0] {
                    for u in &mesh {
                        let h: Vec<f64> = u.iter().map(|c| r * c).collect();
                        let o = oracle(&d, x, v, Some(&h));
                        let moved = [BAND, -BAND]
                            .iter()
                            .map(|a| rotate(&h, *a))
                            .chain([1.0 - BAND, 1.0 + BAND].map(|f| h.iter().map(|c| f * c).collect()))
                            .any(|g| oracle(&d, x, v, Some(&g)) != o);
                        if moved {
                            banded += 1;
                            continue;
                        }
                        total += 1;
                        if second.contains(&h, 1e-9) == o {
                            agree += 1;
                        } else if first_bad.is_none() {
                            first_bad = Some(format!("{name} x={x:?} v={v:?} h={h:?}"));
                        }
                    }
                }
            }
        }
    }
    ensure(agree == total, format!("{agree}/{total} agree; first mismatch {}", first_bad.unwrap_or_default()))?;

    // Axioms on randomized queries.
    let sets = builtin_sets();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for q in 0..1000 {
        let (name, d, bases) = &sets[rng.random_range(0..sets.len())];
        let x = if rng.random::<f64>() < 0.5 {
            bases[rng.random_range(0..bases.len())].clone()
        } else {
            let y: Vec<f64> = (0..2).map(|_| 1.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            distance_oracle(d, &y).nearest
        };
        let cone = d.adjacent_cone(&x).map_err(|e| format!("query {q} {name} at {x:?}: {e}"))?;
        ensure(cone.contains(&[0.0, 0.0], 1e-9), format!("query {q}: 0 not in the cone of {name} at {x:?}"))?;
        let v: Vec<f64> = (0..2).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let lam = 10f64.powf(rng.random_range(-2.0..2.0));
        let scaled: Vec<f64> = v.iter().map(|c| lam * c).collect();
        ensure(
            cone.contains(&v, 1e-9) == cone.contains(&scaled, 1e-9),
            format!("query {q}: scaling by {lam} changes membership of {v:?} ({name} at {x:?})"),
        )?;
        let second = d.second_order_adjacent(&x, &[0.0, 0.0]).map_err(|e| e.to_string())?;
        ensure(
            second.contains(&v, 1e-9) == cone.contains(&v, 1e-9),
            format!("query {q}: second-order set along 0 differs at {v:?} ({name} at {x:?})"),
        )?;
    }
    Ok(format!(
        "{agree}/{total} mesh queries agree ({banded} within {BAND} rad of a boundary skipped); 1000 axiom queries hold"
    ))
}

fn solver_agreement() -> Outcome {
    let mut lines = Vec::new();
    let mut skipped = Vec::new();
    for name in ["ex31", "ex41", "ex42", "ex43", "zero", "gbm", "sphere", "counter"] {
        let ex = fixtures::builtin_example(name).unwrap();
        let second = ex.problem.has_second_order();
        for c in &ex.candidates {
            let x0 = &ex.constraints.initial_point;
            let brownian = BrownianBundle::new(DEFAULT_SEED, 5_000, TimeGrid::new(ex.problem.horizon, DEFAULT_STEPS).unwrap());
            let Ok(ode) = solve_adjoints(&ex.problem, c, x0, &brownian, &opts(AdjointMethod::Ode), second) else {
                skipped.push(format!("{name}/{}", c.name));
                continue;
            };
            let reg = solve_adjoints(&ex.problem, c, x0, &brownian, &opts(AdjointMethod::Regression), second).unwrap();
            let b = simulate_state(&ex.problem, c, x0, &brownian.with_paths(500)).unwrap();
            let (n, m) = (ex.problem.state_dim, reg.meta.clone());
            let mut gap1 = 0.0f64;
            let mut gap2 = 0.0f64;
            let (mut a, mut r) = (vec![0.0; n * n], vec![0.0; n * n]);
            for path in 0..b.paths {
                for k in 0..=DEFAULT_STEPS {
                    let (x, w) = (b.x(path, k), b.w(path, k));
                    for f in [socx::adjoint::AdjointSolution::p1, socx::adjoint::AdjointSolution::q1] {
                        f(&ode, k, x, w, &mut a[..n]);
                        f(&reg, k, x, w, &mut r[..n]);
                        gap1 = (0..n).map(|i| (a[i] - r[i]).abs()).fold(gap1, f64::max);
                    }
                    if second {
                        for f in [socx::adjoint::AdjointSolution::p2, socx::adjoint::AdjointSolution::q2] {
                            f(&ode, k, x, w, &mut a);
                            f(&reg, k, x, w, &mut r);
                            gap2 = (0..n * n).map(|i| (a[i] - r[i]).abs()).fold(gap2, f64::max);
                        }
                    }
                }
            }
            let tol1 = 0.02 + 3.0 * m.regression_sigma_p1.max(m.regression_sigma_q1);
            let tol2 = 0.02 + 3.0 * m.regression_sigma_p2.max(m.regression_sigma_q2);
            ensure(gap1 < tol1, format!("{name}/{}: first adjoint gap {gap1} (tol {tol1})", c.name))?;
            ensure(gap2 < tol2, format!("{name}/{}: second adjoint gap {gap2} (tol {tol2})", c.name))?;
            lines.push(format!("{name}/{} {:.1e}", c.name, gap1.max(gap2)));
        }
    }
    Ok(format!("sup gaps: {}; ode not applicable: {}", lines.join(", "), skipped.join(", ")))
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let report = |sub: &str| {
        let mut c = RunConfig::for_example("ex42");
        c.paths = 20_000;
        c.out = Some(dir.path().join(sub));
        run::run(&c, &mut |_| {}).unwrap();
        std::fs::read(dir.path().join(sub).join("report.json")).unwrap()
    };
    let (a, b) = (report("a"), report("b"));
    ensure(a == b, "report.json differs between runs".into())?;
    Ok(format!("two ex42 order-2 runs give identical report.json ({} bytes)", a.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("adjoint golden values, ex31", adjoint_golden_ex31),
        ("adjoint golden values, ex43", adjoint_golden_ex43),
        ("first-order violation, ex31 zero", first_order_violation),
        ("first-order pass, ex31 optimal", first_order_pass),
        ("second-order violation, ex42", second_order_violation),
        ("second-order non-violation, ex41", second_order_non_violation),
        ("singularity and pointwise second order, ex43", singular_pointwise),
        ("duality identity", duality),
        ("remainder decay", remainder_decay),
        ("cone oracle equivalence", cone_oracles),
        ("regression and ODE agreement", solver_agreement),
        ("determinism", determinism),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = i + 1;
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let out = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match out {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail} [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {why} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
