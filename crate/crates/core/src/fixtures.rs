//! Builtin problems: the worked examples plus a few small fixtures with known
//! closed forms.

use std::f64::consts::FRAC_1_SQRT_2;
use std::sync::Arc;

use crate::cones::{ConeDescriptor, Constraint, SmoothConstraints};
use crate::error::{Error, Result};
use crate::problem::{
    CandidateControl, ClosedForm, ConstraintSpec, ControlProblem, SecondDerivatives, TerminalVecFn, TimeFn, VecFn,
};

/// A problem with its constraints and named candidate controls.
#[derive(Clone, Debug)]
pub struct Example {
    pub problem: ControlProblem,
    pub constraints: ConstraintSpec,
    pub candidates: Vec<CandidateControl>,
    pub summary: &'static str,
}

impl Example {
    pub fn candidate(&self, name: &str) -> Result<&CandidateControl> {
        self.candidates
            .iter()
            .find(|c| c.name == name)
            .ok_or_else(|| Error::UnknownCandidate {
                problem: self.problem.name.clone(),
                candidate: name.to_string(),
            })
    }
}

pub const BUILTIN: &[&str] = &["ex31", "ex41", "ex42", "ex43", "zero", "gbm", "sphere", "counter"];

pub fn builtin_example(name: &str) -> Result<Example> {
    match name {
        "ex31" => Ok(ex31()),
        "ex41" => Ok(ex41()),
        "ex42" => Ok(ex42()),
        "ex43" => Ok(ex43()),
        "zero" => Ok(zero_problem()),
        "gbm" => Ok(gbm(0.1, 0.3)),
        "sphere" => Ok(sphere(&[0.6, 0.8])),
        "counter" => Ok(singular_counterexample()),
        other => Err(Error::UnknownExample(other.to_string())),
    }
}

fn vf<F: Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync + 'static>(f: F) -> VecFn {
    Arc::new(f)
}

fn tf<F: Fn(f64, &mut [f64]) + Send + Sync + 'static>(f: F) -> TimeFn {
    Arc::new(f)
}

fn gf<F: Fn(&[f64], f64, &mut [f64]) + Send + Sync + 'static>(f: F) -> TerminalVecFn {
    Arc::new(f)
}

fn zeros(out: &mut [f64]) {
    out.fill(0.0);
}

/// `{u1 u2 = 0} ∩ [-1,1]^2`.
pub fn cross_set() -> ConeDescriptor {
    ConeDescriptor::Union(vec![
        ConeDescriptor::Box {
            lower: vec![-1.0, 0.0],
            upper: vec![1.0, 0.0],
        },
        ConeDescriptor::Box {
            lower: vec![0.0, -1.0],
            upper: vec![0.0, 1.0],
        },
    ])
}

/// Intersection of unit discs centred at `(1, 0)` and `(-1/sqrt2, 1/sqrt2)`.
pub fn lens_set() -> ConeDescriptor {
    ConeDescriptor::Smooth(SmoothConstraints::new(
        2,
        vec![],
        vec![
            Constraint::sphere(&[1.0, 0.0], 1.0),
            Constraint::sphere(&[-FRAC_1_SQRT_2, FRAC_1_SQRT_2], 1.0),
        ],
        true,
    ))
}

/// Union of the unit circles centred at `(-1, 0)` and `(1, 0)`.
pub fn two_circles_set() -> ConeDescriptor {
    let circle = |c: f64| {
        ConeDescriptor::Smooth(SmoothConstraints::new(
            2,
            vec![Constraint::sphere(&[c, 0.0], 1.0)],
            vec![],
            false,
        ))
    };
    ConeDescriptor::Union(vec![circle(-1.0), circle(1.0)])
}

/// `{x1^2 + x2^2 <= 1, x2 >= 0}`.
pub fn upper_half_disc() -> ConeDescriptor {
    ConeDescriptor::Smooth(SmoothConstraints::new(
        2,
        vec![],
        vec![Constraint::sphere(&[0.0, 0.0], 1.0), Constraint::linear(&[0.0, -1.0], 0.0)],
        true,
    ))
}

/// `dx1 = (x2 - 1/2) dt + dW`, `dx2 = u1 dt + c(u2) dW`, cost `E[int f + |x1(1) - W(1)|^2 / 2]`,
/// where `c` and `f` are either zero-cost linear (`quartic = false`) or `u2^4`.
fn tracking_problem(name: &str, quartic: bool) -> crate::problem::ProblemBuilder {
    let b = ControlProblem::builder(name, 2, 2, 1.0)
        .drift(|_, x, u, out| {
            out[0] = x[1] - 0.5;
            out[1] = u[0];
        })
        .b_x(|_, _, _, out| {
            out.copy_from_slice(&[0.0, 1.0, 0.0, 0.0]);
        })
        .b_u(|_, _, _, out| {
            out.copy_from_slice(&[0.0, 0.0, 1.0, 0.0]);
        })
        .sigma_x(|_, _, _, out| zeros(out))
        .f_x(|_, _, _, out| zeros(out))
        .terminal_cost(|x, w| 0.5 * (x[0] - w) * (x[0] - w))
        .g_x(|x, w, out| {
            out[0] = x[0] - w;
            out[1] = 0.0;
        })
        .terminal_uses_noise(true);
    let g_xx = gf(|_, _, out| out.copy_from_slice(&[1.0, 0.0, 0.0, 0.0]));
    if quartic {
        let mut sec = SecondDerivatives::zero();
        sec.g_xx = g_xx;
        sec.sigma_uu = vf(|_, _, u, out| {
            zeros(out);
            out[4 + 3] = 12.0 * u[1] * u[1];
        });
        sec.f_uu = vf(|_, _, u, out| {
            zeros(out);
            out[3] = 12.0 * u[1] * u[1];
        });
        b.diffusion(|_, _, u, out| {
            out[0] = 1.0;
            out[1] = u[1].powi(4);
        })
        .sigma_u(|_, _, u, out| {
            zeros(out);
            out[3] = 4.0 * u[1].powi(3);
        })
        .running_cost(|_, _, u| u[1].powi(4))
        .f_u(|_, _, u, out| {
            out[0] = 0.0;
            out[1] = 4.0 * u[1].powi(3);
        })
        .second(sec)
    } else {
        let mut sec = SecondDerivatives::zero();
        sec.g_xx = g_xx;
        b.diffusion(|_, _, u, out| {
            out[0] = 1.0;
            out[1] = u[1];
        })
        .sigma_u(|_, _, _, out| out.copy_from_slice(&[0.0, 0.0, 0.0, 1.0]))
        .running_cost(|_, _, _| 0.0)
        .f_u(|_, _, _, out| zeros(out))
        .second(sec)
    }
}

fn ex31_references(b: crate::problem::ProblemBuilder) -> crate::problem::ProblemBuilder {
    b.reference(
        "zero",
        ClosedForm {
            state: Some(Arc::new(|t, w, out| {
                out[0] = w - t / 2.0;
                out[1] = 0.0;
            })),
            p1: Some(tf(|t, out| {
                out[0] = 0.5;
                out[1] = (1.0 - t) / 2.0;
            })),
            q1: Some(tf(|_, out| zeros(out))),
            cost: Some(0.125),
            ..ClosedForm::default()
        },
    )
    .reference(
        "optimal",
        ClosedForm {
            state: Some(Arc::new(|t, w, out| {
                out[0] = t * t / 2.0 - t / 2.0 + w;
                out[1] = t;
            })),
            p1: Some(tf(|_, out| zeros(out))),
            q1: Some(tf(|_, out| zeros(out))),
            p2: Some(tf(|t, out| {
                out.copy_from_slice(&[-1.0, t - 1.0, t - 1.0, -(t - 1.0) * (t - 1.0)]);
            })),
            s: Some(tf(|t, out| {
                out.copy_from_slice(&[t - 1.0, -(t - 1.0) * (t - 1.0), 0.0, 0.0]);
            })),
            cost: Some(0.0),
        },
    )
}

/// Cross-shaped control set; `u = 0` is not optimal, `u = (1, 0)` is.
pub fn ex31() -> Example {
    let problem = ex31_references(tracking_problem("ex31", false))
        .build()
        .expect("fixture is complete");
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(cross_set(), vec![0.0, 0.0]),
        candidates: vec![
            CandidateControl::constant("zero", &[0.0, 0.0]),
            CandidateControl::constant("optimal", &[1.0, 0.0]),
        ],
        summary: "cross-shaped control set, linear dynamics, tracking cost",
    }
}

/// The `ex31` problem examined at its optimum, which is partially singular.
pub fn ex43() -> Example {
    let problem = ex31_references(tracking_problem("ex43", false))
        .build()
        .expect("fixture is complete");
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(cross_set(), vec![0.0, 0.0]),
        candidates: vec![
            CandidateControl::constant("optimal", &[1.0, 0.0]),
            CandidateControl::constant("zero", &[0.0, 0.0]),
        ],
        summary: "partially singular optimum of the cross-set problem",
    }
}

/// Two tangent circles; the first-order condition holds trivially at `u = 0`
/// but a second-order variation shows it is not optimal.
pub fn ex42() -> Example {
    let problem = tracking_problem("ex42", true)
        .reference(
            "zero",
            ClosedForm {
                state: Some(Arc::new(|t, w, out| {
                    out[0] = w - t / 2.0;
                    out[1] = 0.0;
                })),
                p1: Some(tf(|t, out| {
                    out[0] = 0.5;
                    out[1] = (1.0 - t) / 2.0;
                })),
                q1: Some(tf(|_, out| zeros(out))),
                cost: Some(0.125),
                ..ClosedForm::default()
            },
        )
        .build()
        .expect("fixture is complete");
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(two_circles_set(), vec![0.0, 0.0]),
        candidates: vec![CandidateControl::constant("zero", &[0.0, 0.0])],
        summary: "union of two circles, quartic control in the diffusion",
    }
}

/// `ex41` with `A = 0` and `F = 0`.
pub fn ex41() -> Example {
    ex41_with([[0.0, 0.0], [0.0, 0.0]], false)
}

fn bump(y: f64) -> (f64, f64, f64) {
    // y^4 (1 + y^2)^(-3/2): nonnegative, flat to second order at 0, bounded derivatives.
    let s = 1.0 + y * y;
    (
        y.powi(4) * s.powf(-1.5),
        y.powi(3) * (4.0 + y * y) * s.powf(-2.5),
        (12.0 * y * y - 3.0 * y.powi(4)) * s.powf(-3.5),
    )
}

/// Lens-shaped convex control set, `dx = (F(x) + u) dt + A u dW`, cost
/// `E[x1(1) - cos(x2(1)^2)]`. With `nonlinear`, `F = (x2^4 (1 + x2^2)^(-3/2), 0)`.
pub fn ex41_with(a: [[f64; 2]; 2], nonlinear: bool) -> Example {
    let av = [a[0][0], a[0][1], a[1][0], a[1][1]];
    let nl = if nonlinear { 1.0 } else { 0.0 };
    let mut sec = SecondDerivatives::zero();
    sec.b_xx = vf(move |_, x, _, out| {
        zeros(out);
        out[3] = nl * bump(x[1]).2;
    });
    sec.g_xx = gf(|x, _, out| {
        let y = x[1];
        zeros(out);
        out[3] = 2.0 * (y * y).sin() + 4.0 * y * y * (y * y).cos();
    });
    let problem = ControlProblem::builder("ex41", 2, 2, 1.0)
        .drift(move |_, x, u, out| {
            out[0] = nl * bump(x[1]).0 + u[0];
            out[1] = u[1];
        })
        .diffusion(move |_, _, u, out| {
            out[0] = av[0] * u[0] + av[1] * u[1];
            out[1] = av[2] * u[0] + av[3] * u[1];
        })
        .running_cost(|_, _, _| 0.0)
        .terminal_cost(|x, _| x[0] - (x[1] * x[1]).cos())
        .b_x(move |_, x, _, out| {
            out.copy_from_slice(&[0.0, nl * bump(x[1]).1, 0.0, 0.0]);
        })
        .b_u(|_, _, _, out| out.copy_from_slice(&[1.0, 0.0, 0.0, 1.0]))
        .sigma_x(|_, _, _, out| zeros(out))
        .sigma_u(move |_, _, _, out| out.copy_from_slice(&av))
        .f_x(|_, _, _, out| zeros(out))
        .f_u(|_, _, _, out| zeros(out))
        .g_x(|x, _, out| {
            out[0] = 1.0;
            out[1] = 2.0 * x[1] * (x[1] * x[1]).sin();
        })
        .second(sec)
        .reference(
            "zero",
            ClosedForm {
                state: Some(Arc::new(|_, _, out| zeros(out))),
                p1: Some(tf(|_, out| {
                    out[0] = -1.0;
                    out[1] = 0.0;
                })),
                q1: Some(tf(|_, out| zeros(out))),
                p2: Some(tf(|_, out| zeros(out))),
                s: Some(tf(|_, out| zeros(out))),
                cost: Some(-1.0),
            },
        )
        .build()
        .expect("fixture is complete");
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(lens_set(), vec![0.0, 0.0]),
        candidates: vec![CandidateControl::constant("zero", &[0.0, 0.0])],
        summary: "lens-shaped convex control set where the convex second-order test is silent",
    }
}

/// Every coefficient and cost is zero.
pub fn zero_problem() -> Example {
    let problem = ControlProblem::builder("zero", 2, 2, 1.0)
        .drift(|_, _, _, out| zeros(out))
        .diffusion(|_, _, _, out| zeros(out))
        .running_cost(|_, _, _| 0.0)
        .terminal_cost(|_, _| 0.0)
        .b_x(|_, _, _, out| zeros(out))
        .b_u(|_, _, _, out| zeros(out))
        .sigma_x(|_, _, _, out| zeros(out))
        .sigma_u(|_, _, _, out| zeros(out))
        .f_x(|_, _, _, out| zeros(out))
        .f_u(|_, _, _, out| zeros(out))
        .g_x(|_, _, out| zeros(out))
        .second(SecondDerivatives::zero())
        .build()
        .expect("fixture is complete");
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(ConeDescriptor::unit_box(2), vec![0.0, 0.0]),
        candidates: vec![CandidateControl::constant("zero", &[0.0, 0.0])],
        summary: "all coefficients zero",
    }
}

/// `dx = (a x + u) dt + s x dW`, `x0 = 1`, cost `E[x(T)^2] / 2`. The first adjoint
/// is `P1 = -exp((2a + s^2)(T - t)) x(t)`, so it needs the regression tier.
pub fn gbm(a: f64, s: f64) -> Example {
    let k = 2.0 * a + s * s;
    let mut sec = SecondDerivatives::zero();
    sec.g_xx = gf(|_, _, out| out[0] = 1.0);
    let problem = ControlProblem::builder("gbm", 1, 1, 1.0)
        .drift(move |_, x, u, out| out[0] = a * x[0] + u[0])
        .diffusion(move |_, x, _, out| out[0] = s * x[0])
        .running_cost(|_, _, _| 0.0)
        .terminal_cost(|x, _| 0.5 * x[0] * x[0])
        .b_x(move |_, _, _, out| out[0] = a)
        .b_u(|_, _, _, out| out[0] = 1.0)
        .sigma_x(move |_, _, _, out| out[0] = s)
        .sigma_u(|_, _, _, out| out[0] = 0.0)
        .f_x(|_, _, _, out| out[0] = 0.0)
        .f_u(|_, _, _, out| out[0] = 0.0)
        .g_x(|x, _, out| out[0] = x[0])
        .second(sec)
        .reference(
            "zero",
            ClosedForm {
                p2: Some(tf(move |t, out| out[0] = -(k * (1.0 - t)).exp())),
                ..ClosedForm::default()
            },
        )
        .build()
        .expect("fixture is complete");
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(ConeDescriptor::unit_box(1), vec![1.0]),
        candidates: vec![CandidateControl::constant("zero", &[0.0])],
        summary: "geometric Brownian motion with quadratic terminal cost",
    }
}

/// `P1(t)` for [`gbm`] along a state value `x(t)`.
pub fn gbm_p1(a: f64, s: f64, t: f64, x: f64) -> f64 {
    -((2.0 * a + s * s) * (1.0 - t)).exp() * x
}

/// Static problem on the unit disc: minimize `-<a, u>` over `|u| <= 1`. The
/// optimum `a / |a|` carries multiplier `|a| / 2` on `|u|^2 - 1 <= 0`.
pub fn sphere(a: &[f64]) -> Example {
    let a = a.to_vec();
    let (a1, a2) = (a.clone(), a.clone());
    let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
    let problem = ControlProblem::builder("sphere", 1, 2, 1.0)
        .drift(|_, _, _, out| zeros(out))
        .diffusion(|_, _, _, out| zeros(out))
        .running_cost(move |_, _, u| -(a1[0] * u[0] + a1[1] * u[1]))
        .terminal_cost(|_, _| 0.0)
        .b_x(|_, _, _, out| zeros(out))
        .b_u(|_, _, _, out| zeros(out))
        .sigma_x(|_, _, _, out| zeros(out))
        .sigma_u(|_, _, _, out| zeros(out))
        .f_x(|_, _, _, out| zeros(out))
        .f_u(move |_, _, _, out| {
            out[0] = -a2[0];
            out[1] = -a2[1];
        })
        .g_x(|_, _, out| zeros(out))
        .second(SecondDerivatives::zero())
        .build()
        .expect("fixture is complete");
    let disc = ConeDescriptor::Smooth(SmoothConstraints::new(
        2,
        vec![],
        vec![Constraint::sphere(&[0.0, 0.0], 1.0)],
        true,
    ));
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(disc, vec![0.0]),
        candidates: vec![CandidateControl::constant("optimal", &[a[0] / na, a[1] / na])],
        summary: "linear cost on the unit disc",
    }
}

/// `dx = u dt`, cost `-int x u dt`, free control, `u = 0`: singular with
/// `S b_u = 1`, so the pointwise second-order condition fails.
pub fn singular_counterexample() -> Example {
    let mut sec = SecondDerivatives::zero();
    sec.f_xu = vf(|_, _, _, out| out[0] = -1.0);
    let problem = ControlProblem::builder("counter", 1, 1, 1.0)
        .drift(|_, _, u, out| out[0] = u[0])
        .diffusion(|_, _, _, out| out[0] = 0.0)
        .running_cost(|_, x, u| -x[0] * u[0])
        .terminal_cost(|_, _| 0.0)
        .b_x(|_, _, _, out| out[0] = 0.0)
        .b_u(|_, _, _, out| out[0] = 1.0)
        .sigma_x(|_, _, _, out| out[0] = 0.0)
        .sigma_u(|_, _, _, out| out[0] = 0.0)
        .f_x(|_, _, u, out| out[0] = -u[0])
        .f_u(|_, x, _, out| out[0] = -x[0])
        .g_x(|_, _, out| out[0] = 0.0)
        .second(sec)
        .build()
        .expect("fixture is complete");
    Example {
        problem,
        constraints: ConstraintSpec::fixed_start(ConeDescriptor::free(1), vec![0.0]),
        candidates: vec![CandidateControl::constant("zero", &[0.0])],
        summary: "singular control violating the pointwise second-order condition",
    }
}
