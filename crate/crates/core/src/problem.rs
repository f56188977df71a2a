//! Problem data: coefficients, derivatives, constraint sets and candidate controls.

use std::collections::BTreeMap;
use std::fmt;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::cones::ConeDescriptor;
use crate::error::{Error, Result};

/// `(t, x, u, out)`: vector- or matrix-valued coefficient written into `out`.
pub type VecFn = Arc<dyn Fn(f64, &[f64], &[f64], &mut [f64]) + Send + Sync>;
/// `(t, x, u) -> value`.
pub type ScalarFn = Arc<dyn Fn(f64, &[f64], &[f64]) -> f64 + Send + Sync>;
/// `(x_T, W_T) -> value`. The Brownian value is only read when the problem
/// declares a noise-tracking terminal cost.
pub type TerminalFn = Arc<dyn Fn(&[f64], f64) -> f64 + Send + Sync>;
/// `(x_T, W_T, out)`.
pub type TerminalVecFn = Arc<dyn Fn(&[f64], f64, &mut [f64]) + Send + Sync>;
/// `(t, out)`: deterministic function of time.
pub type TimeFn = Arc<dyn Fn(f64, &mut [f64]) + Send + Sync>;
/// `(t, x, out)`: feedback law.
pub type FeedbackFn = Arc<dyn Fn(f64, &[f64], &mut [f64]) + Send + Sync>;

/// Second derivatives. Tensor layouts are row-major with the output component first:
/// `b_xx[i*n*n + j*n + k]`, `b_xu[i*n*m + j*m + l]`, `b_uu[i*m*m + l*m + r]`.
#[derive(Clone)]
pub struct SecondDerivatives {
    pub b_xx: VecFn,
    pub b_xu: VecFn,
    pub b_uu: VecFn,
    pub sigma_xx: VecFn,
    pub sigma_xu: VecFn,
    pub sigma_uu: VecFn,
    pub f_xx: VecFn,
    pub f_xu: VecFn,
    pub f_uu: VecFn,
    pub g_xx: TerminalVecFn,
}

impl SecondDerivatives {
    /// All second derivatives identically zero.
    pub fn zero() -> Self {
        let z: VecFn = Arc::new(|_, _, _, out: &mut [f64]| out.fill(0.0));
        SecondDerivatives {
            b_xx: z.clone(),
            b_xu: z.clone(),
            b_uu: z.clone(),
            sigma_xx: z.clone(),
            sigma_xu: z.clone(),
            sigma_uu: z.clone(),
            f_xx: z.clone(),
            f_xu: z.clone(),
            f_uu: z,
            g_xx: Arc::new(|_, _, out: &mut [f64]| out.fill(0.0)),
        }
    }
}

/// Closed-form reference data registered with a fixture.
#[derive(Clone, Default)]
pub struct ClosedForm {
    /// `(t, W(t), out)` state along the candidate.
    pub state: Option<Arc<dyn Fn(f64, f64, &mut [f64]) + Send + Sync>>,
    pub p1: Option<TimeFn>,
    pub q1: Option<TimeFn>,
    /// Row-major `n x n`.
    pub p2: Option<TimeFn>,
    /// Row-major `m x n`.
    pub s: Option<TimeFn>,
    pub cost: Option<f64>,
}

/// A controlled SDE `dx = b dt + sigma dW` driven by a scalar Brownian motion, with
/// cost `E[int f dt + g(x_T)]`.
#[derive(Clone)]
pub struct ControlProblem {
    pub name: String,
    pub state_dim: usize,
    pub control_dim: usize,
    pub horizon: f64,
    pub drift: VecFn,
    pub diffusion: VecFn,
    pub running_cost: ScalarFn,
    pub terminal_cost: TerminalFn,
    pub b_x: VecFn,
    pub b_u: VecFn,
    pub sigma_x: VecFn,
    pub sigma_u: VecFn,
    pub f_x: VecFn,
    pub f_u: VecFn,
    pub g_x: TerminalVecFn,
    pub second: Option<SecondDerivatives>,
    pub terminal_uses_noise: bool,
    /// Malliavin derivative of `S` as a deterministic function of time (`m x n`).
    pub grad_s: Option<TimeFn>,
    pub references: BTreeMap<String, ClosedForm>,
}

impl fmt::Debug for ControlProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlProblem")
            .field("name", &self.name)
            .field("state_dim", &self.state_dim)
            .field("control_dim", &self.control_dim)
            .field("horizon", &self.horizon)
            .field("second", &self.second.is_some())
            .finish()
    }
}

impl ControlProblem {
    pub fn builder(name: &str, state_dim: usize, control_dim: usize, horizon: f64) -> ProblemBuilder {
        ProblemBuilder {
            name: name.to_string(),
            n: state_dim,
            m: control_dim,
            horizon,
            drift: None,
            diffusion: None,
            running_cost: None,
            terminal_cost: None,
            b_x: None,
            b_u: None,
            sigma_x: None,
            sigma_u: None,
            f_x: None,
            f_u: None,
            g_x: None,
            second: None,
            terminal_uses_noise: false,
            grad_s: None,
            references: BTreeMap::new(),
        }
    }

    pub fn has_second_order(&self) -> bool {
        self.second.is_some()
    }

    pub fn second(&self) -> Result<&SecondDerivatives> {
        self.second.as_ref().ok_or(Error::MissingSecondDerivatives)
    }

    pub fn reference(&self, candidate: &str) -> Option<&ClosedForm> {
        self.references.get(candidate)
    }
}

pub struct ProblemBuilder {
    name: String,
    n: usize,
    m: usize,
    horizon: f64,
    drift: Option<VecFn>,
    diffusion: Option<VecFn>,
    running_cost: Option<ScalarFn>,
    terminal_cost: Option<TerminalFn>,
    b_x: Option<VecFn>,
    b_u: Option<VecFn>,
    sigma_x: Option<VecFn>,
    sigma_u: Option<VecFn>,
    f_x: Option<VecFn>,
    f_u: Option<VecFn>,
    g_x: Option<TerminalVecFn>,
    second: Option<SecondDerivatives>,
    terminal_uses_noise: bool,
    grad_s: Option<TimeFn>,
    references: BTreeMap<String, ClosedForm>,
}

macro_rules! setter {
    ($name:ident, $ty:ty, $($bound:tt)+) => {
        pub fn $name<F>(mut self, f: F) -> Self
        where
            F: $($bound)+ + Send + Sync + 'static,
        {
            self.$name = Some(Arc::new(f) as $ty);
            self
        }
    };
}

impl ProblemBuilder {
    setter!(drift, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(diffusion, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(running_cost, ScalarFn, Fn(f64, &[f64], &[f64]) -> f64);
    setter!(terminal_cost, TerminalFn, Fn(&[f64], f64) -> f64);
    setter!(b_x, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(b_u, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(sigma_x, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(sigma_u, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(f_x, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(f_u, VecFn, Fn(f64, &[f64], &[f64], &mut [f64]));
    setter!(g_x, TerminalVecFn, Fn(&[f64], f64, &mut [f64]));
    setter!(grad_s, TimeFn, Fn(f64, &mut [f64]));

    pub fn second(mut self, second: SecondDerivatives) -> Self {
        self.second = Some(second);
        self
    }

    /// The terminal cost reads `W(T)`; regression features then include the Brownian value.
    pub fn terminal_uses_noise(mut self, yes: bool) -> Self {
        self.terminal_uses_noise = yes;
        self
    }

    pub fn reference(mut self, candidate: &str, cf: ClosedForm) -> Self {
        self.references.insert(candidate.to_string(), cf);
        self
    }

    pub fn build(self) -> Result<ControlProblem> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Invalid("state and control dimensions must be positive".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        macro_rules! req {
            ($f:ident) => {
                self.$f
                    .ok_or_else(|| Error::Invalid(format!("missing callback `{}`", stringify!($f))))?
            };
        }
        Ok(ControlProblem {
            name: self.name,
            state_dim: self.n,
            control_dim: self.m,
            horizon: self.horizon,
            drift: req!(drift),
            diffusion: req!(diffusion),
            running_cost: req!(running_cost),
            terminal_cost: req!(terminal_cost),
            b_x: req!(b_x),
            b_u: req!(b_u),
            sigma_x: req!(sigma_x),
            sigma_u: req!(sigma_u),
            f_x: req!(f_x),
            f_u: req!(f_u),
            g_x: req!(g_x),
            second: self.second,
            terminal_uses_noise: self.terminal_uses_noise,
            grad_s: self.grad_s,
            references: self.references,
        })
    }
}

/// Time dependence of a control or a variation direction.
#[derive(Clone)]
pub enum ControlLaw {
    Constant(Vec<f64>),
    /// Piecewise constant: `values[i]` on `[breaks[i-1], breaks[i])`, so
    /// `values.len() == breaks.len() + 1`.
    Step { breaks: Vec<f64>, values: Vec<Vec<f64>> },
    TimeFn(TimeFn),
    Feedback(FeedbackFn),
}

impl fmt::Debug for ControlLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ControlLaw::Constant(v) => write!(f, "Constant({v:?})"),
            ControlLaw::Step { breaks, values } => write!(f, "Step({breaks:?}, {values:?})"),
            ControlLaw::TimeFn(_) => write!(f, "TimeFn"),
            ControlLaw::Feedback(_) => write!(f, "Feedback"),
        }
    }
}

impl ControlLaw {
    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        match self {
            ControlLaw::Constant(v) => out.copy_from_slice(v),
            ControlLaw::Step { breaks, values } => {
                let i = breaks.iter().take_while(|b| t >= **b).count();
                out.copy_from_slice(&values[i]);
            }
            ControlLaw::TimeFn(f) => f(t, out),
            ControlLaw::Feedback(f) => f(t, x, out),
        }
    }

    /// Independent of the state path.
    pub fn is_deterministic(&self) -> bool {
        !matches!(self, ControlLaw::Feedback(_))
    }

    pub fn is_step(&self) -> bool {
        matches!(self, ControlLaw::Constant(_) | ControlLaw::Step { .. })
    }

    pub fn dim(&self) -> Option<usize> {
        match self {
            ControlLaw::Constant(v) => Some(v.len()),
            ControlLaw::Step { values, .. } => values.first().map(|v| v.len()),
            _ => None,
        }
    }

    pub fn describe(&self) -> serde_json::Value {
        match self {
            ControlLaw::Constant(v) => serde_json::json!({ "constant": v }),
            ControlLaw::Step { breaks, values } => {
                serde_json::json!({ "step": { "breaks": breaks, "values": values } })
            }
            ControlLaw::TimeFn(_) => serde_json::json!("time-function"),
            ControlLaw::Feedback(_) => serde_json::json!("feedback"),
        }
    }

    pub fn is_zero(&self) -> bool {
        match self {
            ControlLaw::Constant(v) => v.iter().all(|x| *x == 0.0),
            ControlLaw::Step { values, .. } => values.iter().all(|v| v.iter().all(|x| *x == 0.0)),
            _ => false,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CandidateControl {
    pub name: String,
    pub law: ControlLaw,
}

impl CandidateControl {
    pub fn constant(name: &str, u: &[f64]) -> Self {
        CandidateControl {
            name: name.to_string(),
            law: ControlLaw::Constant(u.to_vec()),
        }
    }

    pub fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) {
        self.law.eval(t, x, out)
    }
}

/// Control set `U`, initial set `K` and initial point `x0`.
#[derive(Clone, Debug)]
pub struct ConstraintSpec {
    pub control_set: ConeDescriptor,
    pub initial_set: ConeDescriptor,
    pub initial_point: Vec<f64>,
}

pub const MEMBERSHIP_TOL: f64 = 1e-9;

impl ConstraintSpec {
    pub fn new(control_set: ConeDescriptor, initial_set: ConeDescriptor, initial_point: Vec<f64>) -> Result<Self> {
        let d = initial_set.distance(&initial_point);
        if d.distance > MEMBERSHIP_TOL {
            return Err(Error::NotMember { distance: d.distance });
        }
        Ok(ConstraintSpec {
            control_set,
            initial_set,
            initial_point,
        })
    }

    /// Fixed initial state: `K = {x0}`.
    pub fn fixed_start(control_set: ConeDescriptor, x0: Vec<f64>) -> Self {
        ConstraintSpec {
            control_set,
            initial_set: ConeDescriptor::Singleton { point: x0.clone() },
            initial_point: x0,
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DerivativeCheck {
    pub callback: String,
    pub max_abs_error: f64,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct ValidationReport {
    pub problem: String,
    pub samples: usize,
    pub tolerance: f64,
    pub checks: Vec<DerivativeCheck>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, name: &str) -> Option<&DerivativeCheck> {
        self.checks.iter().find(|c| c.callback == name)
    }
}

#[derive(Clone, Debug)]
pub struct ValidationOptions {
    pub samples: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub seed: u64,
    /// Half-width of the state sampling box.
    pub state_radius: f64,
}

impl Default for ValidationOptions {
    fn default() -> Self {
        ValidationOptions {
            samples: 100,
            step: 1e-5,
            rel_tol: 1e-4,
            seed: 7,
            state_radius: 2.0,
        }
    }
}

const SENTINEL: f64 = f64::NAN;

fn panic_message(e: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = e.downcast_ref::<&str>() {
        s.to_string()
    } else if let Some(s) = e.downcast_ref::<String>() {
        s.clone()
    } else {
        "unknown panic".to_string()
    }
}

/// Runs a callback into a buffer of the declared length, mapping panics and
/// under-filled outputs to errors.
fn guarded(name: &str, len: usize, f: impl FnOnce(&mut [f64])) -> Result<Vec<f64>> {
    let mut out = vec![SENTINEL; len];
    let res = catch_unwind(AssertUnwindSafe(|| f(&mut out)));
    if let Err(e) = res {
        let msg = panic_message(e);
        if msg.contains("index out of bounds") || msg.contains("length") || msg.contains("range end index") {
            return Err(Error::DimensionMismatch {
                callback: name.to_string(),
                detail: msg,
            });
        }
        return Err(Error::CallbackPanic {
            callback: name.to_string(),
            message: msg,
        });
    }
    if out.iter().any(|v| v.is_nan()) {
        return Err(Error::DimensionMismatch {
            callback: name.to_string(),
            detail: format!("expected {len} finite outputs"),
        });
    }
    Ok(out)
}

fn guarded_scalar(name: &str, f: impl FnOnce() -> f64) -> Result<f64> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(v) => Ok(v),
        Err(e) => Err(Error::CallbackPanic {
            callback: name.to_string(),
            message: panic_message(e),
        }),
    }
}

struct Accum {
    name: String,
    abs: f64,
    rel: f64,
}

impl Accum {
    fn new(name: &str) -> Self {
        Accum {
            name: name.to_string(),
            abs: 0.0,
            rel: 0.0,
        }
    }

    fn push(&mut self, supplied: f64, fd: f64) {
        let e = (supplied - fd).abs();
        self.abs = self.abs.max(e);
        self.rel = self.rel.max(e / (1.0 + fd.abs()));
    }
}

/// Compares every derivative callback with central finite differences at seeded
/// sample points in `[-r, r]^n` times the bounding box of `U`.
pub fn validate_problem(p: &ControlProblem, s: &ConstraintSpec) -> Result<ValidationReport> {
    validate_problem_with(p, s, &ValidationOptions::default())
}

pub fn validate_problem_with(
    p: &ControlProblem,
    s: &ConstraintSpec,
    opts: &ValidationOptions,
) -> Result<ValidationReport> {
    let (n, m) = (p.state_dim, p.control_dim);
    let (ulo, uhi) = s.control_set.bounding_box(m);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let h = opts.step;

    // Probe evaluation for dimensions.
    let x0 = vec![0.1; n];
    let u0: Vec<f64> = (0..m).map(|l| 0.5 * (ulo[l] + uhi[l])).collect();
    guarded("drift", n, |o| (p.drift)(0.0, &x0, &u0, o))?;
    guarded("diffusion", n, |o| (p.diffusion)(0.0, &x0, &u0, o))?;
    guarded_scalar("running_cost", || (p.running_cost)(0.0, &x0, &u0))?;
    guarded_scalar("terminal_cost", || (p.terminal_cost)(&x0, 0.0))?;

    let names = ["b_x", "b_u", "sigma_x", "sigma_u", "f_x", "f_u", "g_x"];
    let mut acc: Vec<Accum> = names.iter().map(|s| Accum::new(s)).collect();
    let second_names = [
        "b_xx", "b_xu", "b_uu", "sigma_xx", "sigma_xu", "sigma_uu", "f_xx", "f_xu", "f_uu", "g_xx",
    ];
    let mut acc2: Vec<Accum> = second_names.iter().map(|s| Accum::new(s)).collect();

    for _ in 0..opts.samples {
        let t = rng.random::<f64>() * p.horizon;
        let x: Vec<f64> = (0..n)
            .map(|_| (2.0 * rng.random::<f64>() - 1.0) * opts.state_radius)
            .collect();
        let u: Vec<f64> = (0..m)
            .map(|l| ulo[l] + rng.random::<f64>() * (uhi[l] - ulo[l]))
            .collect();
        let w = 2.0 * rng.random::<f64>() - 1.0;

        let bx = guarded("b_x", n * n, |o| (p.b_x)(t, &x, &u, o))?;
        let bu = guarded("b_u", n * m, |o| (p.b_u)(t, &x, &u, o))?;
        let sx = guarded("sigma_x", n * n, |o| (p.sigma_x)(t, &x, &u, o))?;
        let su = guarded("sigma_u", n * m, |o| (p.sigma_u)(t, &x, &u, o))?;
        let fx = guarded("f_x", n, |o| (p.f_x)(t, &x, &u, o))?;
        let fu = guarded("f_u", m, |o| (p.f_u)(t, &x, &u, o))?;
        let gx = guarded("g_x", n, |o| (p.g_x)(&x, w, o))?;

        let vec_at = |f: &VecFn, xx: &[f64], uu: &[f64]| {
            let mut o = vec![0.0; n];
            f(t, xx, uu, &mut o);
            o
        };
        for j in 0..n {
            let (mut xp, mut xm) = (x.clone(), x.clone());
            xp[j] += h;
            xm[j] -= h;
            let (bp, bm) = (vec_at(&p.drift, &xp, &u), vec_at(&p.drift, &xm, &u));
            let (sp, sm) = (vec_at(&p.diffusion, &xp, &u), vec_at(&p.diffusion, &xm, &u));
            for i in 0..n {
                acc[0].push(bx[i * n + j], (bp[i] - bm[i]) / (2.0 * h));
                acc[2].push(sx[i * n + j], (sp[i] - sm[i]) / (2.0 * h));
            }
            let fd = ((p.running_cost)(t, &xp, &u) - (p.running_cost)(t, &xm, &u)) / (2.0 * h);
            acc[4].push(fx[j], fd);
            let gd = ((p.terminal_cost)(&xp, w) - (p.terminal_cost)(&xm, w)) / (2.0 * h);
            acc[6].push(gx[j], gd);
        }
        for l in 0..m {
            let (mut up, mut um) = (u.clone(), u.clone());
            up[l] += h;
            um[l] -= h;
            let (bp, bm) = (vec_at(&p.drift, &x, &up), vec_at(&p.drift, &x, &um));
            let (sp, sm) = (vec_at(&p.diffusion, &x, &up), vec_at(&p.diffusion, &x, &um));
            for i in 0..n {
                acc[1].push(bu[i * m + l], (bp[i] - bm[i]) / (2.0 * h));
                acc[3].push(su[i * m + l], (sp[i] - sm[i]) / (2.0 * h));
            }
            let fd = ((p.running_cost)(t, &x, &up) - (p.running_cost)(t, &x, &um)) / (2.0 * h);
            acc[5].push(fu[l], fd);
        }

        if let Some(sd) = &p.second {
            let bxx = guarded("b_xx", n * n * n, |o| (sd.b_xx)(t, &x, &u, o))?;
            let bxu = guarded("b_xu", n * n * m, |o| (sd.b_xu)(t, &x, &u, o))?;
            let buu = guarded("b_uu", n * m * m, |o| (sd.b_uu)(t, &x, &u, o))?;
            let sxx = guarded("sigma_xx", n * n * n, |o| (sd.sigma_xx)(t, &x, &u, o))?;
            let sxu = guarded("sigma_xu", n * n * m, |o| (sd.sigma_xu)(t, &x, &u, o))?;
            let suu = guarded("sigma_uu", n * m * m, |o| (sd.sigma_uu)(t, &x, &u, o))?;
            let fxx = guarded("f_xx", n * n, |o| (sd.f_xx)(t, &x, &u, o))?;
            let fxu = guarded("f_xu", n * m, |o| (sd.f_xu)(t, &x, &u, o))?;
            let fuu = guarded("f_uu", m * m, |o| (sd.f_uu)(t, &x, &u, o))?;
            let gxx = guarded("g_xx", n * n, |o| (sd.g_xx)(&x, w, o))?;
            let mat_at = |f: &VecFn, xx: &[f64], uu: &[f64], len: usize| {
                let mut o = vec![0.0; len];
                f(t, xx, uu, &mut o);
                o
            };
            for k in 0..n {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[k] += h;
                xm[k] -= h;
                let (bp, bm) = (mat_at(&p.b_x, &xp, &u, n * n), mat_at(&p.b_x, &xm, &u, n * n));
                let (sp, sm) = (
                    mat_at(&p.sigma_x, &xp, &u, n * n),
                    mat_at(&p.sigma_x, &xm, &u, n * n),
                );
                for i in 0..n {
                    for j in 0..n {
                        acc2[0].push(bxx[i * n * n + j * n + k], (bp[i * n + j] - bm[i * n + j]) / (2.0 * h));
                        acc2[3].push(sxx[i * n * n + j * n + k], (sp[i * n + j] - sm[i * n + j]) / (2.0 * h));
                    }
                }
                let (fp, fm) = (mat_at(&p.f_x, &xp, &u, n), mat_at(&p.f_x, &xm, &u, n));
                let (fup, fum) = (mat_at(&p.f_u, &xp, &u, m), mat_at(&p.f_u, &xm, &u, m));
                let (bup, bum) = (mat_at(&p.b_u, &xp, &u, n * m), mat_at(&p.b_u, &xm, &u, n * m));
                let (sup, sum) = (
                    mat_at(&p.sigma_u, &xp, &u, n * m),
                    mat_at(&p.sigma_u, &xm, &u, n * m),
                );
                for j in 0..n {
                    acc2[6].push(fxx[j * n + k], (fp[j] - fm[j]) / (2.0 * h));
                }
                for l in 0..m {
                    acc2[7].push(fxu[k * m + l], (fup[l] - fum[l]) / (2.0 * h));
                    for i in 0..n {
                        acc2[1].push(bxu[i * n * m + k * m + l], (bup[i * m + l] - bum[i * m + l]) / (2.0 * h));
                        acc2[4].push(sxu[i * n * m + k * m + l], (sup[i * m + l] - sum[i * m + l]) / (2.0 * h));
                    }
                }
                let mut gp = vec![0.0; n];
                let mut gm = vec![0.0; n];
                (p.g_x)(&xp, w, &mut gp);
                (p.g_x)(&xm, w, &mut gm);
                for j in 0..n {
                    acc2[9].push(gxx[j * n + k], (gp[j] - gm[j]) / (2.0 * h));
                }
            }
            for r in 0..m {
                let (mut up, mut um) = (u.clone(), u.clone());
                up[r] += h;
                um[r] -= h;
                let (bp, bm) = (mat_at(&p.b_u, &x, &up, n * m), mat_at(&p.b_u, &x, &um, n * m));
                let (sp, sm) = (
                    mat_at(&p.sigma_u, &x, &up, n * m),
                    mat_at(&p.sigma_u, &x, &um, n * m),
                );
                let (fp, fm) = (mat_at(&p.f_u, &x, &up, m), mat_at(&p.f_u, &x, &um, m));
                for l in 0..m {
                    acc2[8].push(fuu[l * m + r], (fp[l] - fm[l]) / (2.0 * h));
                    for i in 0..n {
                        acc2[2].push(buu[i * m * m + l * m + r], (bp[i * m + l] - bm[i * m + l]) / (2.0 * h));
                        acc2[5].push(suu[i * m * m + l * m + r], (sp[i * m + l] - sm[i * m + l]) / (2.0 * h));
                    }
                }
            }
        }
    }

    let mut checks: Vec<DerivativeCheck> = acc
        .into_iter()
        .map(|a| DerivativeCheck {
            passed: a.rel <= opts.rel_tol,
            callback: a.name,
            max_abs_error: a.abs,
            max_rel_error: a.rel,
        })
        .collect();
    if p.second.is_some() {
        checks.extend(acc2.into_iter().map(|a| DerivativeCheck {
            passed: a.rel <= opts.rel_tol,
            callback: a.name,
            max_abs_error: a.abs,
            max_rel_error: a.rel,
        }));
    }
    Ok(ValidationReport {
        problem: p.name.clone(),
        samples: opts.samples,
        tolerance: opts.rel_tol,
        checks,
    })
}
