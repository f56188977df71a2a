//! Hamiltonian partials, the first and second adjoint BSDEs, the matrix `S` and
//! the duality identities linking adjoints to variations.
//!
//! Two solvers share one representation. When every coefficient entering a
//! driver is the same on every path, `Q = 0` and `P` solves a backward ODE
//! (RK4). Otherwise conditional expectations are estimated by regression on a
//! polynomial basis in the state (and in `W` when the terminal cost reads it).

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::NodeCoeffs;
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{CandidateControl, ControlProblem};
use crate::regression::{self, Basis};
use crate::sde::{simulate_state, BrownianBundle, Estimate, PathBundle, TimeGrid};
use crate::variational::{direction_values, VariationDirection, VariationalSolution};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdjointMethod {
    #[default]
    Auto,
    Ode,
    Regression,
}

impl std::str::FromStr for AdjointMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(AdjointMethod::Auto),
            "ode" | "deterministic-ode" => Ok(AdjointMethod::Ode),
            "regression" | "regression-mc" => Ok(AdjointMethod::Regression),
            other => Err(Error::Config(format!("unknown adjoint method `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AdjointOptions {
    pub method: AdjointMethod,
    pub degree: usize,
    pub ridge: f64,
    pub max_condition: f64,
    /// Paths inspected when deciding whether coefficients are deterministic.
    pub pilot_paths: usize,
    /// Cap on the materialized regression bundle.
    pub regression_paths: usize,
}

impl Default for AdjointOptions {
    fn default() -> Self {
        AdjointOptions {
            method: AdjointMethod::Auto,
            degree: 2,
            ridge: 1e-8,
            max_condition: 1e10,
            pilot_paths: 8,
            regression_paths: 20_000,
        }
    }
}

pub const ODE_TIER: &str = "deterministic-ode";
pub const REGRESSION_TIER: &str = "regression-mc";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverMeta {
    pub first_method: String,
    pub second_method: Option<String>,
    pub basis_size: usize,
    pub degree: usize,
    pub regression_paths: usize,
    pub regression_sigma_p1: f64,
    pub regression_sigma_q1: f64,
    pub regression_sigma_p2: f64,
    pub regression_sigma_q2: f64,
    pub max_gram_condition: f64,
}

#[derive(Clone, Debug)]
struct NodeModel {
    basis: Basis,
    p: Vec<f64>,
    q: Vec<f64>,
}

#[derive(Clone, Debug)]
enum Tier {
    /// `[node][d]`; `Q = 0`.
    Ode(Vec<f64>),
    /// One model per node `k < N`.
    Regression { nodes: Vec<NodeModel>, uses_noise: bool },
}

/// Solution of the adjoint equations, evaluable at any `(k, x_k, W_k)`.
#[derive(Clone)]
pub struct AdjointSolution {
    pub grid: TimeGrid,
    pub n: usize,
    pub m: usize,
    first: Tier,
    second: Option<Tier>,
    pub meta: SolverMeta,
    problem: ControlProblem,
}

impl std::fmt::Debug for AdjointSolution {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AdjointSolution")
            .field("grid", &self.grid)
            .field("meta", &self.meta)
            .finish()
    }
}

fn features(x: &[f64], w: f64, uses_noise: bool) -> Vec<f64> {
    let mut f = x.to_vec();
    if uses_noise {
        f.push(w);
    }
    f
}

impl Tier {
    fn eval(&self, k: usize, x: &[f64], w: f64, d: usize, want_q: bool, out: &mut [f64]) {
        match self {
            Tier::Ode(v) => {
                if want_q {
                    out[..d].iter_mut().for_each(|o| *o = 0.0);
                } else {
                    out[..d].copy_from_slice(&v[k * d..(k + 1) * d]);
                }
            }
            Tier::Regression { nodes, uses_noise } => {
                let node = &nodes[k.min(nodes.len() - 1)];
                let f = features(x, w, *uses_noise);
                let mut row = vec![0.0; node.basis.size()];
                node.basis.eval(&f, &mut row);
                let coef = if want_q { &node.q } else { &node.p };
                regression::predict(coef, &row, d, out);
            }
        }
    }

    fn is_ode(&self) -> bool {
        matches!(self, Tier::Ode(_))
    }
}

impl AdjointSolution {
    pub fn has_second(&self) -> bool {
        self.second.is_some()
    }

    pub fn first_is_deterministic(&self) -> bool {
        self.first.is_ode()
    }

    pub fn second_is_deterministic(&self) -> bool {
        self.second.as_ref().is_some_and(|t| t.is_ode())
    }

    /// `P1(t_k)` on a path with state `x` and Brownian value `w` at node `k`.
    pub fn p1(&self, k: usize, x: &[f64], w: f64, out: &mut [f64]) {
        if k == self.grid.steps {
            (self.problem.g_x)(x, w, out);
            out.iter_mut().for_each(|o| *o = -*o);
        } else {
            self.first.eval(k, x, w, self.n, false, out);
        }
    }

    pub fn q1(&self, k: usize, x: &[f64], w: f64, out: &mut [f64]) {
        self.first.eval(k, x, w, self.n, true, out);
    }

    /// `P2(t_k)`, row-major `n x n`. Panics without a second-order solution.
    pub fn p2(&self, k: usize, x: &[f64], w: f64, out: &mut [f64]) {
        let tier = self.second.as_ref().expect("second adjoint solved");
        if k == self.grid.steps {
            let d = self.problem.second.as_ref().expect("second derivatives");
            (d.g_xx)(x, w, out);
            out.iter_mut().for_each(|o| *o = -*o);
        } else {
            tier.eval(k, x, w, self.n * self.n, false, out);
        }
    }

    pub fn q2(&self, k: usize, x: &[f64], w: f64, out: &mut [f64]) {
        let tier = self.second.as_ref().expect("second adjoint solved");
        tier.eval(k, x, w, self.n * self.n, true, out);
    }

    /// Every node of every path of a bundle.
    pub fn materialize(&self, bundle: &PathBundle) -> Result<AdjointPaths> {
        if bundle.grid != self.grid {
            return Err(Error::GridMismatch("adjoint was solved on another grid".into()));
        }
        let n = self.n;
        let nodes = bundle.nodes();
        let second = self.has_second();
        let per: Vec<[Vec<f64>; 4]> = (0..bundle.paths)
            .into_par_iter()
            .map(|path| {
                let mut p1 = vec![0.0; nodes * n];
                let mut q1 = vec![0.0; nodes * n];
                let mut p2 = if second { vec![0.0; nodes * n * n] } else { Vec::new() };
                let mut q2 = p2.clone();
                for k in 0..nodes {
                    let (x, w) = (bundle.x(path, k), bundle.w(path, k));
                    self.p1(k, x, w, &mut p1[k * n..(k + 1) * n]);
                    self.q1(k, x, w, &mut q1[k * n..(k + 1) * n]);
                    if second {
                        self.p2(k, x, w, &mut p2[k * n * n..(k + 1) * n * n]);
                        self.q2(k, x, w, &mut q2[k * n * n..(k + 1) * n * n]);
                    }
                }
                [p1, q1, p2, q2]
            })
            .collect();
        let mut out = AdjointPaths {
            n,
            grid: self.grid,
            paths: bundle.paths,
            p1: Vec::new(),
            q1: Vec::new(),
            p2: if second { Some(Vec::new()) } else { None },
            q2: if second { Some(Vec::new()) } else { None },
        };
        for [a, b, c, d] in per {
            out.p1.extend(a);
            out.q1.extend(b);
            if let (Some(p2), Some(q2)) = (out.p2.as_mut(), out.q2.as_mut()) {
                p2.extend(c);
                q2.extend(d);
            }
        }
        Ok(out)
    }
}

/// Adjoint values on every node of a bundle, `[path][node][component]`.
#[derive(Clone, Debug)]
pub struct AdjointPaths {
    pub n: usize,
    pub grid: TimeGrid,
    pub paths: usize,
    pub p1: Vec<f64>,
    pub q1: Vec<f64>,
    pub p2: Option<Vec<f64>>,
    pub q2: Option<Vec<f64>>,
}

impl AdjointPaths {
    pub fn p1(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * (self.grid.steps + 1) + k) * self.n;
        &self.p1[o..o + self.n]
    }

    pub fn q1(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * (self.grid.steps + 1) + k) * self.n;
        &self.q1[o..o + self.n]
    }

    pub fn p2(&self, path: usize, k: usize) -> Option<&[f64]> {
        let s = self.n * self.n;
        let o = (path * (self.grid.steps + 1) + k) * s;
        self.p2.as_ref().map(|v| &v[o..o + s])
    }

    pub fn q2(&self, path: usize, k: usize) -> Option<&[f64]> {
        let s = self.n * self.n;
        let o = (path * (self.grid.steps + 1) + k) * s;
        self.q2.as_ref().map(|v| &v[o..o + s])
    }
}

fn same(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-12 * (1.0 + x.abs()))
}

/// Whether `b_x`, `sigma_x`, `f_x` and `g_x` agree across the first `pilot` paths.
fn first_deterministic(p: &ControlProblem, bundle: &PathBundle, pilot: usize) -> Result<bool> {
    let n = p.state_dim;
    let mut c0 = NodeCoeffs::new(p, false)?;
    let mut c1 = c0.clone();
    let steps = bundle.grid.steps;
    for path in 1..pilot.min(bundle.paths) {
        for k in 0..steps {
            let t = bundle.grid.t(k);
            c0.eval(p, t, bundle.x(0, k), bundle.u(0, k));
            c1.eval(p, t, bundle.x(path, k), bundle.u(path, k));
            if !(same(&c0.b_x, &c1.b_x) && same(&c0.s_x, &c1.s_x) && same(&c0.f_x, &c1.f_x)) {
                return Ok(false);
            }
        }
        let mut g0 = vec![0.0; n];
        let mut g1 = vec![0.0; n];
        (p.g_x)(bundle.x(0, steps), bundle.w(0, steps), &mut g0);
        (p.g_x)(bundle.x(path, steps), bundle.w(path, steps), &mut g1);
        if !same(&g0, &g1) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Whether `b_x`, `sigma_x`, `H_xx` and `g_xx` agree across the pilot paths.
fn second_deterministic(p: &ControlProblem, bundle: &PathBundle, first: &AdjointSolution, pilot: usize) -> Result<bool> {
    let n = p.state_dim;
    let d = p.second()?;
    let mut c0 = NodeCoeffs::new(p, true)?;
    let mut c1 = c0.clone();
    let steps = bundle.grid.steps;
    let hxx = |c: &mut NodeCoeffs, path: usize, k: usize| {
        let (x, w) = (bundle.x(path, k), bundle.w(path, k));
        c.eval(p, bundle.grid.t(k), x, bundle.u(path, k));
        let mut p1 = vec![0.0; n];
        let mut q1 = vec![0.0; n];
        first.p1(k, x, w, &mut p1);
        first.q1(k, x, w, &mut q1);
        c.h_xx(&p1, &q1)
    };
    for path in 1..pilot.min(bundle.paths) {
        for k in 0..steps {
            let h0 = hxx(&mut c0, 0, k);
            let h1 = hxx(&mut c1, path, k);
            if !(same(&c0.b_x, &c1.b_x) && same(&c0.s_x, &c1.s_x) && same(&h0, &h1)) {
                return Ok(false);
            }
        }
        let mut g0 = vec![0.0; n * n];
        let mut g1 = vec![0.0; n * n];
        (d.g_xx)(bundle.x(0, steps), bundle.w(0, steps), &mut g0);
        (d.g_xx)(bundle.x(path, steps), bundle.w(path, steps), &mut g1);
        if !same(&g0, &g1) {
            return Ok(false);
        }
    }
    Ok(true)
}

/// Backward RK4 for `dP/dt = -F(t, P)` with coefficients linearly interpolated
/// between nodes. `rhs(k_lo, theta, P)` evaluates `F` at `t_k + theta dt`.
fn rk4_backward(steps: usize, dt: f64, terminal: Vec<f64>, rhs: impl Fn(usize, f64, &[f64]) -> Vec<f64>) -> Vec<f64> {
    let d = terminal.len();
    let mut out = vec![0.0; (steps + 1) * d];
    out[steps * d..].copy_from_slice(&terminal);
    let mut cur = terminal;
    for k in (0..steps).rev() {
        let shift = |p: &[f64], s: &[f64], h: f64| -> Vec<f64> { p.iter().zip(s).map(|(a, b)| a + h * b).collect() };
        // Integrating backwards: dP/ds = F with s = T - t.
        let k1 = rhs(k, 1.0, &cur);
        let k2 = rhs(k, 0.5, &shift(&cur, &k1, 0.5 * dt));
        let k3 = rhs(k, 0.5, &shift(&cur, &k2, 0.5 * dt));
        let k4 = rhs(k, 0.0, &shift(&cur, &k3, dt));
        for i in 0..d {
            cur[i] += dt / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        out[k * d..(k + 1) * d].copy_from_slice(&cur);
    }
    out
}

fn lerp(a: &[f64], b: &[f64], theta: f64) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (1.0 - theta) * x + theta * y).collect()
}

fn coeff_path(p: &ControlProblem, bundle: &PathBundle, path: usize, second: bool) -> Result<Vec<NodeCoeffs>> {
    let proto = NodeCoeffs::new(p, second)?;
    Ok((0..bundle.nodes())
        .map(|k| {
            let mut c = proto.clone();
            c.eval(p, bundle.grid.t(k), bundle.x(path, k), bundle.u(path, k));
            c
        })
        .collect())
}

fn ode_first(p: &ControlProblem, bundle: &PathBundle) -> Result<Vec<f64>> {
    let n = p.state_dim;
    let steps = bundle.grid.steps;
    let cs = coeff_path(p, bundle, 0, false)?;
    let mut term = vec![0.0; n];
    (p.g_x)(bundle.x(0, steps), bundle.w(0, steps), &mut term);
    term.iter_mut().for_each(|v| *v = -*v);
    Ok(rk4_backward(steps, bundle.grid.dt(), term, |k, theta, pv| {
        let bx = lerp(&cs[k].b_x, &cs[k + 1].b_x, theta);
        let fx = lerp(&cs[k].f_x, &cs[k + 1].f_x, theta);
        let mut out = vec![0.0; n];
        linalg::matvec_t(&bx, n, n, pv, &mut out);
        for i in 0..n {
            out[i] -= fx[i];
        }
        out
    }))
}

/// Driver of the second adjoint without the `H_xx` term.
fn second_driver(bx: &[f64], sx: &[f64], p2: &[f64], q2: &[f64], n: usize) -> Vec<f64> {
    let bxt = linalg::transpose(bx, n, n);
    let sxt = linalg::transpose(sx, n, n);
    let a = linalg::matmul(&bxt, p2, n, n, n);
    let b = linalg::matmul(p2, bx, n, n, n);
    let c = linalg::matmul(&linalg::matmul(&sxt, p2, n, n, n), sx, n, n, n);
    let d = linalg::matmul(&sxt, q2, n, n, n);
    let e = linalg::matmul(q2, sx, n, n, n);
    (0..n * n).map(|i| a[i] + b[i] + c[i] + d[i] + e[i]).collect()
}

fn ode_second(p: &ControlProblem, bundle: &PathBundle, first: &AdjointSolution) -> Result<Vec<f64>> {
    let n = p.state_dim;
    let steps = bundle.grid.steps;
    let d = p.second()?;
    let cs = coeff_path(p, bundle, 0, true)?;
    let hxx: Vec<Vec<f64>> = (0..=steps)
        .map(|k| {
            let (x, w) = (bundle.x(0, k), bundle.w(0, k));
            let mut p1 = vec![0.0; n];
            let mut q1 = vec![0.0; n];
            first.p1(k, x, w, &mut p1);
            first.q1(k, x, w, &mut q1);
            cs[k].h_xx(&p1, &q1)
        })
        .collect();
    let mut term = vec![0.0; n * n];
    (d.g_xx)(bundle.x(0, steps), bundle.w(0, steps), &mut term);
    term.iter_mut().for_each(|v| *v = -*v);
    let zero = vec![0.0; n * n];
    let mut out = rk4_backward(steps, bundle.grid.dt(), term, |k, theta, pv| {
        let bx = lerp(&cs[k].b_x, &cs[k + 1].b_x, theta);
        let sx = lerp(&cs[k].s_x, &cs[k + 1].s_x, theta);
        let h = lerp(&hxx[k], &hxx[k + 1], theta);
        let mut f = second_driver(&bx, &sx, pv, &zero, n);
        for i in 0..n * n {
            f[i] += h[i];
        }
        f
    });
    for k in 0..=steps {
        linalg::symmetrize(&mut out[k * n * n..(k + 1) * n * n], n);
    }
    Ok(out)
}

struct RegressionOutcome {
    nodes: Vec<NodeModel>,
    sigma_p: f64,
    sigma_q: f64,
    basis_size: usize,
    max_condition: f64,
}

/// Explicit backward regression sweep. `driver(path, k, p_next, q, out)` adds the
/// driver at node `k` for one path; `terminal` holds `P(T)` per path.
fn regression_sweep(
    bundle: &PathBundle,
    d: usize,
    uses_noise: bool,
    opts: &AdjointOptions,
    terminal: Vec<f64>,
    symmetric: Option<usize>,
    driver: impl Fn(usize, usize, &[f64], &[f64], &mut [f64]) + Sync,
) -> Result<RegressionOutcome> {
    let mpaths = bundle.paths;
    let steps = bundle.grid.steps;
    let dt = bundle.grid.dt();
    let n = bundle.state_dim;
    let nf = n + usize::from(uses_noise);
    let mut y = terminal;
    let mut nodes: Vec<NodeModel> = Vec::with_capacity(steps);
    let mut sigma_p: f64 = 0.0;
    let mut sigma_q: f64 = 0.0;
    let mut basis_size = 0;
    let mut max_condition: f64 = 0.0;
    for k in (0..steps).rev() {
        let mut feats = Vec::with_capacity(mpaths * nf);
        for path in 0..mpaths {
            feats.extend(features(bundle.x(path, k), bundle.w(path, k), uses_noise));
        }
        let basis = Basis::fit(&feats, nf, opts.degree);
        let phi = basis.design(&feats, nf);
        basis_size = basis_size.max(basis.size());
        let cond_mean = regression::fit(&phi, &y, d, opts.ridge, opts.max_condition, k)?;
        max_condition = max_condition.max(cond_mean.condition);
        let mut zq = vec![0.0; mpaths * d];
        for path in 0..mpaths {
            let dw = bundle.dw(path, k);
            for j in 0..d {
                zq[path * d + j] = (y[path * d + j] - cond_mean.fitted[path * d + j]) * dw / dt;
            }
        }
        let qfit = regression::fit(&phi, &zq, d, opts.ridge, opts.max_condition, k)?;
        let mut qvals = qfit.fitted.clone();
        let mut qcoef = qfit.coef.clone();
        if let Some(s) = symmetric {
            for path in 0..mpaths {
                linalg::symmetrize(&mut qvals[path * d..(path + 1) * d], s);
            }
            for b in 0..basis.size() {
                linalg::symmetrize(&mut qcoef[b * d..(b + 1) * d], s);
            }
        }
        let target: Vec<f64> = (0..mpaths)
            .into_par_iter()
            .flat_map_iter(|path| {
                let yn = &y[path * d..(path + 1) * d];
                let mut f = vec![0.0; d];
                driver(path, k, yn, &qvals[path * d..(path + 1) * d], &mut f);
                (0..d).map(move |j| yn[j] + dt * f[j]).collect::<Vec<_>>()
            })
            .collect();
        let pfit = regression::fit(&phi, &target, d, opts.ridge, opts.max_condition, k)?;
        sigma_p = sigma_p.max(pfit.sigma);
        sigma_q = sigma_q.max(qfit.sigma);
        let mut pcoef = pfit.coef;
        let mut pvals = pfit.fitted;
        if let Some(s) = symmetric {
            for path in 0..mpaths {
                linalg::symmetrize(&mut pvals[path * d..(path + 1) * d], s);
            }
            for b in 0..basis.size() {
                linalg::symmetrize(&mut pcoef[b * d..(b + 1) * d], s);
            }
        }
        nodes.push(NodeModel {
            basis,
            p: pcoef,
            q: qcoef,
        });
        y = pvals;
    }
    nodes.reverse();
    Ok(RegressionOutcome {
        nodes,
        sigma_p,
        sigma_q,
        basis_size,
        max_condition,
    })
}

fn regression_first(p: &ControlProblem, bundle: &PathBundle, opts: &AdjointOptions) -> Result<RegressionOutcome> {
    let n = p.state_dim;
    let steps = bundle.grid.steps;
    let mut term = vec![0.0; bundle.paths * n];
    for path in 0..bundle.paths {
        (p.g_x)(bundle.x(path, steps), bundle.w(path, steps), &mut term[path * n..(path + 1) * n]);
    }
    term.iter_mut().for_each(|v| *v = -*v);
    let proto = NodeCoeffs::new(p, false)?;
    regression_sweep(bundle, n, p.terminal_uses_noise, opts, term, None, |path, k, pn, q, out| {
        let mut c = proto.clone();
        c.eval(p, bundle.grid.t(k), bundle.x(path, k), bundle.u(path, k));
        c.h_x(pn, q, out);
    })
}

fn regression_second(
    p: &ControlProblem,
    bundle: &PathBundle,
    first: &AdjointSolution,
    opts: &AdjointOptions,
) -> Result<RegressionOutcome> {
    let n = p.state_dim;
    let steps = bundle.grid.steps;
    let d = p.second()?;
    let mut term = vec![0.0; bundle.paths * n * n];
    for path in 0..bundle.paths {
        (d.g_xx)(bundle.x(path, steps), bundle.w(path, steps), &mut term[path * n * n..(path + 1) * n * n]);
    }
    term.iter_mut().for_each(|v| *v = -*v);
    let proto = NodeCoeffs::new(p, true)?;
    regression_sweep(bundle, n * n, p.terminal_uses_noise, opts, term, Some(n), |path, k, pn, q, out| {
        let mut c = proto.clone();
        let (x, w) = (bundle.x(path, k), bundle.w(path, k));
        c.eval(p, bundle.grid.t(k), x, bundle.u(path, k));
        let mut p1 = vec![0.0; n];
        let mut q1 = vec![0.0; n];
        first.p1(k, x, w, &mut p1);
        first.q1(k, x, w, &mut q1);
        let h = c.h_xx(&p1, &q1);
        let f = second_driver(&c.b_x, &c.s_x, pn, q, n);
        for i in 0..n * n {
            out[i] = f[i] + h[i];
        }
    })
}

fn check_bundle(p: &ControlProblem, bundle: &PathBundle) -> Result<()> {
    if bundle.state_dim != p.state_dim || bundle.control_dim != p.control_dim {
        return Err(Error::GridMismatch("bundle dimensions differ from the problem".into()));
    }
    if (bundle.grid.horizon - p.horizon).abs() > 1e-12 {
        return Err(Error::GridMismatch("bundle horizon differs from the problem".into()));
    }
    if bundle.paths == 0 {
        return Err(Error::Invalid("empty bundle".into()));
    }
    Ok(())
}

/// Solves `dP1 = -(b_x^T P1 + sigma_x^T Q1 - f_x) dt + Q1 dW`, `P1(T) = -g_x`.
pub fn solve_first_adjoint(p: &ControlProblem, bundle: &PathBundle, opts: &AdjointOptions) -> Result<AdjointSolution> {
    check_bundle(p, bundle)?;
    let det = first_deterministic(p, bundle, opts.pilot_paths)?;
    let use_ode = match opts.method {
        AdjointMethod::Ode if !det => {
            return Err(Error::MethodInapplicable(
                "coefficients of the first adjoint vary across paths".into(),
            ))
        }
        AdjointMethod::Ode => true,
        AdjointMethod::Auto => det,
        AdjointMethod::Regression => false,
    };
    let mut meta = SolverMeta {
        degree: opts.degree,
        ..SolverMeta::default()
    };
    let first = if use_ode {
        meta.first_method = ODE_TIER.into();
        Tier::Ode(ode_first(p, bundle)?)
    } else {
        let out = regression_first(p, bundle, opts)?;
        meta.first_method = REGRESSION_TIER.into();
        meta.basis_size = out.basis_size;
        meta.regression_paths = bundle.paths;
        meta.regression_sigma_p1 = out.sigma_p;
        meta.regression_sigma_q1 = out.sigma_q;
        meta.max_gram_condition = out.max_condition;
        Tier::Regression {
            nodes: out.nodes,
            uses_noise: p.terminal_uses_noise,
        }
    };
    Ok(AdjointSolution {
        grid: bundle.grid,
        n: p.state_dim,
        m: p.control_dim,
        first,
        second: None,
        meta,
        problem: p.clone(),
    })
}

/// Solves the matrix BSDE for `(P2, Q2)` given `(P1, Q1)`.
pub fn solve_second_adjoint(
    p: &ControlProblem,
    bundle: &PathBundle,
    first: AdjointSolution,
    opts: &AdjointOptions,
) -> Result<AdjointSolution> {
    check_bundle(p, bundle)?;
    p.second()?;
    if bundle.grid != first.grid {
        return Err(Error::GridMismatch("first adjoint was solved on another grid".into()));
    }
    let det = second_deterministic(p, bundle, &first, opts.pilot_paths)?;
    let use_ode = match opts.method {
        AdjointMethod::Ode if !det => {
            return Err(Error::MethodInapplicable(
                "coefficients of the second adjoint vary across paths".into(),
            ))
        }
        AdjointMethod::Ode => true,
        AdjointMethod::Auto => det,
        AdjointMethod::Regression => false,
    };
    let mut sol = first;
    if use_ode {
        let vals = ode_second(p, bundle, &sol)?;
        sol.meta.second_method = Some(ODE_TIER.into());
        sol.second = Some(Tier::Ode(vals));
    } else {
        let out = regression_second(p, bundle, &sol, opts)?;
        sol.meta.second_method = Some(REGRESSION_TIER.into());
        sol.meta.basis_size = sol.meta.basis_size.max(out.basis_size);
        sol.meta.regression_paths = bundle.paths;
        sol.meta.regression_sigma_p2 = out.sigma_p;
        sol.meta.regression_sigma_q2 = out.sigma_q;
        sol.meta.max_gram_condition = sol.meta.max_gram_condition.max(out.max_condition);
        sol.second = Some(Tier::Regression {
            nodes: out.nodes,
            uses_noise: p.terminal_uses_noise,
        });
    }
    Ok(sol)
}

/// Simulates what each tier needs and solves both adjoints: a few pilot paths
/// decide the tier, and the regression tier gets its own materialized bundle.
pub fn solve_adjoints(
    p: &ControlProblem,
    candidate: &CandidateControl,
    x0: &[f64],
    brownian: &BrownianBundle,
    opts: &AdjointOptions,
    second: bool,
) -> Result<AdjointSolution> {
    let pilot_paths = opts.pilot_paths.max(1).min(brownian.paths);
    let pilot = simulate_state(p, candidate, x0, &brownian.with_paths(pilot_paths))?;
    let first_det = first_deterministic(p, &pilot, pilot_paths)?;
    let want_ode = |det: bool| match opts.method {
        AdjointMethod::Auto => det,
        AdjointMethod::Ode => true,
        AdjointMethod::Regression => false,
    };
    let reg_paths = opts.regression_paths.min(brownian.paths).max(pilot_paths);
    let mut big: Option<PathBundle> = None;
    let mut bundle_for = |ode: bool| -> Result<PathBundle> {
        if ode {
            return Ok(pilot.clone());
        }
        if big.is_none() {
            big = Some(simulate_state(p, candidate, x0, &brownian.with_paths(reg_paths))?);
        }
        Ok(big.clone().expect("just simulated"))
    };
    let b1 = bundle_for(want_ode(first_det))?;
    let sol = solve_first_adjoint(p, &b1, opts)?;
    if !second {
        return Ok(sol);
    }
    let second_det = second_deterministic(p, &pilot, &sol, pilot_paths)?;
    let b2 = bundle_for(want_ode(second_det))?;
    solve_second_adjoint(p, &b2, sol, opts)
}

/// Hamiltonian and its partials along every path, `[path][node][...]`.
#[derive(Clone, Debug)]
pub struct HamiltonianEval {
    pub n: usize,
    pub m: usize,
    pub grid: TimeGrid,
    pub paths: usize,
    pub h: Vec<f64>,
    pub h_u: Vec<f64>,
    pub h_x: Vec<f64>,
    pub h_xx: Option<Vec<f64>>,
    pub h_xu: Option<Vec<f64>>,
    pub h_uu: Option<Vec<f64>>,
}

impl HamiltonianEval {
    pub fn h_u(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * (self.grid.steps + 1) + k) * self.m;
        &self.h_u[o..o + self.m]
    }
}

/// `H = <P1, b> + <Q1, sigma> - f` and its derivatives by the chain rule.
pub fn eval_hamiltonian(p: &ControlProblem, bundle: &PathBundle, adj: &AdjointSolution) -> Result<HamiltonianEval> {
    if bundle.grid != adj.grid {
        return Err(Error::GridMismatch("adjoint was solved on another grid".into()));
    }
    check_bundle(p, bundle)?;
    let (n, m) = (p.state_dim, p.control_dim);
    let second = p.has_second_order();
    let proto = NodeCoeffs::new(p, second)?;
    let nodes = bundle.nodes();
    type PerPath = (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>);
    let per: Vec<PerPath> = (0..bundle.paths)
        .into_par_iter()
        .map_init(
            || proto.clone(),
            |c, path| {
                let mut out: PerPath = (
                    vec![0.0; nodes],
                    vec![0.0; nodes * m],
                    vec![0.0; nodes * n],
                    Vec::new(),
                    Vec::new(),
                    Vec::new(),
                );
                let mut p1 = vec![0.0; n];
                let mut q1 = vec![0.0; n];
                let mut b = vec![0.0; n];
                let mut s = vec![0.0; n];
                for k in 0..nodes {
                    let t = bundle.grid.t(k);
                    let (x, u, w) = (bundle.x(path, k), bundle.u(path, k), bundle.w(path, k));
                    adj.p1(k, x, w, &mut p1);
                    adj.q1(k, x, w, &mut q1);
                    c.eval(p, t, x, u);
                    (p.drift)(t, x, u, &mut b);
                    (p.diffusion)(t, x, u, &mut s);
                    out.0[k] = linalg::dot(&p1, &b) + linalg::dot(&q1, &s) - (p.running_cost)(t, x, u);
                    c.h_u(&p1, &q1, &mut out.1[k * m..(k + 1) * m]);
                    c.h_x(&p1, &q1, &mut out.2[k * n..(k + 1) * n]);
                    if second {
                        let mut hxx = c.h_xx(&p1, &q1);
                        linalg::symmetrize(&mut hxx, n);
                        let mut huu = c.h_uu(&p1, &q1);
                        linalg::symmetrize(&mut huu, m);
                        out.3.extend(hxx);
                        out.4.extend(c.h_xu(&p1, &q1));
                        out.5.extend(huu);
                    }
                }
                out
            },
        )
        .collect();
    let mut ev = HamiltonianEval {
        n,
        m,
        grid: bundle.grid,
        paths: bundle.paths,
        h: Vec::new(),
        h_u: Vec::new(),
        h_x: Vec::new(),
        h_xx: second.then(Vec::new),
        h_xu: second.then(Vec::new),
        h_uu: second.then(Vec::new),
    };
    for (a, b, c, d, e, f) in per {
        ev.h.extend(a);
        ev.h_u.extend(b);
        ev.h_x.extend(c);
        if second {
            ev.h_xx.as_mut().expect("second").extend(d);
            ev.h_xu.as_mut().expect("second").extend(e);
            ev.h_uu.as_mut().expect("second").extend(f);
        }
    }
    Ok(ev)
}

/// `S(t_k)` per path and node (`m x n` blocks), with its Malliavin derivative when known.
#[derive(Clone, Debug)]
pub struct SingularMatrixPath {
    pub m: usize,
    pub n: usize,
    pub grid: TimeGrid,
    pub paths: usize,
    pub values: Vec<f64>,
    /// Same on every path of the bundle and produced by the ODE tier.
    pub deterministic: bool,
    /// Per node; zero for deterministic `S`, from the problem otherwise.
    pub grad: Option<Vec<f64>>,
}

impl SingularMatrixPath {
    pub fn s(&self, path: usize, k: usize) -> &[f64] {
        let sz = self.m * self.n;
        let o = (path * (self.grid.steps + 1) + k) * sz;
        &self.values[o..o + sz]
    }
}

/// Node-level `S` from an adjoint solution.
pub(crate) fn s_at(c: &NodeCoeffs, adj: &AdjointSolution, k: usize, x: &[f64], w: f64) -> Vec<f64> {
    let n = c.n;
    let mut p1 = vec![0.0; n];
    let mut q1 = vec![0.0; n];
    let mut p2 = vec![0.0; n * n];
    let mut q2 = vec![0.0; n * n];
    adj.p1(k, x, w, &mut p1);
    adj.q1(k, x, w, &mut q1);
    adj.p2(k, x, w, &mut p2);
    adj.q2(k, x, w, &mut q2);
    c.s_matrix(&p1, &q1, &p2, &q2)
}

pub fn singular_matrix(p: &ControlProblem, bundle: &PathBundle, adj: &AdjointSolution) -> Result<SingularMatrixPath> {
    check_bundle(p, bundle)?;
    if !adj.has_second() {
        return Err(Error::MissingSecondDerivatives);
    }
    if bundle.grid != adj.grid {
        return Err(Error::GridMismatch("adjoint was solved on another grid".into()));
    }
    let (n, m) = (p.state_dim, p.control_dim);
    let nodes = bundle.nodes();
    let proto = NodeCoeffs::new(p, true)?;
    let per: Vec<Vec<f64>> = (0..bundle.paths)
        .into_par_iter()
        .map_init(
            || proto.clone(),
            |c, path| {
                let mut out = Vec::with_capacity(nodes * m * n);
                for k in 0..nodes {
                    let (x, w) = (bundle.x(path, k), bundle.w(path, k));
                    c.eval(p, bundle.grid.t(k), x, bundle.u(path, k));
                    out.extend(s_at(c, adj, k, x, w));
                }
                out
            },
        )
        .collect();
    let deterministic =
        adj.first_is_deterministic() && adj.second_is_deterministic() && per.iter().all(|v| same(&per[0], v));
    if let Some(v) = per.iter().flatten().find(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("non-finite S entry {v}")));
    }
    let grad = if deterministic {
        Some(vec![0.0; nodes * m * n])
    } else {
        p.grad_s.as_ref().map(|g| {
            let mut out = vec![0.0; nodes * m * n];
            for k in 0..nodes {
                g(bundle.grid.t(k), &mut out[k * m * n..(k + 1) * m * n]);
            }
            out
        })
    };
    Ok(SingularMatrixPath {
        m,
        n,
        grid: bundle.grid,
        paths: bundle.paths,
        values: per.concat(),
        deterministic,
        grad,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityResult {
    pub lhs: f64,
    pub rhs: f64,
    pub gap: f64,
    pub std_err: f64,
}

fn duality_inputs(p: &ControlProblem, bundle: &PathBundle, y1: &VariationalSolution, adj: &AdjointSolution) -> Result<()> {
    check_bundle(p, bundle)?;
    if bundle.grid != adj.grid || y1.grid != bundle.grid || y1.paths != bundle.paths {
        return Err(Error::GridMismatch("duality inputs live on different grids".into()));
    }
    Ok(())
}

fn summarize(pairs: &[(f64, f64)]) -> DualityResult {
    let l: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let r: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let g: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    let (le, re, ge) = (Estimate::from_samples(&l), Estimate::from_samples(&r), Estimate::from_samples(&g));
    DualityResult {
        lhs: le.mean,
        rhs: re.mean,
        gap: ge.mean,
        std_err: ge.std_err,
    }
}

/// `E<g_x(x_T), y1(T)>` against
/// `-<P1(0), nu0> - E int (<P1, b_u v> + <Q1, sigma_u v> + <f_x, y1>) dt`.
pub fn duality_check(
    p: &ControlProblem,
    bundle: &PathBundle,
    dir: &VariationDirection,
    y1: &VariationalSolution,
    adj: &AdjointSolution,
) -> Result<DualityResult> {
    duality_inputs(p, bundle, y1, adj)?;
    let (n, m) = (p.state_dim, p.control_dim);
    let grid = bundle.grid;
    let dt = grid.dt();
    let steps = grid.steps;
    let proto = NodeCoeffs::new(p, false)?;
    let pairs: Vec<(f64, f64)> = (0..bundle.paths)
        .into_par_iter()
        .map_init(
            || proto.clone(),
            |c, path| {
                let (v, _) = direction_values(dir, &grid, bundle.path_states(path), n, m);
                let mut gx = vec![0.0; n];
                (p.g_x)(bundle.x(path, steps), bundle.w(path, steps), &mut gx);
                let lhs = linalg::dot(&gx, y1.y1(path, steps));
                let mut p1 = vec![0.0; n];
                let mut q1 = vec![0.0; n];
                adj.p1(0, bundle.x(path, 0), 0.0, &mut p1);
                let mut rhs = -linalg::dot(&p1, &dir.nu0);
                for k in 0..steps {
                    let (x, w) = (bundle.x(path, k), bundle.w(path, k));
                    c.eval(p, grid.t(k), x, bundle.u(path, k));
                    adj.p1(k, x, w, &mut p1);
                    adj.q1(k, x, w, &mut q1);
                    let vk = &v[k * m..(k + 1) * m];
                    let s = linalg::dot(&p1, &c.b_u_times(vk))
                        + linalg::dot(&q1, &c.sigma_u_times(vk))
                        + linalg::dot(&c.f_x, y1.y1(path, k));
                    rhs -= s * dt;
                }
                (lhs, rhs)
            },
        )
        .collect();
    Ok(summarize(&pairs))
}

/// `-E<g_xx y1(T), y1(T)>` against
/// `<P2(0) nu0, nu0> + E int (<P2 sigma_u v, sigma_u v> + 2<S y1, v> - <H_xx y1, y1> - 2<H_xu v, y1>) dt`.
pub fn second_order_duality(
    p: &ControlProblem,
    bundle: &PathBundle,
    dir: &VariationDirection,
    y1: &VariationalSolution,
    adj: &AdjointSolution,
) -> Result<DualityResult> {
    duality_inputs(p, bundle, y1, adj)?;
    let d = p.second()?;
    if !adj.has_second() {
        return Err(Error::MissingSecondDerivatives);
    }
    let (n, m) = (p.state_dim, p.control_dim);
    let grid = bundle.grid;
    let dt = grid.dt();
    let steps = grid.steps;
    let proto = NodeCoeffs::new(p, true)?;
    let pairs: Vec<(f64, f64)> = (0..bundle.paths)
        .into_par_iter()
        .map_init(
            || proto.clone(),
            |c, path| {
                let (v, _) = direction_values(dir, &grid, bundle.path_states(path), n, m);
                let mut gxx = vec![0.0; n * n];
                (d.g_xx)(bundle.x(path, steps), bundle.w(path, steps), &mut gxx);
                let yt = y1.y1(path, steps);
                let lhs = -linalg::bilinear(&gxx, n, n, yt, yt);
                let mut p1 = vec![0.0; n];
                let mut q1 = vec![0.0; n];
                let mut p2 = vec![0.0; n * n];
                adj.p2(0, bundle.x(path, 0), 0.0, &mut p2);
                let mut rhs = linalg::bilinear(&p2, n, n, &dir.nu0, &dir.nu0);
                for k in 0..steps {
                    let (x, w) = (bundle.x(path, k), bundle.w(path, k));
                    c.eval(p, grid.t(k), x, bundle.u(path, k));
                    adj.p1(k, x, w, &mut p1);
                    adj.q1(k, x, w, &mut q1);
                    adj.p2(k, x, w, &mut p2);
                    let vk = &v[k * m..(k + 1) * m];
                    let yk = y1.y1(path, k);
                    let su = c.sigma_u_times(vk);
                    let s = s_at(c, adj, k, x, w);
                    let hxx = c.h_xx(&p1, &q1);
                    let hxu = c.h_xu(&p1, &q1);
                    let val = linalg::bilinear(&p2, n, n, &su, &su) + 2.0 * linalg::bilinear(&s, m, n, yk, vk)
                        - linalg::bilinear(&hxx, n, n, yk, yk)
                        - 2.0 * linalg::bilinear(&hxu, n, m, vk, yk);
                    rhs += val * dt;
                }
                (lhs, rhs)
            },
        )
        .collect();
    Ok(summarize(&pairs))
}

/// Conditional mean of the one-step residual
/// `P(t_{k+1}) - P(t_k) + driver dt - Q dW`, estimated by a second regression.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MartingaleCheck {
    pub max_conditional_mean: f64,
    pub tolerance: f64,
    pub passed: bool,
}

pub fn martingale_residual(p: &ControlProblem, bundle: &PathBundle, adj: &AdjointSolution, opts: &AdjointOptions) -> Result<MartingaleCheck> {
    check_bundle(p, bundle)?;
    if bundle.grid != adj.grid {
        return Err(Error::GridMismatch("adjoint was solved on another grid".into()));
    }
    let n = p.state_dim;
    let grid = bundle.grid;
    let dt = grid.dt();
    let nf = n + usize::from(p.terminal_uses_noise);
    let mut c = NodeCoeffs::new(p, false)?;
    let mut worst: f64 = 0.0;
    let mut tol: f64 = 0.0;
    for k in 0..grid.steps {
        let mut feats = Vec::with_capacity(bundle.paths * nf);
        let mut resid = Vec::with_capacity(bundle.paths * n);
        let mut p_now = vec![0.0; n];
        let mut p_next = vec![0.0; n];
        let mut q = vec![0.0; n];
        let mut hx = vec![0.0; n];
        for path in 0..bundle.paths {
            let (x, w) = (bundle.x(path, k), bundle.w(path, k));
            feats.extend(features(x, w, p.terminal_uses_noise));
            adj.p1(k, x, w, &mut p_now);
            adj.q1(k, x, w, &mut q);
            adj.p1(k + 1, bundle.x(path, k + 1), bundle.w(path, k + 1), &mut p_next);
            c.eval(p, grid.t(k), x, bundle.u(path, k));
            c.h_x(&p_next, &q, &mut hx);
            let dw = bundle.dw(path, k);
            for i in 0..n {
                resid.push(p_next[i] - p_now[i] + hx[i] * dt - q[i] * dw);
            }
        }
        let basis = Basis::fit(&feats, nf, opts.degree);
        let phi = basis.design(&feats, nf);
        let fit = regression::fit(&phi, &resid, n, opts.ridge, opts.max_condition, k)?;
        let rms = (fit.fitted.iter().map(|v| v * v).sum::<f64>() / fit.fitted.len() as f64).sqrt();
        worst = worst.max(rms);
        tol = tol.max(3.0 * fit.sigma + 1e-6);
    }
    Ok(MartingaleCheck {
        max_conditional_mean: worst,
        tolerance: tol,
        passed: worst <= tol,
    })
}
