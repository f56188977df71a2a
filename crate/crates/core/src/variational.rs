//! First and second variational equations along a candidate, and empirical
//! remainder probes for the expansions `x^eps = x + eps y1 (+ eps^2 y2 / 2) + o(.)`.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::coeffs::{tensor_quad, NodeCoeffs};
use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{CandidateControl, ConstraintSpec, ControlLaw, ControlProblem};
use crate::sde::{
    self, path_functional, simulate_path, simulate_with_noise, BrownianBundle, Estimate,
    FundamentalMatrixPath, PathBuffers, PathBundle, TimeGrid,
};

/// A perturbation direction `(v, h, nu0, varpi0)`.
#[derive(Clone, Debug)]
pub struct VariationDirection {
    pub label: String,
    pub v: ControlLaw,
    pub h: Option<ControlLaw>,
    pub nu0: Vec<f64>,
    pub varpi0: Vec<f64>,
}

impl VariationDirection {
    pub fn new(v: ControlLaw, state_dim: usize) -> Self {
        VariationDirection {
            label: String::new(),
            v,
            h: None,
            nu0: vec![0.0; state_dim],
            varpi0: vec![0.0; state_dim],
        }
    }

    pub fn constant(v: &[f64], state_dim: usize) -> Self {
        let mut d = Self::new(ControlLaw::Constant(v.to_vec()), state_dim);
        d.label = format!("{v:?}");
        d
    }

    pub fn with_h(mut self, h: &[f64]) -> Self {
        self.h = Some(ControlLaw::Constant(h.to_vec()));
        self
    }

    pub fn with_h_law(mut self, h: ControlLaw) -> Self {
        self.h = Some(h);
        self
    }

    pub fn with_nu0(mut self, nu0: &[f64]) -> Self {
        self.nu0 = nu0.to_vec();
        self
    }

    pub fn with_varpi0(mut self, varpi0: &[f64]) -> Self {
        self.varpi0 = varpi0.to_vec();
        self
    }

    pub fn with_label(mut self, label: &str) -> Self {
        self.label = label.to_string();
        self
    }

    pub fn is_deterministic(&self) -> bool {
        self.v.is_deterministic() && self.h.as_ref().map_or(true, |h| h.is_deterministic())
    }

    pub fn describe(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "v": self.v.describe(),
            "h": self.h.as_ref().map(|h| h.describe()),
            "nu0": self.nu0,
            "varpi0": self.varpi0,
        })
    }

    pub(crate) fn check(&self, m: usize, n: usize) -> Result<()> {
        let bad = |what: &str, detail: String| Error::DimensionMismatch {
            callback: what.into(),
            detail,
        };
        if let Some(d) = self.v.dim() {
            if d != m {
                return Err(bad("direction v", format!("expected {m} entries, got {d}")));
            }
        }
        if let Some(d) = self.h.as_ref().and_then(|h| h.dim()) {
            if d != m {
                return Err(bad("direction h", format!("expected {m} entries, got {d}")));
            }
        }
        if self.nu0.len() != n || self.varpi0.len() != n {
            return Err(bad("initial variation", format!("expected {n} entries")));
        }
        Ok(())
    }
}

/// `y1` (and optionally `y2`) laid out as `[path][node][component]`.
#[derive(Clone, Debug)]
pub struct VariationalSolution {
    pub n: usize,
    pub grid: TimeGrid,
    pub paths: usize,
    pub y1: Vec<f64>,
    pub y2: Option<Vec<f64>>,
}

impl VariationalSolution {
    pub fn y1(&self, path: usize, k: usize) -> &[f64] {
        let o = (path * (self.grid.steps + 1) + k) * self.n;
        &self.y1[o..o + self.n]
    }

    pub fn y2(&self, path: usize, k: usize) -> Option<&[f64]> {
        let o = (path * (self.grid.steps + 1) + k) * self.n;
        self.y2.as_ref().map(|y| &y[o..o + self.n])
    }

    pub fn path_y1(&self, path: usize) -> &[f64] {
        let s = (self.grid.steps + 1) * self.n;
        &self.y1[path * s..(path + 1) * s]
    }
}

/// Direction values along one path: `v_k` and `h_k` (`[node][component]`).
pub(crate) fn direction_values(
    dir: &VariationDirection,
    grid: &TimeGrid,
    xbar: &[f64],
    n: usize,
    m: usize,
) -> (Vec<f64>, Vec<f64>) {
    let nodes = grid.steps + 1;
    let mut v = vec![0.0; nodes * m];
    let mut h = vec![0.0; nodes * m];
    for k in 0..nodes {
        let x = &xbar[k * n..(k + 1) * n];
        dir.v.eval(grid.t(k), x, &mut v[k * m..(k + 1) * m]);
        if let Some(hl) = &dir.h {
            hl.eval(grid.t(k), x, &mut h[k * m..(k + 1) * m]);
        }
    }
    (v, h)
}

/// Per-path variational solve. `second` requests `y2` as well.
#[allow(clippy::too_many_arguments)]
pub(crate) fn variation_path(
    p: &ControlProblem,
    grid: &TimeGrid,
    x: &[f64],
    u: &[f64],
    dw: &[f64],
    dir: &VariationDirection,
    second: bool,
    path: usize,
    c: &mut NodeCoeffs,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let (n, m) = (p.state_dim, p.control_dim);
    let nodes = grid.steps + 1;
    let dt = grid.dt();
    let (v, h) = direction_values(dir, grid, x, n, m);
    let mut y1 = vec![0.0; nodes * n];
    y1[..n].copy_from_slice(&dir.nu0);
    let mut y2 = if second {
        let mut y = vec![0.0; nodes * n];
        for i in 0..n {
            y[i] = 2.0 * dir.varpi0[i];
        }
        Some(y)
    } else {
        None
    };
    let mut tmp = vec![0.0; n];
    let mut drift = vec![0.0; n];
    let mut diff = vec![0.0; n];
    for k in 0..grid.steps {
        let t = grid.t(k);
        c.eval(p, t, &x[k * n..(k + 1) * n], &u[k * m..(k + 1) * m]);
        let vk = &v[k * m..(k + 1) * m];
        let yk = y1[k * n..(k + 1) * n].to_vec();
        linalg::matvec(&c.b_x, n, n, &yk, &mut drift);
        linalg::matvec(&c.b_u, n, m, vk, &mut tmp);
        linalg::axpy(1.0, &tmp, &mut drift);
        linalg::matvec(&c.s_x, n, n, &yk, &mut diff);
        linalg::matvec(&c.s_u, n, m, vk, &mut tmp);
        linalg::axpy(1.0, &tmp, &mut diff);
        for i in 0..n {
            let val = yk[i] + drift[i] * dt + diff[i] * dw[k];
            if !val.is_finite() {
                return Err(Error::NonFiniteState { path, step: k + 1 });
            }
            y1[(k + 1) * n + i] = val;
        }
        if let Some(y2) = y2.as_mut() {
            let s = c.second.as_ref().expect("second derivatives requested");
            let hk = &h[k * m..(k + 1) * m];
            let zk = y2[k * n..(k + 1) * n].to_vec();
            // Drift source.
            linalg::matvec(&c.b_x, n, n, &zk, &mut drift);
            linalg::matvec(&c.b_u, n, m, hk, &mut tmp);
            linalg::axpy(2.0, &tmp, &mut drift);
            tensor_quad(&s.b_xx, n, n, n, &yk, &yk, &mut tmp);
            linalg::axpy(1.0, &tmp, &mut drift);
            tensor_quad(&s.b_xu, n, n, m, &yk, vk, &mut tmp);
            linalg::axpy(2.0, &tmp, &mut drift);
            tensor_quad(&s.b_uu, n, m, m, vk, vk, &mut tmp);
            linalg::axpy(1.0, &tmp, &mut drift);
            // Diffusion source.
            linalg::matvec(&c.s_x, n, n, &zk, &mut diff);
            linalg::matvec(&c.s_u, n, m, hk, &mut tmp);
            linalg::axpy(2.0, &tmp, &mut diff);
            tensor_quad(&s.s_xx, n, n, n, &yk, &yk, &mut tmp);
            linalg::axpy(1.0, &tmp, &mut diff);
            tensor_quad(&s.s_xu, n, n, m, &yk, vk, &mut tmp);
            linalg::axpy(2.0, &tmp, &mut diff);
            tensor_quad(&s.s_uu, n, m, m, vk, vk, &mut tmp);
            linalg::axpy(1.0, &tmp, &mut diff);
            for i in 0..n {
                let val = zk[i] + drift[i] * dt + diff[i] * dw[k];
                if !val.is_finite() {
                    return Err(Error::NonFiniteState { path, step: k + 1 });
                }
                y2[(k + 1) * n + i] = val;
            }
        }
    }
    Ok((y1, y2))
}

fn solve(p: &ControlProblem, bundle: &PathBundle, dir: &VariationDirection, second: bool) -> Result<VariationalSolution> {
    let (n, m) = (p.state_dim, p.control_dim);
    if bundle.state_dim != n || bundle.control_dim != m {
        return Err(Error::GridMismatch("bundle dimensions differ from the problem".into()));
    }
    dir.check(m, n)?;
    let proto = NodeCoeffs::new(p, second)?;
    let per: Vec<(Vec<f64>, Option<Vec<f64>>)> = (0..bundle.paths)
        .into_par_iter()
        .map_init(
            || proto.clone(),
            |c, path| {
                variation_path(
                    p,
                    &bundle.grid,
                    bundle.path_states(path),
                    bundle.path_controls(path),
                    bundle.path_increments(path),
                    dir,
                    second,
                    path,
                    c,
                )
            },
        )
        .collect::<Result<_>>()?;
    let mut y1 = Vec::with_capacity(bundle.paths * bundle.nodes() * n);
    let mut y2 = if second { Some(Vec::with_capacity(y1.capacity())) } else { None };
    for (a, b) in per {
        y1.extend(a);
        if let (Some(acc), Some(b)) = (y2.as_mut(), b) {
            acc.extend(b);
        }
    }
    Ok(VariationalSolution {
        n,
        grid: bundle.grid,
        paths: bundle.paths,
        y1,
        y2,
    })
}

/// Euler scheme for `dy1 = (b_x y1 + b_u v) dt + (sigma_x y1 + sigma_u v) dW`, `y1(0) = nu0`,
/// using the increments stored in the bundle.
pub fn solve_first_variation(p: &ControlProblem, bundle: &PathBundle, dir: &VariationDirection) -> Result<VariationalSolution> {
    solve(p, bundle, dir, false)
}

/// Adds `y2` to a first-order solution. `y1` is recomputed alongside and must match
/// the supplied one.
pub fn solve_second_variation(
    p: &ControlProblem,
    bundle: &PathBundle,
    dir: &VariationDirection,
    y1: &VariationalSolution,
) -> Result<VariationalSolution> {
    if y1.paths != bundle.paths || y1.grid != bundle.grid {
        return Err(Error::GridMismatch("first variation was computed on another bundle".into()));
    }
    p.second()?;
    solve(p, bundle, dir, true)
}

/// `y1` from the fundamental matrix:
/// `y1_k = Phi_k [nu0 + sum_{j<k} Phi_j^{-1} ((b_u - sigma_x sigma_u) v dt + sigma_u v dW_j)]`.
pub fn explicit_first_variation(
    p: &ControlProblem,
    bundle: &PathBundle,
    phi: &FundamentalMatrixPath,
    dir: &VariationDirection,
) -> Result<VariationalSolution> {
    let (n, m) = (p.state_dim, p.control_dim);
    if phi.paths != bundle.paths || phi.steps != bundle.grid.steps {
        return Err(Error::GridMismatch("fundamental matrix computed on another bundle".into()));
    }
    dir.check(m, n)?;
    let grid = bundle.grid;
    let dt = grid.dt();
    let proto = NodeCoeffs::new(p, false)?;
    let per: Vec<Vec<f64>> = (0..bundle.paths)
        .into_par_iter()
        .map_init(
            || proto.clone(),
            |c, path| {
                let (v, _) = direction_values(dir, &grid, bundle.path_states(path), n, m);
                let mut acc = dir.nu0.clone();
                let mut y = vec![0.0; (grid.steps + 1) * n];
                y[..n].copy_from_slice(&acc);
                let mut tmp = vec![0.0; n];
                for k in 0..grid.steps {
                    c.eval(p, grid.t(k), bundle.x(path, k), bundle.u(path, k));
                    let vk = &v[k * m..(k + 1) * m];
                    let bu_v = c.b_u_times(vk);
                    let su_v = c.sigma_u_times(vk);
                    let mut sx_su_v = vec![0.0; n];
                    linalg::matvec(&c.s_x, n, n, &su_v, &mut sx_su_v);
                    let src: Vec<f64> = (0..n)
                        .map(|i| (bu_v[i] - sx_su_v[i]) * dt + su_v[i] * bundle.dw(path, k))
                        .collect();
                    linalg::matvec(phi.phi_inv(path, k), n, n, &src, &mut tmp);
                    linalg::axpy(1.0, &tmp, &mut acc);
                    linalg::matvec(phi.phi(path, k + 1), n, n, &acc, &mut y[(k + 1) * n..(k + 2) * n]);
                }
                y
            },
        )
        .collect();
    Ok(VariationalSolution {
        n,
        grid,
        paths: bundle.paths,
        y1: per.concat(),
        y2: None,
    })
}

/// Options for the remainder probes.
#[derive(Clone, Debug)]
pub struct ProbeOptions {
    pub eps: Vec<f64>,
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    /// Continue when `u^eps` leaves `U`, recording the defect.
    pub force: bool,
    /// Paths on which admissibility is checked node by node.
    pub check_paths: usize,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        ProbeOptions {
            eps: vec![0.2, 0.1, 0.05, 0.025],
            paths: 2000,
            steps: sde::DEFAULT_STEPS,
            seed: sde::DEFAULT_SEED,
            force: false,
            check_paths: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayRow {
    pub eps: f64,
    pub norm_beta1: f64,
    pub norm_beta2: f64,
    pub std_err: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DecayStatus {
    Decreasing,
    AtFloor,
    NotDecreasing,
}

/// Node where `u^eps` left the control set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Offender {
    pub eps: f64,
    pub step: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayTable {
    pub order: u8,
    pub rows: Vec<DecayRow>,
    /// Least-squares slope of `log norm_beta2` against `log eps`.
    pub slope: Option<f64>,
    pub status: DecayStatus,
    /// `max(MC std error, dt)`: values below it are indistinguishable from zero.
    pub floor: f64,
    pub max_membership_defect: f64,
    pub offenders: Vec<Offender>,
    pub paths: usize,
    pub steps: usize,
}

impl DecayTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("eps,norm_beta1,norm_beta2,std_err\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.eps, r.norm_beta1, r.norm_beta2, r.std_err));
        }
        s
    }
}

/// Remainder `(x^eps - x)/eps - y1`.
pub fn remainder_probe_first(
    p: &ControlProblem,
    s: &ConstraintSpec,
    candidate: &CandidateControl,
    dir: &VariationDirection,
    opts: &ProbeOptions,
) -> Result<DecayTable> {
    probe(p, s, candidate, dir, opts, 1)
}

/// Remainder `(x^eps - x - eps y1)/eps^2 - y2/2` with `u^eps = u + eps v + eps^2 h`.
pub fn remainder_probe_second(
    p: &ControlProblem,
    s: &ConstraintSpec,
    candidate: &CandidateControl,
    dir: &VariationDirection,
    opts: &ProbeOptions,
) -> Result<DecayTable> {
    p.second()?;
    probe(p, s, candidate, dir, opts, 2)
}

fn perturbed(ubar: &[f64], v: &[f64], h: &[f64], eps: f64, order: u8, out: &mut [f64]) {
    for l in 0..ubar.len() {
        out[l] = ubar[l] + eps * v[l];
        if order == 2 {
            out[l] += eps * eps * h[l];
        }
    }
}

fn probe(
    p: &ControlProblem,
    s: &ConstraintSpec,
    candidate: &CandidateControl,
    dir: &VariationDirection,
    opts: &ProbeOptions,
    order: u8,
) -> Result<DecayTable> {
    let (n, m) = (p.state_dim, p.control_dim);
    dir.check(m, n)?;
    if opts.eps.is_empty() || opts.eps.iter().any(|e| !(*e > 0.0)) {
        return Err(Error::Invalid("eps list must be nonempty and positive".into()));
    }
    let grid = TimeGrid::new(p.horizon, opts.steps)?;
    let brownian = BrownianBundle::new(opts.seed, opts.paths, grid);
    let x0 = &s.initial_point;
    let nodes = grid.steps + 1;

    // Admissibility of u^eps on a subset of paths. Deterministic data needs one path.
    let deterministic = candidate.law.is_deterministic() && dir.is_deterministic();
    let check_paths = if deterministic { 1 } else { opts.check_paths.min(opts.paths) };
    let mut offenders = Vec::new();
    let mut max_defect: f64 = 0.0;
    let mut memo: HashMap<Vec<u64>, f64> = HashMap::new();
    for path in 0..check_paths {
        let mut ws = PathBuffers::new(n, m, grid.steps);
        simulate_path(p, candidate, x0, &brownian, path, &mut ws)?;
        let (v, h) = direction_values(dir, &grid, &ws.x, n, m);
        let mut ue = vec![0.0; m];
        for &eps in &opts.eps {
            for k in 0..nodes {
                perturbed(ws.uk(k), &v[k * m..(k + 1) * m], &h[k * m..(k + 1) * m], eps, order, &mut ue);
                if s.control_set.contains(&ue, 1e-9) {
                    continue;
                }
                let key: Vec<u64> = ue.iter().map(|x| x.to_bits()).collect();
                let d = *memo
                    .entry(key)
                    .or_insert_with(|| s.control_set.distance(&ue).distance);
                if d > 1e-9 {
                    max_defect = max_defect.max(d);
                    if offenders.len() < 32 {
                        offenders.push(Offender { eps, step: k, distance: d });
                    }
                }
            }
        }
    }
    if !offenders.is_empty() && !opts.force {
        let first = &offenders[0];
        return Err(Error::InadmissiblePerturbation {
            eps: first.eps,
            step: first.step,
            distance: max_defect,
            count: offenders.len(),
        });
    }

    let ne = opts.eps.len();
    let proto = NodeCoeffs::new(p, order == 2)?;
    // Per path: for each eps, (sup |r|, sup |r|^2).
    let per: Vec<Vec<(f64, f64)>> = (0..opts.paths)
        .into_par_iter()
        .map_init(
            || (proto.clone(), PathBuffers::new(n, m, grid.steps), PathBuffers::new(n, m, grid.steps)),
            |(c, ws, we), path| {
                simulate_path(p, candidate, x0, &brownian, path, ws)?;
                let (y1, y2) = variation_path(p, &grid, &ws.x, &ws.u, &ws.dw, dir, order == 2, path, c)?;
                let (v, h) = direction_values(dir, &grid, &ws.x, n, m);
                let dt = grid.dt();
                let mut out = Vec::with_capacity(ne);
                for &eps in &opts.eps {
                    let ubar = &ws.u;
                    let ctrl = |t: f64, _x: &[f64], o: &mut [f64]| {
                        let k = ((t / dt).round() as usize).min(grid.steps);
                        perturbed(
                            &ubar[k * m..(k + 1) * m],
                            &v[k * m..(k + 1) * m],
                            &h[k * m..(k + 1) * m],
                            eps,
                            order,
                            o,
                        );
                    };
                    let x0e: Vec<f64> = (0..n)
                        .map(|i| {
                            let mut z = x0[i] + eps * dir.nu0[i];
                            if order == 2 {
                                z += eps * eps * dir.varpi0[i];
                            }
                            z
                        })
                        .collect();
                    simulate_with_noise(p, &ctrl, &x0e, &grid, &ws.dw, path, we)?;
                    let mut r = vec![0.0; nodes * n];
                    for a in 0..nodes * n {
                        let dx = we.x[a] - ws.x[a];
                        r[a] = if order == 1 {
                            dx / eps - y1[a]
                        } else {
                            (dx - eps * y1[a]) / (eps * eps) - 0.5 * y2.as_ref().expect("order 2")[a]
                        };
                    }
                    let z1 = path_functional(&r, n, dt, f64::INFINITY, 1.0);
                    out.push((z1, z1 * z1));
                }
                Ok(out)
            },
        )
        .collect::<Result<_>>()?;

    let mut rows = Vec::with_capacity(ne);
    for (i, &eps) in opts.eps.iter().enumerate() {
        let z1: Vec<f64> = per.iter().map(|r| r[i].0).collect();
        let z2: Vec<f64> = per.iter().map(|r| r[i].1).collect();
        let n1 = sde::norm_from_functionals(&z1, 1.0);
        let n2 = sde::norm_from_functionals(&z2, 2.0);
        rows.push(DecayRow {
            eps,
            norm_beta1: n1.value,
            norm_beta2: n2.value,
            std_err: n2.std_err,
        });
    }
    let max_se = rows.iter().map(|r| r.std_err).fold(0.0, f64::max);
    let floor = max_se.max(grid.dt());
    let status = decay_status(&rows, floor);
    Ok(DecayTable {
        order,
        slope: log_slope(&rows),
        status,
        floor,
        rows,
        max_membership_defect: max_defect,
        offenders,
        paths: opts.paths,
        steps: opts.steps,
    })
}

/// Rows ordered by decreasing `eps`; values must not increase, allowing one
/// inversion within two standard errors.
pub fn decay_status(rows: &[DecayRow], floor: f64) -> DecayStatus {
    if rows.iter().all(|r| r.norm_beta2 <= floor) {
        return DecayStatus::AtFloor;
    }
    let mut sorted: Vec<&DecayRow> = rows.iter().collect();
    sorted.sort_by(|a, b| b.eps.total_cmp(&a.eps));
    let mut inversions = 0;
    for w in sorted.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b.norm_beta2 > a.norm_beta2 {
            if b.norm_beta2 - a.norm_beta2 <= 2.0 * (a.std_err + b.std_err) {
                inversions += 1;
            } else {
                return DecayStatus::NotDecreasing;
            }
        }
    }
    if inversions <= 1 {
        DecayStatus::Decreasing
    } else {
        DecayStatus::NotDecreasing
    }
}

/// Least-squares slope of `log norm_beta2` on `log eps` over positive rows.
pub fn log_slope(rows: &[DecayRow]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| r.norm_beta2 > 1e-14)
        .map(|r| (r.eps.ln(), r.norm_beta2.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let k = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / k;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / k;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        None
    } else {
        Some(sxy / sxx)
    }
}

/// Cost difference quotient `(J(u + eps v) - J(u)) / eps` with common noise.
pub fn cost_difference_quotient(
    p: &ControlProblem,
    x0: &[f64],
    candidate: &CandidateControl,
    dir: &VariationDirection,
    brownian: &BrownianBundle,
    eps: f64,
) -> Result<Estimate> {
    let (n, m) = (p.state_dim, p.control_dim);
    let grid = brownian.grid;
    let dt = grid.dt();
    let vals: Vec<f64> = (0..brownian.paths)
        .into_par_iter()
        .map_init(
            || (PathBuffers::new(n, m, grid.steps), PathBuffers::new(n, m, grid.steps)),
            |(ws, we), path| {
                simulate_path(p, candidate, x0, brownian, path, ws)?;
                let (v, _) = direction_values(dir, &grid, &ws.x, n, m);
                let ubar = &ws.u;
                let ctrl = |t: f64, _x: &[f64], o: &mut [f64]| {
                    let k = ((t / dt).round() as usize).min(grid.steps);
                    for l in 0..m {
                        o[l] = ubar[k * m + l] + eps * v[k * m + l];
                    }
                };
                simulate_with_noise(p, &ctrl, x0, &grid, &ws.dw, path, we)?;
                let cost = |b: &PathBuffers| {
                    let mut c = 0.0;
                    for k in 0..grid.steps {
                        c += (p.running_cost)(grid.t(k), b.xk(k), b.uk(k)) * dt;
                    }
                    c + (p.terminal_cost)(b.xk(grid.steps), b.w[grid.steps])
                };
                Ok((cost(we) - cost(ws)) / eps)
            },
        )
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&vals))
}
