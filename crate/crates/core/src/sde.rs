//! Seeded Brownian paths, Euler-Maruyama simulation, cost estimation and the
//! fundamental matrix.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg;
use crate::problem::{CandidateControl, ControlProblem};

pub const DEFAULT_STEPS: usize = 256;
pub const DEFAULT_PATHS: usize = 100_000;
pub const DEFAULT_SEED: u64 = 42;

/// Uniform grid `t_k = k T / N` on `[0, T]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if steps < 2 {
            return Err(Error::Invalid("a time grid needs at least 2 steps".into()));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::Invalid("horizon must be positive".into()));
        }
        Ok(TimeGrid { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn t(&self, k: usize) -> f64 {
        self.horizon * k as f64 / self.steps as f64
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.t(k)).collect()
    }
}

/// Lazily generated Brownian increments. Each path owns a ChaCha stream keyed by
/// `(seed, path)`; increments are drawn at `base_steps` resolution and summed in
/// blocks, so coarser grids see exactly the coupled increments of finer ones.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BrownianBundle {
    pub seed: u64,
    pub paths: usize,
    pub grid: TimeGrid,
    pub base_steps: usize,
}

impl BrownianBundle {
    pub fn new(seed: u64, paths: usize, grid: TimeGrid) -> Self {
        BrownianBundle {
            seed,
            paths,
            grid,
            base_steps: grid.steps,
        }
    }

    pub fn with_base(seed: u64, paths: usize, grid: TimeGrid, base_steps: usize) -> Result<Self> {
        if base_steps % grid.steps != 0 {
            return Err(Error::GridMismatch(format!(
                "base resolution {base_steps} is not a multiple of {}",
                grid.steps
            )));
        }
        Ok(BrownianBundle {
            seed,
            paths,
            grid,
            base_steps,
        })
    }

    /// Same noise on a grid with half as many steps.
    pub fn coarsen(&self) -> Result<Self> {
        if self.grid.steps % 2 != 0 {
            return Err(Error::GridMismatch("cannot coarsen an odd grid".into()));
        }
        BrownianBundle::with_base(
            self.seed,
            self.paths,
            TimeGrid::new(self.grid.horizon, self.grid.steps / 2)?,
            self.base_steps,
        )
    }

    /// Same noise on a grid with twice as many steps (requires a finer base).
    pub fn refine(&self) -> Result<Self> {
        BrownianBundle::with_base(
            self.seed,
            self.paths,
            TimeGrid::new(self.grid.horizon, self.grid.steps * 2)?,
            self.base_steps,
        )
    }

    pub fn fill_increments(&self, path: usize, out: &mut [f64]) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(path as u64);
        let ratio = self.base_steps / self.grid.steps;
        let sd = (self.grid.horizon / self.base_steps as f64).sqrt();
        for o in out.iter_mut().take(self.grid.steps) {
            let mut s = 0.0;
            for _ in 0..ratio {
                let z: f64 = StandardNormal.sample(&mut rng);
                s += z;
            }
            *o = sd * s;
        }
    }

    pub fn increments(&self, path: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.steps];
        self.fill_increments(path, &mut out);
        out
    }

    /// Cumulative values `W(t_k)` for one path.
    pub fn path_values(&self, path: usize) -> Vec<f64> {
        let dw = self.increments(path);
        let mut w = vec![0.0; dw.len() + 1];
        for k in 0..dw.len() {
            w[k + 1] = w[k] + dw[k];
        }
        w
    }

    pub fn with_paths(&self, paths: usize) -> Self {
        BrownianBundle { paths, ..*self }
    }
}

/// Per-path scratch buffers for streaming simulation.
#[derive(Clone, Debug)]
pub struct PathBuffers {
    pub n: usize,
    pub m: usize,
    pub steps: usize,
    pub dw: Vec<f64>,
    pub w: Vec<f64>,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    b: Vec<f64>,
    s: Vec<f64>,
}

impl PathBuffers {
    pub fn new(n: usize, m: usize, steps: usize) -> Self {
        PathBuffers {
            n,
            m,
            steps,
            dw: vec![0.0; steps],
            w: vec![0.0; steps + 1],
            x: vec![0.0; (steps + 1) * n],
            u: vec![0.0; (steps + 1) * m],
            b: vec![0.0; n],
            s: vec![0.0; n],
        }
    }

    pub fn xk(&self, k: usize) -> &[f64] {
        &self.x[k * self.n..(k + 1) * self.n]
    }

    pub fn uk(&self, k: usize) -> &[f64] {
        &self.u[k * self.m..(k + 1) * self.m]
    }
}

/// Euler-Maruyama along one path; fills `ws` with the noise, states and controls.
pub fn simulate_path(
    p: &ControlProblem,
    control: &CandidateControl,
    x0: &[f64],
    brownian: &BrownianBundle,
    path: usize,
    ws: &mut PathBuffers,
) -> Result<()> {
    brownian.fill_increments(path, &mut ws.dw);
    euler(p, &|t, x, out| control.eval(t, x, out), x0, &brownian.grid, path, ws)
}

/// Euler-Maruyama with explicit increments and an arbitrary control evaluator
/// `(t, x, out)`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_noise(
    p: &ControlProblem,
    control: &dyn Fn(f64, &[f64], &mut [f64]),
    x0: &[f64],
    grid: &TimeGrid,
    dw: &[f64],
    path: usize,
    ws: &mut PathBuffers,
) -> Result<()> {
    ws.dw.copy_from_slice(&dw[..grid.steps]);
    euler(p, control, x0, grid, path, ws)
}

fn euler(
    p: &ControlProblem,
    control: &dyn Fn(f64, &[f64], &mut [f64]),
    x0: &[f64],
    grid: &TimeGrid,
    path: usize,
    ws: &mut PathBuffers,
) -> Result<()> {
    let (n, m, nsteps) = (p.state_dim, p.control_dim, grid.steps);
    let dt = grid.dt();
    ws.w[0] = 0.0;
    ws.x[..n].copy_from_slice(x0);
    for k in 0..nsteps {
        ws.w[k + 1] = ws.w[k] + ws.dw[k];
        let t = grid.t(k);
        let (xs, rest) = ws.x.split_at_mut((k + 1) * n);
        let xk = &xs[k * n..];
        control(t, xk, &mut ws.u[k * m..(k + 1) * m]);
        let uk = &ws.u[k * m..(k + 1) * m];
        (p.drift)(t, xk, uk, &mut ws.b);
        (p.diffusion)(t, xk, uk, &mut ws.s);
        let xn = &mut rest[..n];
        for i in 0..n {
            xn[i] = xk[i] + ws.b[i] * dt + ws.s[i] * ws.dw[k];
            if !xn[i].is_finite() {
                return Err(Error::NonFiniteState { path, step: k + 1 });
            }
        }
    }
    let t = grid.t(nsteps);
    let (xs, us) = (&ws.x[nsteps * n..], &mut ws.u[nsteps * m..]);
    control(t, xs, us);
    Ok(())
}

/// Materialized trajectories: `states[(p*(N+1)+k)*n + i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PathBundle {
    pub grid: TimeGrid,
    pub seed: u64,
    pub paths: usize,
    pub state_dim: usize,
    pub control_dim: usize,
    pub states: Vec<f64>,
    pub controls: Vec<f64>,
    pub brownian: Vec<f64>,
    pub increments: Vec<f64>,
}

impl PathBundle {
    pub fn nodes(&self) -> usize {
        self.grid.steps + 1
    }

    pub fn x(&self, path: usize, k: usize) -> &[f64] {
        let n = self.state_dim;
        let o = (path * self.nodes() + k) * n;
        &self.states[o..o + n]
    }

    pub fn u(&self, path: usize, k: usize) -> &[f64] {
        let m = self.control_dim;
        let o = (path * self.nodes() + k) * m;
        &self.controls[o..o + m]
    }

    pub fn w(&self, path: usize, k: usize) -> f64 {
        self.brownian[path * self.nodes() + k]
    }

    pub fn dw(&self, path: usize, k: usize) -> f64 {
        self.increments[path * self.grid.steps + k]
    }

    pub fn path_states(&self, path: usize) -> &[f64] {
        let n = self.state_dim;
        &self.states[path * self.nodes() * n..(path + 1) * self.nodes() * n]
    }

    pub fn path_controls(&self, path: usize) -> &[f64] {
        let m = self.control_dim;
        &self.controls[path * self.nodes() * m..(path + 1) * self.nodes() * m]
    }

    pub fn path_brownian(&self, path: usize) -> &[f64] {
        &self.brownian[path * self.nodes()..(path + 1) * self.nodes()]
    }

    pub fn path_increments(&self, path: usize) -> &[f64] {
        &self.increments[path * self.grid.steps..(path + 1) * self.grid.steps]
    }

    /// Terminal state of every path.
    pub fn terminal(&self, i: usize) -> Vec<f64> {
        (0..self.paths).map(|p| self.x(p, self.grid.steps)[i]).collect()
    }
}

/// Simulates and stores every path. Memory grows as `M (N+1) (n+m+2)` doubles;
/// the condition checkers stream paths instead.
pub fn simulate_state(
    p: &ControlProblem,
    control: &CandidateControl,
    x0: &[f64],
    brownian: &BrownianBundle,
) -> Result<PathBundle> {
    if x0.len() != p.state_dim {
        return Err(Error::DimensionMismatch {
            callback: "initial_point".into(),
            detail: format!("expected {} entries, got {}", p.state_dim, x0.len()),
        });
    }
    if (brownian.grid.horizon - p.horizon).abs() > 1e-12 {
        return Err(Error::GridMismatch("grid horizon differs from the problem horizon".into()));
    }
    let (n, m, steps) = (p.state_dim, p.control_dim, brownian.grid.steps);
    let per: Vec<PathBuffers> = (0..brownian.paths)
        .into_par_iter()
        .map(|path| {
            let mut ws = PathBuffers::new(n, m, steps);
            simulate_path(p, control, x0, brownian, path, &mut ws)?;
            Ok(ws)
        })
        .collect::<Result<_>>()?;
    let mut bundle = PathBundle {
        grid: brownian.grid,
        seed: brownian.seed,
        paths: brownian.paths,
        state_dim: n,
        control_dim: m,
        states: Vec::with_capacity(brownian.paths * (steps + 1) * n),
        controls: Vec::with_capacity(brownian.paths * (steps + 1) * m),
        brownian: Vec::with_capacity(brownian.paths * (steps + 1)),
        increments: Vec::with_capacity(brownian.paths * steps),
    };
    for ws in per {
        bundle.states.extend_from_slice(&ws.x);
        bundle.controls.extend_from_slice(&ws.u);
        bundle.brownian.extend_from_slice(&ws.w);
        bundle.increments.extend_from_slice(&ws.dw);
    }
    Ok(bundle)
}

/// Sample mean with its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    /// Sums in path order, so the result does not depend on scheduling.
    pub fn from_samples(xs: &[f64]) -> Self {
        let m = xs.len();
        if m == 0 {
            return Estimate { mean: 0.0, std_err: 0.0 };
        }
        let mean = xs.iter().sum::<f64>() / m as f64;
        if m == 1 {
            return Estimate { mean, std_err: 0.0 };
        }
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (m - 1) as f64;
        Estimate {
            mean,
            std_err: (var / m as f64).sqrt(),
        }
    }
}

fn path_cost(p: &ControlProblem, grid: &TimeGrid, x: &[f64], u: &[f64], w_t: f64) -> f64 {
    let (n, m) = (p.state_dim, p.control_dim);
    let dt = grid.dt();
    let mut c = 0.0;
    for k in 0..grid.steps {
        c += (p.running_cost)(grid.t(k), &x[k * n..(k + 1) * n], &u[k * m..(k + 1) * m]) * dt;
    }
    c + (p.terminal_cost)(&x[grid.steps * n..], w_t)
}

/// `J ~ mean over paths of sum_k f(t_k, x_k, u_k) dt + g(x_N)`.
pub fn estimate_cost(p: &ControlProblem, bundle: &PathBundle) -> Estimate {
    let vals: Vec<f64> = (0..bundle.paths)
        .into_par_iter()
        .map(|path| {
            path_cost(
                p,
                &bundle.grid,
                bundle.path_states(path),
                bundle.path_controls(path),
                bundle.w(path, bundle.grid.steps),
            )
        })
        .collect();
    Estimate::from_samples(&vals)
}

/// Streaming cost estimate that never stores the bundle.
pub fn estimate_cost_streaming(
    p: &ControlProblem,
    control: &CandidateControl,
    x0: &[f64],
    brownian: &BrownianBundle,
) -> Result<Estimate> {
    let (n, m, steps) = (p.state_dim, p.control_dim, brownian.grid.steps);
    let vals: Vec<f64> = (0..brownian.paths)
        .into_par_iter()
        .map_init(
            || PathBuffers::new(n, m, steps),
            |ws, path| {
                simulate_path(p, control, x0, brownian, path, ws)?;
                Ok(path_cost(p, &brownian.grid, &ws.x, &ws.u, ws.w[steps]))
            },
        )
        .collect::<Result<_>>()?;
    Ok(Estimate::from_samples(&vals))
}

/// Per-path `Phi_k` and `Phi_k^{-1}`, row-major `n x n` blocks.
#[derive(Clone, Debug)]
pub struct FundamentalMatrixPath {
    pub n: usize,
    pub steps: usize,
    pub paths: usize,
    pub phi: Vec<f64>,
    pub phi_inv: Vec<f64>,
    pub max_condition: f64,
    pub max_identity_error: f64,
}

impl FundamentalMatrixPath {
    pub fn phi(&self, path: usize, k: usize) -> &[f64] {
        let s = self.n * self.n;
        let o = (path * (self.steps + 1) + k) * s;
        &self.phi[o..o + s]
    }

    pub fn phi_inv(&self, path: usize, k: usize) -> &[f64] {
        let s = self.n * self.n;
        let o = (path * (self.steps + 1) + k) * s;
        &self.phi_inv[o..o + s]
    }
}

pub const SINGULAR_CONDITION: f64 = 1e12;

/// Euler scheme for `dPhi = b_x Phi dt + sigma_x Phi dW`, `Phi(0) = I`.
pub fn fundamental_matrix(p: &ControlProblem, bundle: &PathBundle) -> Result<FundamentalMatrixPath> {
    let n = p.state_dim;
    let steps = bundle.grid.steps;
    let dt = bundle.grid.dt();
    let per: Vec<(Vec<f64>, Vec<f64>, f64, f64)> = (0..bundle.paths)
        .into_par_iter()
        .map(|path| {
            let mut phi = vec![0.0; (steps + 1) * n * n];
            let mut inv = vec![0.0; (steps + 1) * n * n];
            for i in 0..n {
                phi[i * n + i] = 1.0;
                inv[i * n + i] = 1.0;
            }
            let mut bx = vec![0.0; n * n];
            let mut sx = vec![0.0; n * n];
            let mut max_cond: f64 = 1.0;
            let mut max_err: f64 = 0.0;
            for k in 0..steps {
                let t = bundle.grid.t(k);
                (p.b_x)(t, bundle.x(path, k), bundle.u(path, k), &mut bx);
                (p.sigma_x)(t, bundle.x(path, k), bundle.u(path, k), &mut sx);
                let cur = phi[k * n * n..(k + 1) * n * n].to_vec();
                let a = linalg::matmul(&bx, &cur, n, n, n);
                let s = linalg::matmul(&sx, &cur, n, n, n);
                let dwk = bundle.dw(path, k);
                let next: Vec<f64> = (0..n * n).map(|i| cur[i] + a[i] * dt + s[i] * dwk).collect();
                let mat = DMatrix::from_row_slice(n, n, &next);
                let cond = linalg::condition_number(&mat);
                if !(cond <= SINGULAR_CONDITION) {
                    return Err(Error::SingularMatrix {
                        path,
                        step: k + 1,
                        condition: cond,
                    });
                }
                max_cond = max_cond.max(cond);
                let inv_m = mat.clone().try_inverse().ok_or(Error::SingularMatrix {
                    path,
                    step: k + 1,
                    condition: cond,
                })?;
                let prod = &mat * &inv_m;
                for i in 0..n {
                    for j in 0..n {
                        let e = prod[(i, j)] - if i == j { 1.0 } else { 0.0 };
                        max_err = max_err.max(e.abs());
                    }
                }
                phi[(k + 1) * n * n..(k + 2) * n * n].copy_from_slice(&next);
                for i in 0..n {
                    for j in 0..n {
                        inv[(k + 1) * n * n + i * n + j] = inv_m[(i, j)];
                    }
                }
            }
            Ok((phi, inv, max_cond, max_err))
        })
        .collect::<Result<_>>()?;
    let mut out = FundamentalMatrixPath {
        n,
        steps,
        paths: bundle.paths,
        phi: Vec::with_capacity(bundle.paths * (steps + 1) * n * n),
        phi_inv: Vec::with_capacity(bundle.paths * (steps + 1) * n * n),
        max_condition: 1.0,
        max_identity_error: 0.0,
    };
    for (phi, inv, c, e) in per {
        out.phi.extend(phi);
        out.phi_inv.extend(inv);
        out.max_condition = out.max_condition.max(c);
        out.max_identity_error = out.max_identity_error.max(e);
    }
    Ok(out)
}

/// Estimate of `(E[(int |phi|^alpha dt)^(beta/alpha)])^(1/beta)`, with the sup over
/// grid nodes when `alpha` is infinite.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormEstimate {
    pub value: f64,
    pub std_err: f64,
}

fn check_exponents(alpha: f64, beta: f64) -> Result<()> {
    let alpha_ok = alpha == 2.0 || alpha == 4.0 || alpha == f64::INFINITY;
    let beta_ok = beta == 1.0 || beta == 2.0 || beta == 4.0;
    if alpha_ok && beta_ok {
        Ok(())
    } else {
        Err(Error::UnsupportedExponent {
            alpha: format!("{alpha}"),
            beta,
        })
    }
}

/// Per-path functional `(int |phi|^alpha dt)^(beta/alpha)` for a path sampled at
/// `N+1` nodes with `dim` components each.
pub fn path_functional(values: &[f64], dim: usize, dt: f64, alpha: f64, beta: f64) -> f64 {
    let nodes = values.len() / dim;
    let mag = |k: usize| linalg::norm(&values[k * dim..(k + 1) * dim]);
    if alpha.is_infinite() {
        (0..nodes).map(mag).fold(0.0, f64::max).powf(beta)
    } else {
        let s: f64 = (0..nodes - 1).map(|k| mag(k).powf(alpha) * dt).sum();
        s.powf(beta / alpha)
    }
}

/// Combines per-path functionals into the norm estimate (delta-method error).
pub fn norm_from_functionals(z: &[f64], beta: f64) -> NormEstimate {
    let e = Estimate::from_samples(z);
    let value = e.mean.max(0.0).powf(1.0 / beta);
    let std_err = if e.mean > 0.0 {
        e.std_err * e.mean.powf(1.0 / beta - 1.0) / beta
    } else {
        0.0
    };
    NormEstimate { value, std_err }
}

/// Norm of path data laid out as `[path][node][component]`.
pub fn path_norm(
    values: &[f64],
    paths: usize,
    dim: usize,
    grid: &TimeGrid,
    alpha: f64,
    beta: f64,
) -> Result<NormEstimate> {
    check_exponents(alpha, beta)?;
    let per = (grid.steps + 1) * dim;
    if values.len() != paths * per {
        return Err(Error::GridMismatch(format!(
            "expected {} values, got {}",
            paths * per,
            values.len()
        )));
    }
    let z: Vec<f64> = (0..paths)
        .map(|p| path_functional(&values[p * per..(p + 1) * per], dim, grid.dt(), alpha, beta))
        .collect();
    Ok(norm_from_functionals(&z, beta))
}

/// Norm of the state paths of a bundle.
pub fn state_norm(bundle: &PathBundle, alpha: f64, beta: f64) -> Result<NormEstimate> {
    path_norm(&bundle.states, bundle.paths, bundle.state_dim, &bundle.grid, alpha, beta)
}

pub fn validate_exponents(alpha: f64, beta: f64) -> Result<()> {
    check_exponents(alpha, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coarse_increments_sum_fine_pairs() {
        let fine = BrownianBundle::new(3, 4, TimeGrid::new(1.0, 8).unwrap());
        let coarse = fine.coarsen().unwrap();
        for p in 0..4 {
            let f = fine.increments(p);
            let c = coarse.increments(p);
            for k in 0..4 {
                assert!((c[k] - (f[2 * k] + f[2 * k + 1])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn streams_are_distinct() {
        let b = BrownianBundle::new(1, 2, TimeGrid::new(1.0, 4).unwrap());
        assert_ne!(b.increments(0), b.increments(1));
        assert_eq!(b.increments(1), b.increments(1));
    }

    #[test]
    fn exponents_are_checked() {
        assert!(matches!(check_exponents(3.0, 2.0), Err(Error::UnsupportedExponent { .. })));
        assert!(check_exponents(f64::INFINITY, 4.0).is_ok());
    }

    #[test]
    fn constant_norm() {
        let grid = TimeGrid::new(2.0, 4).unwrap();
        let vals = vec![3.0; 5];
        let n2 = path_norm(&vals, 1, 1, &grid, 2.0, 2.0).unwrap();
        assert!((n2.value - 3.0 * 2f64.sqrt()).abs() < 1e-12);
        let ninf = path_norm(&vals, 1, 1, &grid, f64::INFINITY, 1.0).unwrap();
        assert!((ninf.value - 3.0).abs() < 1e-12);
    }
}
