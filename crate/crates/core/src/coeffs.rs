//! Coefficient derivatives evaluated at one grid node, and the Hamiltonian
//! partials built from them.

use crate::error::Result;
use crate::linalg::{self, dot};
use crate::problem::ControlProblem;

#[derive(Clone, Debug)]
pub struct NodeSecond {
    pub b_xx: Vec<f64>,
    pub b_xu: Vec<f64>,
    pub b_uu: Vec<f64>,
    pub s_xx: Vec<f64>,
    pub s_xu: Vec<f64>,
    pub s_uu: Vec<f64>,
    pub f_xx: Vec<f64>,
    pub f_xu: Vec<f64>,
    pub f_uu: Vec<f64>,
}

/// First (and optionally second) derivatives of `b`, `sigma`, `f` at `(t, x, u)`.
#[derive(Clone, Debug)]
pub struct NodeCoeffs {
    pub n: usize,
    pub m: usize,
    pub b_x: Vec<f64>,
    pub b_u: Vec<f64>,
    pub s_x: Vec<f64>,
    pub s_u: Vec<f64>,
    pub f_x: Vec<f64>,
    pub f_u: Vec<f64>,
    pub second: Option<NodeSecond>,
}

impl NodeCoeffs {
    pub fn new(p: &ControlProblem, with_second: bool) -> Result<Self> {
        let (n, m) = (p.state_dim, p.control_dim);
        let second = if with_second {
            p.second()?;
            Some(NodeSecond {
                b_xx: vec![0.0; n * n * n],
                b_xu: vec![0.0; n * n * m],
                b_uu: vec![0.0; n * m * m],
                s_xx: vec![0.0; n * n * n],
                s_xu: vec![0.0; n * n * m],
                s_uu: vec![0.0; n * m * m],
                f_xx: vec![0.0; n * n],
                f_xu: vec![0.0; n * m],
                f_uu: vec![0.0; m * m],
            })
        } else {
            None
        };
        Ok(NodeCoeffs {
            n,
            m,
            b_x: vec![0.0; n * n],
            b_u: vec![0.0; n * m],
            s_x: vec![0.0; n * n],
            s_u: vec![0.0; n * m],
            f_x: vec![0.0; n],
            f_u: vec![0.0; m],
            second,
        })
    }

    pub fn eval(&mut self, p: &ControlProblem, t: f64, x: &[f64], u: &[f64]) {
        (p.b_x)(t, x, u, &mut self.b_x);
        (p.b_u)(t, x, u, &mut self.b_u);
        (p.sigma_x)(t, x, u, &mut self.s_x);
        (p.sigma_u)(t, x, u, &mut self.s_u);
        (p.f_x)(t, x, u, &mut self.f_x);
        (p.f_u)(t, x, u, &mut self.f_u);
        if let (Some(s), Some(d)) = (self.second.as_mut(), p.second.as_ref()) {
            (d.b_xx)(t, x, u, &mut s.b_xx);
            (d.b_xu)(t, x, u, &mut s.b_xu);
            (d.b_uu)(t, x, u, &mut s.b_uu);
            (d.sigma_xx)(t, x, u, &mut s.s_xx);
            (d.sigma_xu)(t, x, u, &mut s.s_xu);
            (d.sigma_uu)(t, x, u, &mut s.s_uu);
            (d.f_xx)(t, x, u, &mut s.f_xx);
            (d.f_xu)(t, x, u, &mut s.f_xu);
            (d.f_uu)(t, x, u, &mut s.f_uu);
        }
    }

    fn sec(&self) -> &NodeSecond {
        self.second.as_ref().expect("second derivatives evaluated")
    }

    /// `H_u = b_u^T p + sigma_u^T q - f_u`.
    pub fn h_u(&self, p1: &[f64], q1: &[f64], out: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        for l in 0..m {
            let mut s = -self.f_u[l];
            for i in 0..n {
                s += self.b_u[i * m + l] * p1[i] + self.s_u[i * m + l] * q1[i];
            }
            out[l] = s;
        }
    }

    /// `H_x = b_x^T p + sigma_x^T q - f_x`.
    pub fn h_x(&self, p1: &[f64], q1: &[f64], out: &mut [f64]) {
        let n = self.n;
        for j in 0..n {
            let mut s = -self.f_x[j];
            for i in 0..n {
                s += self.b_x[i * n + j] * p1[i] + self.s_x[i * n + j] * q1[i];
            }
            out[j] = s;
        }
    }

    /// `H_xx` (`n x n`).
    pub fn h_xx(&self, p1: &[f64], q1: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.n];
        self.h_xx_into(p1, q1, &mut out);
        out
    }

    pub fn h_xx_into(&self, p1: &[f64], q1: &[f64], out: &mut [f64]) {
        let s = self.sec();
        contract(&s.f_xx, &s.b_xx, &s.s_xx, p1, q1, out);
    }

    /// `H_xu` (`n x m`, entry `[j][l]` is the derivative in `x_j` then `u_l`).
    pub fn h_xu(&self, p1: &[f64], q1: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n * self.m];
        self.h_xu_into(p1, q1, &mut out);
        out
    }

    pub fn h_xu_into(&self, p1: &[f64], q1: &[f64], out: &mut [f64]) {
        let s = self.sec();
        contract(&s.f_xu, &s.b_xu, &s.s_xu, p1, q1, out);
    }

    /// `H_uu` (`m x m`).
    pub fn h_uu(&self, p1: &[f64], q1: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.m];
        self.h_uu_into(p1, q1, &mut out);
        out
    }

    pub fn h_uu_into(&self, p1: &[f64], q1: &[f64], out: &mut [f64]) {
        let s = self.sec();
        contract(&s.f_uu, &s.b_uu, &s.s_uu, p1, q1, out);
    }

    /// `S = H_ux + b_u^T P2 + sigma_u^T Q2 + sigma_u^T P2 sigma_x` (`m x n`).
    pub fn s_matrix(&self, p1: &[f64], q1: &[f64], p2: &[f64], q2: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.m * self.n];
        self.s_matrix_into(p1, q1, p2, q2, &mut out);
        out
    }

    pub fn s_matrix_into(&self, p1: &[f64], q1: &[f64], p2: &[f64], q2: &[f64], out: &mut [f64]) {
        let (n, m) = (self.n, self.m);
        let s = self.sec();
        for l in 0..m {
            for j in 0..n {
                // H_ux[l][j] = H_xu[j][l].
                let mut v = -s.f_xu[j * m + l];
                for i in 0..n {
                    let a = i * n * m + j * m + l;
                    v += p1[i] * s.b_xu[a] + q1[i] * s.s_xu[a];
                }
                for i in 0..n {
                    let (bu, su) = (self.b_u[i * m + l], self.s_u[i * m + l]);
                    v += bu * p2[i * n + j] + su * q2[i * n + j];
                    if su != 0.0 {
                        let mut ps = 0.0;
                        for k in 0..n {
                            ps += p2[i * n + k] * self.s_x[k * n + j];
                        }
                        v += su * ps;
                    }
                }
                out[l * n + j] = v;
            }
        }
    }

    /// `sigma_u v` (`n`).
    pub fn sigma_u_times(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        linalg::matvec(&self.s_u, self.n, self.m, v, &mut out);
        out
    }

    /// `b_u v` (`n`).
    pub fn b_u_times(&self, v: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        linalg::matvec(&self.b_u, self.n, self.m, v, &mut out);
        out
    }
}

/// `-f + sum_i p_i b[i] + q_i s[i]` for stacked second-derivative blocks.
fn contract(f: &[f64], b: &[f64], s: &[f64], p: &[f64], q: &[f64], out: &mut [f64]) {
    let len = f.len();
    for (o, v) in out.iter_mut().zip(f) {
        *o = -v;
    }
    for i in 0..p.len() {
        let (pi, qi) = (p[i], q[i]);
        for a in 0..len {
            out[a] += pi * b[i * len + a] + qi * s[i * len + a];
        }
    }
}

/// `(y^T A y)_i = sum_jk A[i][j][k] y_j y_k` for a rank-3 tensor `A` (`n x a x b`).
pub fn tensor_quad(t: &[f64], n: usize, a: usize, b: usize, y: &[f64], z: &[f64], out: &mut [f64]) {
    for i in 0..n {
        let mut s = 0.0;
        for j in 0..a {
            let yj = y[j];
            if yj == 0.0 {
                continue;
            }
            s += yj * dot(&t[i * a * b + j * b..i * a * b + (j + 1) * b], z);
        }
        out[i] = s;
    }
}
