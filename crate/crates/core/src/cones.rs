//! First- and second-order tangent sets and normal cones of constraint sets.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{self, dot, lp_maximize, norm, LinearSystem, LpOutcome};

/// `|psi_j(x)| <= ACTIVE_TOL` declares an inequality active.
pub const ACTIVE_TOL: f64 = 1e-9;
pub const MEMBER_TOL: f64 = 1e-9;

type ValueFn = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], &mut [f64]) + Send + Sync>;

/// A twice differentiable scalar constraint function.
#[derive(Clone)]
pub struct Constraint {
    pub name: String,
    pub value: ValueFn,
    pub grad: GradFn,
    /// Row-major `n x n`.
    pub hess: GradFn,
}

impl fmt::Debug for Constraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Constraint({})", self.name)
    }
}

impl Constraint {
    pub fn new<V, G, H>(name: &str, value: V, grad: G, hess: H) -> Self
    where
        V: Fn(&[f64]) -> f64 + Send + Sync + 'static,
        G: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
        H: Fn(&[f64], &mut [f64]) + Send + Sync + 'static,
    {
        Constraint {
            name: name.to_string(),
            value: Arc::new(value),
            grad: Arc::new(grad),
            hess: Arc::new(hess),
        }
    }

    /// `|x - c|^2 - r^2`.
    pub fn sphere(center: &[f64], radius: f64) -> Self {
        let c = center.to_vec();
        let c2 = c.clone();
        let n = c.len();
        Constraint::new(
            &format!("|x-{c:?}|^2-{radius}^2"),
            move |x| x.iter().zip(&c).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() - radius * radius,
            move |x, out| {
                for i in 0..n {
                    out[i] = 2.0 * (x[i] - c2[i]);
                }
            },
            move |_, out| {
                out.fill(0.0);
                for i in 0..n {
                    out[i * n + i] = 2.0;
                }
            },
        )
    }

    /// `<a, x> - b`.
    pub fn linear(a: &[f64], b: f64) -> Self {
        let a1 = a.to_vec();
        let a2 = a.to_vec();
        Constraint::new(
            &format!("<{a:?},x>-{b}"),
            move |x| dot(&a1, x) - b,
            move |_, out| out.copy_from_slice(&a2),
            |_, out| out.fill(0.0),
        )
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    pub fn gradient(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; x.len()];
        (self.grad)(x, &mut g);
        g
    }

    pub fn hessian(&self, x: &[f64]) -> Vec<f64> {
        let mut h = vec![0.0; x.len() * x.len()];
        (self.hess)(x, &mut h);
        h
    }

    fn quad(&self, x: &[f64], v: &[f64]) -> f64 {
        let n = x.len();
        linalg::bilinear(&self.hessian(x), n, n, v, v)
    }
}

/// `{x | phi_i(x) = 0, psi_j(x) <= 0}`.
#[derive(Clone)]
pub struct SmoothConstraints {
    pub dim: usize,
    pub equalities: Vec<Constraint>,
    pub inequalities: Vec<Constraint>,
    pub convex: bool,
    mfcq_cache: Arc<Mutex<BTreeMap<Vec<u64>, bool>>>,
}

impl fmt::Debug for SmoothConstraints {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SmoothConstraints")
            .field("dim", &self.dim)
            .field("equalities", &self.equalities)
            .field("inequalities", &self.inequalities)
            .field("convex", &self.convex)
            .finish()
    }
}

impl SmoothConstraints {
    pub fn new(dim: usize, equalities: Vec<Constraint>, inequalities: Vec<Constraint>, convex: bool) -> Self {
        SmoothConstraints {
            dim,
            equalities,
            inequalities,
            convex,
            mfcq_cache: Arc::new(Mutex::new(BTreeMap::new())),
        }
    }

    pub fn active(&self, x: &[f64]) -> Vec<usize> {
        (0..self.inequalities.len())
            .filter(|&j| self.inequalities[j].eval(x).abs() <= ACTIVE_TOL)
            .collect()
    }

    /// Active inequalities with `<grad psi_j, v> = 0`.
    pub fn active_along(&self, x: &[f64], v: &[f64]) -> Vec<usize> {
        self.active(x)
            .into_iter()
            .filter(|&j| {
                let g = self.inequalities[j].gradient(x);
                dot(&g, v).abs() <= 1e-9 * (1.0 + norm(&g) * norm(v))
            })
            .collect()
    }

    fn contains(&self, x: &[f64], tol: f64) -> bool {
        self.equalities.iter().all(|c| c.eval(x).abs() <= tol)
            && self.inequalities.iter().all(|c| c.eval(x) <= tol)
    }

    /// Surjective equality Jacobian plus a strictly feasible direction for the
    /// active inequalities, decided by an LP and cached per point.
    pub fn mfcq_holds(&self, x: &[f64]) -> Result<bool> {
        let key: Vec<u64> = x.iter().map(|v| v.to_bits()).collect();
        if let Some(v) = self.mfcq_cache.lock().expect("cache lock").get(&key) {
            return Ok(*v);
        }
        let n = self.dim;
        let eq: Vec<Vec<f64>> = self.equalities.iter().map(|c| c.gradient(x)).collect();
        let ok = if linalg::rank(&eq, n, 1e-10) < eq.len() {
            false
        } else {
            let active = self.active(x);
            if active.is_empty() {
                true
            } else {
                let mut sys = LinearSystem::default();
                for g in &eq {
                    let mut row = g.clone();
                    row.push(0.0);
                    sys.eq.push((row, 0.0));
                }
                for &j in &active {
                    let mut row = self.inequalities[j].gradient(x);
                    row.push(1.0);
                    sys.ineq.push((row, 0.0));
                }
                let mut c = vec![0.0; n + 1];
                c[n] = 1.0;
                let mut lo = vec![-1.0; n + 1];
                let mut hi = vec![1.0; n + 1];
                lo[n] = f64::NEG_INFINITY;
                hi[n] = 1.0;
                match lp_maximize(&c, &sys, &lo, &hi)? {
                    LpOutcome::Optimal { value, .. } => value > 1e-9,
                    _ => false,
                }
            }
        };
        self.mfcq_cache.lock().expect("cache lock").insert(key, ok);
        Ok(ok)
    }
}

/// Declarative description of a closed set `U` or `K`.
#[derive(Clone, Debug)]
pub enum ConeDescriptor {
    /// Coordinate box; bounds may be infinite and sides may be degenerate.
    Box { lower: Vec<f64>, upper: Vec<f64> },
    Ball { center: Vec<f64>, radius: f64 },
    Singleton { point: Vec<f64> },
    /// The closed convex cone `cone(generators) + span(lineality)`.
    ConvexHullCone {
        generators: Vec<Vec<f64>>,
        lineality: Vec<Vec<f64>>,
    },
    Smooth(SmoothConstraints),
    Union(Vec<ConeDescriptor>),
}

/// One convex piece of a (possibly nonconvex) tangent set.
#[derive(Clone, Debug, Serialize)]
pub enum TangentPiece {
    /// `{v | a.v = b for eq, a.v <= b for ineq}`.
    Polyhedral {
        eq: Vec<(Vec<f64>, f64)>,
        ineq: Vec<(Vec<f64>, f64)>,
    },
    /// `cone(generators) + span(lineality)`.
    Generated {
        generators: Vec<Vec<f64>>,
        lineality: Vec<Vec<f64>>,
    },
}

/// First-order (adjacent cone) or second-order adjacent set at `base`,
/// represented as a finite union of convex pieces.
#[derive(Clone, Debug, Serialize)]
pub struct TangentSet {
    pub dim: usize,
    pub base: Vec<f64>,
    pub order: u8,
    pub direction: Option<Vec<f64>>,
    pub pieces: Vec<TangentPiece>,
}

#[derive(Clone, Debug, Serialize)]
pub struct DistanceResult {
    pub distance: f64,
    pub nearest: Vec<f64>,
    pub approximate: bool,
}

/// Outcome of a normal cone membership query.
#[derive(Clone, Debug, Serialize)]
pub struct NormalVerdict {
    pub member: bool,
    /// `max <xi, v>` over the tangent set intersected with the unit box.
    pub value: f64,
    pub maximizer: Vec<f64>,
    /// Per polyhedral piece: `(mu, lambda)` multipliers of the acceptance certificate.
    pub multipliers: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SecondOrderNormalVerdict {
    pub member: bool,
    pub sampled: bool,
    pub value: f64,
    pub witness: Option<(Vec<f64>, Vec<f64>)>,
    pub directions_checked: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpBest {
    Empty,
    Unbounded,
    Optimal { value: f64, x: Vec<f64> },
}

fn piece_violation(piece: &TangentPiece, v: &[f64]) -> f64 {
    match piece {
        TangentPiece::Polyhedral { eq, ineq } => {
            let mut worst: f64 = 0.0;
            for (a, b) in eq {
                let s = norm(a).max(1e-300);
                worst = worst.max((dot(a, v) - b).abs() / s);
            }
            for (a, b) in ineq {
                let s = norm(a).max(1e-300);
                worst = worst.max((dot(a, v) - b).max(0.0) / s);
            }
            worst
        }
        TangentPiece::Generated { .. } => piece_distance(piece, v).0,
    }
}

fn generated_matrix(dim: usize, generators: &[Vec<f64>], lineality: &[Vec<f64>]) -> DMatrix<f64> {
    let cols = generators.len() + 2 * lineality.len();
    let mut a = DMatrix::<f64>::zeros(dim, cols);
    for (j, g) in generators.iter().enumerate() {
        for i in 0..dim {
            a[(i, j)] = g[i];
        }
    }
    for (j, l) in lineality.iter().enumerate() {
        let c = generators.len() + 2 * j;
        for i in 0..dim {
            a[(i, c)] = l[i];
            a[(i, c + 1)] = -l[i];
        }
    }
    a
}

fn project_generated(dim: usize, generators: &[Vec<f64>], lineality: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    if generators.is_empty() && lineality.is_empty() {
        return vec![0.0; dim];
    }
    let a = generated_matrix(dim, generators, lineality);
    let b = DVector::from_column_slice(v);
    let x = linalg::nnls(&a, &b);
    (a * x).iter().cloned().collect()
}

/// Euclidean projection onto a convex piece; Dykstra's algorithm for polyhedra.
fn piece_distance(piece: &TangentPiece, v: &[f64]) -> (f64, Vec<f64>) {
    let dim = v.len();
    match piece {
        TangentPiece::Generated { generators, lineality } => {
            let p = project_generated(dim, generators, lineality, v);
            (norm(&linalg::sub(v, &p)), p)
        }
        TangentPiece::Polyhedral { eq, ineq } => {
            let sets: Vec<(&Vec<f64>, f64, bool)> = eq
                .iter()
                .map(|(a, b)| (a, *b, true))
                .chain(ineq.iter().map(|(a, b)| (a, *b, false)))
                .filter(|(a, _, _)| norm(a) > 0.0)
                .collect();
            let mut x = v.to_vec();
            let mut incr = vec![vec![0.0; dim]; sets.len()];
            for _ in 0..20000 {
                let prev = x.clone();
                for (s, (a, b, is_eq)) in sets.iter().enumerate() {
                    let y: Vec<f64> = (0..dim).map(|i| x[i] + incr[s][i]).collect();
                    let aa = dot(a, a);
                    let r = dot(a, &y) - b;
                    let shift = if *is_eq || r > 0.0 { r / aa } else { 0.0 };
                    let z: Vec<f64> = (0..dim).map(|i| y[i] - shift * a[i]).collect();
                    for i in 0..dim {
                        incr[s][i] = y[i] - z[i];
                    }
                    x = z;
                }
                if linalg::max_abs_diff(&x, &prev) < 1e-15 {
                    break;
                }
            }
            (norm(&linalg::sub(v, &x)), x)
        }
    }
}

fn piece_lp(piece: &TangentPiece, c: &[f64], radius: f64) -> Result<LpBest> {
    let dim = c.len();
    match piece {
        TangentPiece::Polyhedral { eq, ineq } => {
            let sys = LinearSystem {
                eq: eq.clone(),
                ineq: ineq.clone(),
            };
            let lo = vec![-radius; dim];
            let hi = vec![radius; dim];
            Ok(match lp_maximize(c, &sys, &lo, &hi)? {
                LpOutcome::Optimal { x, value } => LpBest::Optimal { x, value },
                LpOutcome::Unbounded => LpBest::Unbounded,
                LpOutcome::Infeasible => LpBest::Empty,
            })
        }
        TangentPiece::Generated { generators, lineality } => {
            // Variables: v (dim), alpha (>= 0), beta (free).
            let (ng, nl) = (generators.len(), lineality.len());
            let nv = dim + ng + nl;
            let mut obj = vec![0.0; nv];
            obj[..dim].copy_from_slice(c);
            let mut sys = LinearSystem::default();
            for i in 0..dim {
                let mut row = vec![0.0; nv];
                row[i] = 1.0;
                for (j, g) in generators.iter().enumerate() {
                    row[dim + j] = -g[i];
                }
                for (j, l) in lineality.iter().enumerate() {
                    row[dim + ng + j] = -l[i];
                }
                sys.eq.push((row, 0.0));
            }
            let mut lo = vec![-radius; nv];
            let mut hi = vec![radius; nv];
            for j in 0..ng {
                lo[dim + j] = 0.0;
                hi[dim + j] = f64::INFINITY;
            }
            for j in 0..nl {
                lo[dim + ng + j] = f64::NEG_INFINITY;
                hi[dim + ng + j] = f64::INFINITY;
            }
            Ok(match lp_maximize(&obj, &sys, &lo, &hi)? {
                LpOutcome::Optimal { x, value } => LpBest::Optimal {
                    x: x[..dim].to_vec(),
                    value,
                },
                LpOutcome::Unbounded => LpBest::Unbounded,
                LpOutcome::Infeasible => LpBest::Empty,
            })
        }
    }
}

impl TangentSet {
    /// Distance-free violation measure: zero iff `v` lies in some piece.
    pub fn violation(&self, v: &[f64]) -> f64 {
        self.pieces
            .iter()
            .map(|p| piece_violation(p, v))
            .fold(f64::INFINITY, f64::min)
    }

    pub fn contains(&self, v: &[f64], tol: f64) -> bool {
        self.violation(v) <= tol * (1.0 + norm(v))
    }

    /// Euclidean distance from `v` to the set.
    pub fn distance(&self, v: &[f64]) -> f64 {
        self.pieces
            .iter()
            .map(|p| piece_distance(p, v).0)
            .fold(f64::INFINITY, f64::min)
    }

    pub fn is_empty(&self) -> Result<bool> {
        let zero = vec![0.0; self.dim];
        Ok(matches!(self.lp_maximize(&zero, f64::INFINITY)?, LpBest::Empty))
    }

    /// `sup <c, v>` over the set intersected with the box of half-width `radius`.
    pub fn lp_maximize(&self, c: &[f64], radius: f64) -> Result<LpBest> {
        let mut best = LpBest::Empty;
        for p in &self.pieces {
            match piece_lp(p, c, radius)? {
                LpBest::Empty => {}
                LpBest::Unbounded => return Ok(LpBest::Unbounded),
                LpBest::Optimal { value, x } => {
                    let better = match &best {
                        LpBest::Optimal { value: bv, .. } => value > *bv + 1e-13,
                        _ => true,
                    };
                    if better {
                        best = LpBest::Optimal { value, x };
                    }
                }
            }
        }
        Ok(best)
    }

    /// Maximizer of `<c, h> - delta |h|_1` within the box, preferring short vectors
    /// among near-ties.
    pub fn lp_maximize_sparse(&self, c: &[f64], radius: f64, delta: f64) -> Result<LpBest> {
        let dim = self.dim;
        let mut best = LpBest::Empty;
        for piece in &self.pieces {
            let outcome = match piece {
                TangentPiece::Polyhedral { eq, ineq } => {
                    // h = p - q with p, q in [0, radius].
                    let lift = |a: &Vec<f64>| -> Vec<f64> { a.iter().cloned().chain(a.iter().map(|x| -x)).collect() };
                    let sys = LinearSystem {
                        eq: eq.iter().map(|(a, b)| (lift(a), *b)).collect(),
                        ineq: ineq.iter().map(|(a, b)| (lift(a), *b)).collect(),
                    };
                    let obj: Vec<f64> = c
                        .iter()
                        .map(|x| x - delta)
                        .chain(c.iter().map(|x| -x - delta))
                        .collect();
                    match lp_maximize(&obj, &sys, &vec![0.0; 2 * dim], &vec![radius; 2 * dim])? {
                        LpOutcome::Optimal { x, .. } => {
                            let h: Vec<f64> = (0..dim).map(|i| x[i] - x[dim + i]).collect();
                            LpBest::Optimal { value: dot(c, &h), x: h }
                        }
                        LpOutcome::Unbounded => LpBest::Unbounded,
                        LpOutcome::Infeasible => LpBest::Empty,
                    }
                }
                TangentPiece::Generated { .. } => piece_lp(piece, c, radius)?,
            };
            match outcome {
                LpBest::Empty => {}
                LpBest::Unbounded => return Ok(LpBest::Unbounded),
                LpBest::Optimal { value, x } => {
                    let better = match &best {
                        LpBest::Optimal { value: bv, x: bx } => {
                            value > *bv + 1e-12 || (value > *bv - 1e-12 && linalg::norm1(&x) < linalg::norm1(bx))
                        }
                        _ => true,
                    };
                    if better {
                        best = LpBest::Optimal { value, x };
                    }
                }
            }
        }
        Ok(best)
    }

    /// Deterministic unit directions in the set (order-1 sets only): a mesh on
    /// the unit sphere of each piece plus its boundary rays.
    pub fn sample_directions(&self, mesh: usize) -> Vec<Vec<f64>> {
        let zero = vec![0.0; self.dim];
        let mut out: Vec<Vec<f64>> = Vec::new();
        for p in &self.pieces {
            for d in face_directions(p, &zero, mesh).0 {
                push_unique(&mut out, d);
            }
        }
        out
    }
}

fn push_unique(out: &mut Vec<Vec<f64>>, d: Vec<f64>) {
    if !out.iter().any(|o| linalg::max_abs_diff(o, &d) < 1e-12) {
        out.push(d);
    }
}

fn normalize(v: &[f64]) -> Option<Vec<f64>> {
    let s = norm(v);
    if s < 1e-12 {
        None
    } else {
        Some(v.iter().map(|x| x / s).collect())
    }
}

/// Unit vectors on a deterministic mesh of the sphere in `R^dim`.
pub fn direction_mesh(dim: usize, count: usize) -> Vec<Vec<f64>> {
    match dim {
        0 => vec![],
        1 => vec![vec![1.0], vec![-1.0]],
        2 => (0..count)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / count as f64;
                let (s, c) = th.sin_cos();
                let clean = |x: f64| if x.abs() < 1e-15 { 0.0 } else { x };
                vec![clean(c), clean(s)]
            })
            .collect(),
        _ => {
            let mut out = Vec::new();
            for i in 0..dim {
                for s in [1.0, -1.0] {
                    let mut e = vec![0.0; dim];
                    e[i] = s;
                    out.push(e);
                }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
            while out.len() < count.max(2 * dim) {
                let g: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                if let Some(u) = normalize(&g) {
                    out.push(u);
                }
            }
            out
        }
    }
}

/// Unit directions of `piece ∩ xi^perp`; the flag is true when the face has
/// dimension two or more (so the mesh is a sample rather than exhaustive).
fn face_directions(piece: &TangentPiece, xi: &[f64], mesh: usize) -> (Vec<Vec<f64>>, bool) {
    let dim = xi.len();
    let xi_zero = norm(xi) == 0.0;
    match piece {
        TangentPiece::Polyhedral { eq, ineq } => {
            let mut rows: Vec<Vec<f64>> = eq.iter().map(|(a, _)| a.clone()).collect();
            if !xi_zero {
                rows.push(xi.to_vec());
            }
            let basis = linalg::null_space(&rows, dim, 1e-10);
            let d = basis.len();
            let lift = |w: &[f64]| -> Vec<f64> {
                let mut v = vec![0.0; dim];
                for (k, b) in basis.iter().enumerate() {
                    linalg::axpy(w[k], b, &mut v);
                }
                v
            };
            let feasible = |v: &[f64]| ineq.iter().all(|(a, b)| dot(a, v) - b <= 1e-10);
            let mut cands: Vec<Vec<f64>> = Vec::new();
            if d == 0 {
                return (vec![], false);
            }
            // Mesh in the original coordinates when the face is the whole space,
            // so axis-aligned directions appear exactly.
            if d == dim {
                cands.extend(direction_mesh(dim, mesh));
            } else {
                for w in direction_mesh(d, mesh) {
                    if let Some(v) = normalize(&lift(&w)) {
                        cands.push(v);
                    }
                }
            }
            if d == 2 {
                for (a, _) in ineq {
                    let r: Vec<f64> = basis.iter().map(|b| dot(a, b)).collect();
                    for s in [1.0, -1.0] {
                        if let Some(v) = normalize(&lift(&[-s * r[1], s * r[0]])) {
                            cands.push(v);
                        }
                    }
                }
            }
            let mut out = Vec::new();
            for v in cands {
                if feasible(&v) {
                    push_unique(&mut out, v);
                }
            }
            (out, d >= 2)
        }
        TangentPiece::Generated { generators, lineality } => {
            let mut face: Vec<Vec<f64>> = generators
                .iter()
                .filter(|g| xi_zero || dot(g, xi).abs() <= 1e-10 * (1.0 + norm(g)))
                .cloned()
                .collect();
            for l in lineality {
                face.push(l.clone());
                face.push(l.iter().map(|x| -x).collect());
            }
            let mut out = Vec::new();
            for g in &face {
                if let Some(u) = normalize(g) {
                    push_unique(&mut out, u);
                }
            }
            let steps = (mesh / 8).max(2);
            for i in 0..face.len() {
                for j in (i + 1)..face.len() {
                    for k in 1..steps {
                        let a = k as f64 / steps as f64;
                        let c: Vec<f64> = (0..dim).map(|r| a * face[i][r] + (1.0 - a) * face[j][r]).collect();
                        if let Some(u) = normalize(&c) {
                            push_unique(&mut out, u);
                        }
                    }
                }
            }
            let sampled = linalg::rank(&face, dim, 1e-10) >= 2;
            (out, sampled)
        }
    }
}

fn unit_rows(dim: usize) -> Vec<(Vec<f64>, f64)> {
    (0..dim)
        .map(|i| {
            let mut e = vec![0.0; dim];
            e[i] = 1.0;
            (e, 0.0)
        })
        .collect()
}

impl ConeDescriptor {
    pub fn unit_box(dim: usize) -> Self {
        ConeDescriptor::Box {
            lower: vec![-1.0; dim],
            upper: vec![1.0; dim],
        }
    }

    pub fn free(dim: usize) -> Self {
        ConeDescriptor::Box {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            ConeDescriptor::Box { lower, .. } => lower.len(),
            ConeDescriptor::Ball { center, .. } => center.len(),
            ConeDescriptor::Singleton { point } => point.len(),
            ConeDescriptor::ConvexHullCone { generators, lineality } => generators
                .first()
                .or(lineality.first())
                .map(|g| g.len())
                .unwrap_or(0),
            ConeDescriptor::Smooth(s) => s.dim,
            ConeDescriptor::Union(m) => m.first().map(|d| d.dim()).unwrap_or(0),
        }
    }

    pub fn is_convex(&self) -> bool {
        match self {
            ConeDescriptor::Smooth(s) => s.convex,
            ConeDescriptor::Union(m) => m.len() == 1 && m[0].is_convex(),
            _ => true,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ConeDescriptor::Box { .. } => "box",
            ConeDescriptor::Ball { .. } => "ball",
            ConeDescriptor::Singleton { .. } => "singleton",
            ConeDescriptor::ConvexHullCone { .. } => "convex_hull_cone",
            ConeDescriptor::Smooth(_) => "smooth_constraints",
            ConeDescriptor::Union(_) => "finite_union",
        }
    }

    /// Bounding box used for derivative probes; unbounded sides are clipped to `[-2, 2]`.
    pub fn bounding_box(&self, dim: usize) -> (Vec<f64>, Vec<f64>) {
        let clip = |lo: f64, hi: f64| (lo.max(-2.0), hi.min(2.0));
        match self {
            ConeDescriptor::Box { lower, upper } => {
                let (lo, hi): (Vec<f64>, Vec<f64>) = lower.iter().zip(upper).map(|(l, u)| clip(*l, *u)).unzip();
                (lo, hi)
            }
            ConeDescriptor::Ball { center, radius } => (
                center.iter().map(|c| c - radius).collect(),
                center.iter().map(|c| c + radius).collect(),
            ),
            ConeDescriptor::Singleton { point } => (point.clone(), point.clone()),
            ConeDescriptor::Union(m) if !m.is_empty() => {
                let mut lo = vec![f64::INFINITY; dim];
                let mut hi = vec![f64::NEG_INFINITY; dim];
                for d in m {
                    let (l, h) = d.bounding_box(dim);
                    for i in 0..dim {
                        lo[i] = lo[i].min(l[i]);
                        hi[i] = hi[i].max(h[i]);
                    }
                }
                (lo, hi)
            }
            _ => (vec![-2.0; dim], vec![2.0; dim]),
        }
    }

    pub fn contains(&self, x: &[f64], tol: f64) -> bool {
        match self {
            ConeDescriptor::Smooth(s) => s.contains(x, tol),
            ConeDescriptor::Union(m) => m.iter().any(|d| d.contains(x, tol)),
            _ => self.distance(x).distance <= tol,
        }
    }

    /// Distance to the set and a nearest point. Exact for boxes, balls,
    /// singletons, cones and unions of these; a multi-start KKT solve for smooth
    /// constraints (flagged approximate).
    pub fn distance(&self, y: &[f64]) -> DistanceResult {
        match self {
            ConeDescriptor::Box { lower, upper } => {
                let nearest: Vec<f64> = (0..y.len()).map(|i| y[i].max(lower[i]).min(upper[i])).collect();
                DistanceResult {
                    distance: norm(&linalg::sub(y, &nearest)),
                    nearest,
                    approximate: false,
                }
            }
            ConeDescriptor::Ball { center, radius } => {
                let d = linalg::sub(y, center);
                let r = norm(&d);
                if r <= *radius {
                    DistanceResult {
                        distance: 0.0,
                        nearest: y.to_vec(),
                        approximate: false,
                    }
                } else {
                    let nearest: Vec<f64> = (0..y.len()).map(|i| center[i] + radius * d[i] / r).collect();
                    DistanceResult {
                        distance: r - radius,
                        nearest,
                        approximate: false,
                    }
                }
            }
            ConeDescriptor::Singleton { point } => DistanceResult {
                distance: norm(&linalg::sub(y, point)),
                nearest: point.clone(),
                approximate: false,
            },
            ConeDescriptor::ConvexHullCone { generators, lineality } => {
                let p = project_generated(y.len(), generators, lineality, y);
                DistanceResult {
                    distance: norm(&linalg::sub(y, &p)),
                    nearest: p,
                    approximate: false,
                }
            }
            ConeDescriptor::Smooth(s) => smooth_projection(s, y),
            ConeDescriptor::Union(members) => {
                let mut best: Option<DistanceResult> = None;
                let mut approx = false;
                for d in members {
                    let r = d.distance(y);
                    approx |= r.approximate;
                    if best.as_ref().map_or(true, |b| r.distance < b.distance) {
                        best = Some(r);
                    }
                }
                let mut b = best.unwrap_or(DistanceResult {
                    distance: f64::INFINITY,
                    nearest: y.to_vec(),
                    approximate: false,
                });
                b.approximate = approx;
                b
            }
        }
    }

    fn require_member(&self, x: &[f64]) -> Result<()> {
        if self.contains(x, MEMBER_TOL) {
            Ok(())
        } else {
            Err(Error::NotMember {
                distance: self.distance(x).distance,
            })
        }
    }

    /// The adjacent cone at `x`.
    pub fn adjacent_cone(&self, x: &[f64]) -> Result<TangentSet> {
        self.require_member(x)?;
        let dim = x.len();
        let pieces = match self {
            ConeDescriptor::Box { lower, upper } => {
                let mut eq = Vec::new();
                let mut ineq = Vec::new();
                for i in 0..dim {
                    let mut e = vec![0.0; dim];
                    e[i] = 1.0;
                    if upper[i] - lower[i] <= MEMBER_TOL {
                        eq.push((e, 0.0));
                    } else if (x[i] - lower[i]).abs() <= MEMBER_TOL {
                        ineq.push((e.iter().map(|v| -v).collect(), 0.0));
                    } else if (x[i] - upper[i]).abs() <= MEMBER_TOL {
                        ineq.push((e, 0.0));
                    }
                }
                vec![TangentPiece::Polyhedral { eq, ineq }]
            }
            ConeDescriptor::Ball { center, radius } => {
                if *radius <= 0.0 {
                    vec![TangentPiece::Polyhedral {
                        eq: unit_rows(dim),
                        ineq: vec![],
                    }]
                } else {
                    let d = linalg::sub(x, center);
                    let ineq = if norm(&d) >= radius - MEMBER_TOL {
                        vec![(d.iter().map(|v| v / radius).collect(), 0.0)]
                    } else {
                        vec![]
                    };
                    vec![TangentPiece::Polyhedral { eq: vec![], ineq }]
                }
            }
            ConeDescriptor::Singleton { .. } => vec![TangentPiece::Polyhedral {
                eq: unit_rows(dim),
                ineq: vec![],
            }],
            ConeDescriptor::ConvexHullCone { generators, lineality } => {
                let mut gens = generators.clone();
                if norm(x) > 0.0 {
                    gens.push(x.iter().map(|v| -v).collect());
                }
                vec![TangentPiece::Generated {
                    generators: gens,
                    lineality: lineality.clone(),
                }]
            }
            ConeDescriptor::Smooth(s) => {
                if !s.mfcq_holds(x)? {
                    return Err(Error::MfcqFails);
                }
                let eq = s.equalities.iter().map(|c| (c.gradient(x), 0.0)).collect();
                let ineq = s
                    .active(x)
                    .into_iter()
                    .map(|j| (s.inequalities[j].gradient(x), 0.0))
                    .collect();
                vec![TangentPiece::Polyhedral { eq, ineq }]
            }
            ConeDescriptor::Union(members) => {
                let mut pieces = Vec::new();
                for d in members {
                    if d.contains(x, MEMBER_TOL) {
                        pieces.extend(d.adjacent_cone(x)?.pieces);
                    }
                }
                pieces
            }
        };
        Ok(TangentSet {
            dim,
            base: x.to_vec(),
            order: 1,
            direction: None,
            pieces,
        })
    }

    /// The second-order adjacent set at `x` along the tangent direction `v`.
    pub fn second_order_adjacent(&self, x: &[f64], v: &[f64]) -> Result<TangentSet> {
        let first = self.adjacent_cone(x)?;
        if !first.contains(v, 1e-9) {
            return Err(Error::NotTangent {
                violation: first.violation(v),
            });
        }
        let dim = x.len();
        let vv = dot(v, v);
        let pieces = match self {
            ConeDescriptor::Box { lower, upper } => {
                let mut eq = Vec::new();
                let mut ineq = Vec::new();
                for i in 0..dim {
                    let mut e = vec![0.0; dim];
                    e[i] = 1.0;
                    let flat = v[i].abs() <= 1e-9 * (1.0 + norm(v));
                    if upper[i] - lower[i] <= MEMBER_TOL {
                        eq.push((e, 0.0));
                    } else if flat && (x[i] - lower[i]).abs() <= MEMBER_TOL {
                        ineq.push((e.iter().map(|c| -c).collect(), 0.0));
                    } else if flat && (x[i] - upper[i]).abs() <= MEMBER_TOL {
                        ineq.push((e, 0.0));
                    }
                }
                vec![TangentPiece::Polyhedral { eq, ineq }]
            }
            ConeDescriptor::Ball { center, radius } => {
                if *radius <= 0.0 {
                    vec![TangentPiece::Polyhedral {
                        eq: unit_rows(dim),
                        ineq: vec![],
                    }]
                } else {
                    let d = linalg::sub(x, center);
                    let on_boundary = norm(&d) >= radius - MEMBER_TOL;
                    let flat = dot(&d, v).abs() <= 1e-9 * (1.0 + norm(&d) * norm(v));
                    let ineq = if on_boundary && flat {
                        // <2(x-c), h> + |v|^2 <= 0, scaled by 1/(2r).
                        vec![(d.iter().map(|c| c / radius).collect(), -vv / (2.0 * radius))]
                    } else {
                        vec![]
                    };
                    vec![TangentPiece::Polyhedral { eq: vec![], ineq }]
                }
            }
            ConeDescriptor::Singleton { .. } => vec![TangentPiece::Polyhedral {
                eq: unit_rows(dim),
                ineq: vec![],
            }],
            ConeDescriptor::ConvexHullCone { generators, lineality } => {
                let mut gens = generators.clone();
                if norm(x) > 0.0 {
                    gens.push(x.iter().map(|c| -c).collect());
                }
                let mut lin = lineality.clone();
                if norm(v) > 0.0 {
                    lin.push(v.to_vec());
                }
                vec![TangentPiece::Generated {
                    generators: gens,
                    lineality: lin,
                }]
            }
            ConeDescriptor::Smooth(s) => {
                let eq = s
                    .equalities
                    .iter()
                    .map(|c| (c.gradient(x), -0.5 * c.quad(x, v)))
                    .collect();
                let ineq = s
                    .active_along(x, v)
                    .into_iter()
                    .map(|j| {
                        let c = &s.inequalities[j];
                        (c.gradient(x), -0.5 * c.quad(x, v))
                    })
                    .collect();
                vec![TangentPiece::Polyhedral { eq, ineq }]
            }
            ConeDescriptor::Union(members) => {
                let mut pieces = Vec::new();
                for d in members {
                    if !d.contains(x, MEMBER_TOL) {
                        continue;
                    }
                    if d.adjacent_cone(x)?.contains(v, 1e-9) {
                        pieces.extend(d.second_order_adjacent(x, v)?.pieces);
                    }
                }
                pieces
            }
        };
        Ok(TangentSet {
            dim,
            base: x.to_vec(),
            order: 2,
            direction: Some(v.to_vec()),
            pieces,
        })
    }

    /// `xi` belongs to the normal cone iff `<xi, v> <= 0` on the adjacent cone;
    /// decided by an LP over the tangent pieces intersected with the unit box.
    pub fn normal_cone_membership(&self, x: &[f64], xi: &[f64]) -> Result<NormalVerdict> {
        let t = self.adjacent_cone(x)?;
        let tol = 1e-9 * (1.0 + norm(xi));
        let mut value = f64::NEG_INFINITY;
        let mut maximizer = vec![0.0; x.len()];
        for p in &t.pieces {
            match piece_lp(p, xi, 1.0)? {
                LpBest::Optimal { value: v, x: arg } => {
                    if v > value {
                        value = v;
                        maximizer = arg;
                    }
                }
                LpBest::Unbounded => {
                    return Err(Error::LpFailure("unbounded LP over a boxed tangent piece".into()))
                }
                LpBest::Empty => {}
            }
        }
        if value == f64::NEG_INFINITY {
            value = 0.0;
        }
        let member = value <= tol;
        let mut multipliers = Vec::new();
        if member {
            for p in &t.pieces {
                if let TangentPiece::Polyhedral { eq, ineq } = p {
                    multipliers.push(polyhedral_multipliers(eq, ineq, xi));
                }
            }
            maximizer = vec![0.0; x.len()];
            value = value.max(0.0);
        }
        Ok(NormalVerdict {
            member,
            value,
            maximizer,
            multipliers,
        })
    }

    /// Sampled test of `<xi, h> + <Z v, v>/2 <= 0` for `v` in the adjacent cone
    /// orthogonal to `xi` and `h` in the second-order adjacent set. Rejections are
    /// certified by the returned witness; acceptance is over the sampled mesh.
    pub fn second_order_normal_membership(
        &self,
        x: &[f64],
        xi: &[f64],
        z: &[f64],
        mesh: usize,
    ) -> Result<SecondOrderNormalVerdict> {
        let first = self.normal_cone_membership(x, xi)?;
        if !first.member {
            return Err(Error::NotNormal { value: first.value });
        }
        let n = x.len();
        let t = self.adjacent_cone(x)?;
        let mut dirs: Vec<Vec<f64>> = Vec::new();
        let mut sampled = false;
        for p in &t.pieces {
            let (d, s) = face_directions(p, xi, mesh);
            sampled |= s;
            for v in d {
                push_unique(&mut dirs, v);
            }
        }
        let tol = 1e-9 * (1.0 + norm(xi) + z.iter().map(|a| a.abs()).fold(0.0, f64::max));
        let mut worst = f64::NEG_INFINITY;
        let mut witness = None;
        let mut checked = 0;
        for v in &dirs {
            let t2 = match self.second_order_adjacent(x, v) {
                Ok(t2) => t2,
                Err(Error::NotTangent { .. }) => continue,
                Err(e) => return Err(e),
            };
            checked += 1;
            let quad = 0.5 * linalg::bilinear(z, n, n, v, v);
            let (sup, h) = match t2.lp_maximize(xi, f64::INFINITY)? {
                LpBest::Empty => continue,
                LpBest::Unbounded => {
                    let h = match t2.lp_maximize(xi, 1e3)? {
                        LpBest::Optimal { x, .. } => x,
                        _ => vec![0.0; n],
                    };
                    (f64::INFINITY, h)
                }
                LpBest::Optimal { value, x } => (value, x),
            };
            let total = sup + quad;
            if total > worst {
                worst = total;
                if total > tol {
                    witness = Some((v.clone(), h));
                }
            }
        }
        if worst == f64::NEG_INFINITY {
            worst = 0.0;
        }
        Ok(SecondOrderNormalVerdict {
            member: witness.is_none(),
            sampled,
            value: worst,
            witness,
            directions_checked: checked,
        })
    }
}

/// Nonnegative least-squares certificate `xi = A_eq^T mu + A_in^T lambda`, `lambda >= 0`.
fn polyhedral_multipliers(eq: &[(Vec<f64>, f64)], ineq: &[(Vec<f64>, f64)], xi: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let dim = xi.len();
    let (p, r) = (eq.len(), ineq.len());
    if p + r == 0 {
        return (vec![], vec![]);
    }
    let mut a = DMatrix::<f64>::zeros(dim, 2 * p + r);
    for (j, (row, _)) in eq.iter().enumerate() {
        for i in 0..dim {
            a[(i, 2 * j)] = row[i];
            a[(i, 2 * j + 1)] = -row[i];
        }
    }
    for (j, (row, _)) in ineq.iter().enumerate() {
        for i in 0..dim {
            a[(i, 2 * p + j)] = row[i];
        }
    }
    let sol = linalg::nnls(&a, &DVector::from_column_slice(xi));
    let mu = (0..p).map(|j| sol[2 * j] - sol[2 * j + 1]).collect();
    let lambda = (0..r).map(|j| sol[2 * p + j]).collect();
    (mu, lambda)
}

fn smooth_projection(s: &SmoothConstraints, y: &[f64]) -> DistanceResult {
    let n = s.dim;
    if s.contains(y, 1e-12) {
        return DistanceResult {
            distance: 0.0,
            nearest: y.to_vec(),
            approximate: true,
        };
    }
    let all: Vec<&Constraint> = s.equalities.iter().chain(s.inequalities.iter()).collect();
    let p = s.equalities.len();
    let total = all.len().min(12);
    let mut starts = vec![y.to_vec()];
    for d in direction_mesh(n, 8) {
        for r in [0.5, 1.5] {
            starts.push((0..n).map(|i| y[i] + r * d[i]).collect());
        }
    }
    let mut best: Option<(f64, Vec<f64>)> = None;
    for mask in 0u32..(1u32 << total) {
        let subset: Vec<usize> = (0..total).filter(|i| mask & (1 << i) != 0).collect();
        if subset.len() > n || (0..p).any(|i| !subset.contains(&i)) || subset.is_empty() {
            continue;
        }
        for z0 in &starts {
            if let Some((z, lam)) = kkt_newton(&all, &subset, y, z0) {
                if !s.contains(&z, 1e-9) {
                    continue;
                }
                if subset.iter().zip(&lam).any(|(&i, l)| i >= p && *l < -1e-8) {
                    continue;
                }
                let d = norm(&linalg::sub(&z, y));
                if best.as_ref().map_or(true, |b| d < b.0) {
                    best = Some((d, z));
                }
            }
        }
    }
    match best {
        Some((distance, nearest)) => DistanceResult {
            distance,
            nearest,
            approximate: true,
        },
        None => DistanceResult {
            distance: f64::INFINITY,
            nearest: y.to_vec(),
            approximate: true,
        },
    }
}

/// Newton's method on the Lagrange system of `min |z - y|^2/2` subject to
/// `c_i(z) = 0` for `i` in `subset`.
fn kkt_newton(all: &[&Constraint], subset: &[usize], y: &[f64], z0: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
    let n = y.len();
    let k = subset.len();
    let mut z = z0.to_vec();
    let mut lam = vec![0.0; k];
    let residual = |z: &[f64], lam: &[f64]| -> Vec<f64> {
        let mut r: Vec<f64> = (0..n).map(|i| z[i] - y[i]).collect();
        for (a, &i) in subset.iter().enumerate() {
            let g = all[i].gradient(z);
            linalg::axpy(lam[a], &g, &mut r);
        }
        for &i in subset {
            r.push(all[i].eval(z));
        }
        r
    };
    let mut r = residual(&z, &lam);
    for _ in 0..100 {
        let rn = norm(&r);
        if rn < 1e-13 {
            return Some((z, lam));
        }
        let mut j = DMatrix::<f64>::zeros(n + k, n + k);
        for i in 0..n {
            j[(i, i)] = 1.0;
        }
        for (a, &ci) in subset.iter().enumerate() {
            let h = all[ci].hessian(&z);
            let g = all[ci].gradient(&z);
            for i in 0..n {
                for l in 0..n {
                    j[(i, l)] += lam[a] * h[i * n + l];
                }
                j[(i, n + a)] = g[i];
                j[(n + a, i)] = g[i];
            }
        }
        let rhs = DVector::from_vec(r.iter().map(|v| -v).collect());
        let step = j.lu().solve(&rhs)?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let zt: Vec<f64> = (0..n).map(|i| z[i] + t * step[i]).collect();
            let lt: Vec<f64> = (0..k).map(|a| lam[a] + t * step[n + a]).collect();
            let rt = residual(&zt, &lt);
            if norm(&rt) < (1.0 - 1e-4 * t) * rn {
                z = zt;
                lam = lt;
                r = rt;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    if norm(&r) < 1e-10 {
        Some((z, lam))
    } else {
        None
    }
}

/// Pointwise Lagrange multipliers of `H_u` along a control path.
#[derive(Clone, Debug, Serialize)]
pub struct MultiplierPath {
    pub mu: Vec<Vec<f64>>,
    pub lambda: Vec<Vec<f64>>,
    pub active: Vec<Vec<usize>>,
    pub active_along: Vec<Vec<usize>>,
    pub max_residual: f64,
}

/// Per-node decomposition `H_u = sum mu_i grad phi_i + sum lambda_j grad psi_j`,
/// `lambda_j >= 0` supported on the inequalities active along `v`.
pub fn decompose_multipliers(
    s: &SmoothConstraints,
    controls: &[Vec<f64>],
    hu: &[Vec<f64>],
    directions: Option<&[Vec<f64>]>,
) -> Result<MultiplierPath> {
    let n = s.dim;
    let p = s.equalities.len();
    let r = s.inequalities.len();
    let mut out = MultiplierPath {
        mu: Vec::with_capacity(controls.len()),
        lambda: Vec::with_capacity(controls.len()),
        active: Vec::with_capacity(controls.len()),
        active_along: Vec::with_capacity(controls.len()),
        max_residual: 0.0,
    };
    for (k, u) in controls.iter().enumerate() {
        let active = s.active(u);
        let mut grads: Vec<Vec<f64>> = s.equalities.iter().map(|c| c.gradient(u)).collect();
        grads.extend(active.iter().map(|&j| s.inequalities[j].gradient(u)));
        if linalg::rank(&grads, n, 1e-10) < grads.len() {
            return Err(Error::LicqFails { step: k });
        }
        if !s.contains(u, MEMBER_TOL) {
            return Err(Error::NotMember {
                distance: smooth_projection(s, u).distance,
            });
        }
        let along = match directions {
            Some(v) => s.active_along(u, &v[k]),
            None => active.clone(),
        };
        let eq: Vec<(Vec<f64>, f64)> = grads[..p].iter().map(|g| (g.clone(), 0.0)).collect();
        let ineq: Vec<(Vec<f64>, f64)> = along.iter().map(|&j| (s.inequalities[j].gradient(u), 0.0)).collect();
        let (mu, lam_sub) = polyhedral_multipliers(&eq, &ineq, &hu[k]);
        let mut lambda = vec![0.0; r];
        for (a, &j) in along.iter().enumerate() {
            lambda[j] = lam_sub[a];
        }
        let mut recon = vec![0.0; n];
        for (i, g) in grads[..p].iter().enumerate() {
            linalg::axpy(mu[i], g, &mut recon);
        }
        for &j in &along {
            linalg::axpy(lambda[j], &s.inequalities[j].gradient(u), &mut recon);
        }
        let res = norm(&linalg::sub(&recon, &hu[k]));
        if res > 1e-6 * (1.0 + norm(&hu[k])) {
            return Err(Error::DecompositionResidual { step: k, residual: res });
        }
        out.max_residual = out.max_residual.max(res);
        out.mu.push(if p == 0 { vec![] } else { mu });
        out.lambda.push(lambda);
        out.active.push(active);
        out.active_along.push(along);
    }
    Ok(out)
}

/// `sum mu_i phi_i'' + sum lambda_j psi_j''` at `u`.
pub fn multiplier_hessian(s: &SmoothConstraints, u: &[f64], mu: &[f64], lambda: &[f64]) -> Vec<f64> {
    let n = s.dim;
    let mut q = vec![0.0; n * n];
    for (i, c) in s.equalities.iter().enumerate() {
        linalg::axpy(mu[i], &c.hessian(u), &mut q);
    }
    for (j, c) in s.inequalities.iter().enumerate() {
        if lambda[j] != 0.0 {
            linalg::axpy(lambda[j], &c.hessian(u), &mut q);
        }
    }
    q
}

/// Free-function forms mirroring the descriptor methods.
pub fn adjacent_cone(d: &ConeDescriptor, x: &[f64]) -> Result<TangentSet> {
    d.adjacent_cone(x)
}

pub fn second_order_adjacent(d: &ConeDescriptor, x: &[f64], v: &[f64]) -> Result<TangentSet> {
    d.second_order_adjacent(x, v)
}

pub fn normal_cone_membership(d: &ConeDescriptor, x: &[f64], xi: &[f64]) -> Result<NormalVerdict> {
    d.normal_cone_membership(x, xi)
}

pub fn second_order_normal_membership(
    d: &ConeDescriptor,
    x: &[f64],
    xi: &[f64],
    z: &[f64],
    mesh: usize,
) -> Result<SecondOrderNormalVerdict> {
    d.second_order_normal_membership(x, xi, z, mesh)
}

pub fn distance_oracle(d: &ConeDescriptor, y: &[f64]) -> DistanceResult {
    d.distance(y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cross() -> ConeDescriptor {
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

    #[test]
    fn cross_tangent_at_origin_is_two_axes() {
        let t = cross().adjacent_cone(&[0.0, 0.0]).unwrap();
        assert!(t.contains(&[1.0, 0.0], 1e-9));
        assert!(t.contains(&[0.0, -3.0], 1e-9));
        assert!(!t.contains(&[1.0, 1.0], 1e-9));
    }

    #[test]
    fn cross_tangent_at_corner() {
        let t = cross().adjacent_cone(&[1.0, 0.0]).unwrap();
        assert!(t.contains(&[-1.0, 0.0], 1e-9));
        assert!(!t.contains(&[1.0, 0.0], 1e-9));
        assert!(!t.contains(&[0.0, 1.0], 1e-9));
    }

    #[test]
    fn ball_distance() {
        let b = ConeDescriptor::Ball {
            center: vec![1.0, 0.0],
            radius: 1.0,
        };
        let d = b.distance(&[3.0, 0.0]);
        assert!((d.distance - 1.0).abs() < 1e-15);
        assert_eq!(d.nearest, vec![2.0, 0.0]);
    }

    #[test]
    fn not_member_is_reported() {
        let b = ConeDescriptor::unit_box(2);
        assert!(matches!(b.adjacent_cone(&[2.0, 0.0]), Err(Error::NotMember { .. })));
    }

    #[test]
    fn sphere_projection_is_radial() {
        let s = SmoothConstraints::new(2, vec![], vec![Constraint::sphere(&[0.0, 0.0], 1.0)], true);
        let d = ConeDescriptor::Smooth(s).distance(&[2.0, 2.0]);
        assert!((d.distance - (8f64.sqrt() - 1.0)).abs() < 1e-10);
        assert!(d.approximate);
    }

    #[test]
    fn generated_cone_lp() {
        let t = TangentSet {
            dim: 2,
            base: vec![0.0, 0.0],
            order: 1,
            direction: None,
            pieces: vec![TangentPiece::Generated {
                generators: vec![vec![0.0, 1.0], vec![1.0, 1.0]],
                lineality: vec![],
            }],
        };
        match t.lp_maximize(&[1.0, 0.0], 1.0).unwrap() {
            LpBest::Optimal { value, .. } => assert!((value - 1.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
        assert!(t.distance(&[1.0, 0.0]) > 0.7);
    }
}
