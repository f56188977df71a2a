//! First- and second-order necessary-condition checks along a candidate.
//!
//! Every integral check reads the same per-path quantities (the Hamiltonian
//! partials, `P2`, `S` and the first variation `y1`), so one streaming kernel
//! computes all integrands for a list of directions and the checks combine
//! them. A value counts as a violation only when it exceeds
//! `3 std_err + allowance`, where the allowance `4 |v_N - v_2N|` comes from a
//! second run on the refined grid driven by the same Brownian paths.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adjoint::{solve_adjoints, AdjointOptions, AdjointSolution, SolverMeta};
use crate::coeffs::NodeCoeffs;
use crate::cones::{decompose_multipliers, multiplier_hessian, ConeDescriptor, LpBest, SmoothConstraints, TangentSet};
use crate::error::{Error, Result};
use crate::linalg::{self, bilinear, dot};
use crate::problem::{CandidateControl, ConstraintSpec, ControlLaw, ControlProblem};
use crate::sde::{simulate_path, BrownianBundle, Estimate, PathBuffers, TimeGrid};
use crate::variational::{direction_values, VariationDirection};

/// Identifier of a check, serialized with its stable report name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ConditionId {
    #[serde(rename = "T3.1-integral")]
    FirstIntegral,
    #[serde(rename = "T3.1-transversality")]
    FirstTransversality,
    #[serde(rename = "T3.2-pointwise")]
    FirstPointwise,
    #[serde(rename = "T4.1-integral")]
    SecondIntegral,
    #[serde(rename = "T4.1-transversality")]
    SecondTransversality,
    #[serde(rename = "C4.1-mixed")]
    MixedConstraint,
    #[serde(rename = "D4.1-singularity")]
    Singularity,
    #[serde(rename = "T4.3-singular-integral")]
    SingularIntegral,
    #[serde(rename = "T4.4-pointwise")]
    SingularPointwise,
    #[serde(rename = "C4.4-step")]
    SingularStep,
    #[serde(rename = "B-convex-first")]
    ConvexFirst,
    #[serde(rename = "B-convex-second")]
    ConvexSecond,
}

impl ConditionId {
    pub const ALL: [ConditionId; 12] = [
        ConditionId::FirstIntegral,
        ConditionId::FirstTransversality,
        ConditionId::FirstPointwise,
        ConditionId::SecondIntegral,
        ConditionId::SecondTransversality,
        ConditionId::MixedConstraint,
        ConditionId::Singularity,
        ConditionId::SingularIntegral,
        ConditionId::SingularPointwise,
        ConditionId::SingularStep,
        ConditionId::ConvexFirst,
        ConditionId::ConvexSecond,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            ConditionId::FirstIntegral => "T3.1-integral",
            ConditionId::FirstTransversality => "T3.1-transversality",
            ConditionId::FirstPointwise => "T3.2-pointwise",
            ConditionId::SecondIntegral => "T4.1-integral",
            ConditionId::SecondTransversality => "T4.1-transversality",
            ConditionId::MixedConstraint => "C4.1-mixed",
            ConditionId::Singularity => "D4.1-singularity",
            ConditionId::SingularIntegral => "T4.3-singular-integral",
            ConditionId::SingularPointwise => "T4.4-pointwise",
            ConditionId::SingularStep => "C4.4-step",
            ConditionId::ConvexFirst => "B-convex-first",
            ConditionId::ConvexSecond => "B-convex-second",
        }
    }

    /// Whether the check needs the second adjoint.
    pub fn is_second_order(&self) -> bool {
        !matches!(
            self,
            ConditionId::FirstIntegral
                | ConditionId::FirstTransversality
                | ConditionId::FirstPointwise
                | ConditionId::ConvexFirst
        )
    }
}

impl fmt::Display for ConditionId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ConditionId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        ConditionId::ALL
            .iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown check `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "PASS")]
    Pass,
    #[serde(rename = "VIOLATED")]
    Violated,
    #[serde(rename = "INCONCLUSIVE")]
    Inconclusive,
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "PASS",
            Verdict::Violated => "VIOLATED",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CheckOptions {
    pub paths: usize,
    pub steps: usize,
    pub seed: u64,
    pub adjoint: AdjointOptions,
    /// Mesh on the unit sphere used for quadratic forms over tangent cones.
    pub mesh: usize,
    /// Mesh used to build the default direction battery.
    pub battery_mesh: usize,
    pub sigma_multiplier: f64,
    pub allowance_factor: f64,
    pub absolute_tolerance: f64,
    /// Fraction of nodes that may fail a pointwise test before it counts.
    pub node_fraction: f64,
    /// Estimate the discretization allowance on the refined grid.
    pub refine: bool,
    /// Paths examined by nodewise tests when the data are random.
    pub check_paths: usize,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            paths: crate::sde::DEFAULT_PATHS,
            steps: crate::sde::DEFAULT_STEPS,
            seed: crate::sde::DEFAULT_SEED,
            adjoint: AdjointOptions::default(),
            mesh: 64,
            battery_mesh: 16,
            sigma_multiplier: 3.0,
            allowance_factor: 4.0,
            absolute_tolerance: 1e-10,
            node_fraction: 0.01,
            refine: true,
            check_paths: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectionResult {
    pub label: String,
    pub direction: Value,
    pub value: f64,
    pub std_err: f64,
    pub allowance: f64,
    pub threshold: f64,
    pub violated: bool,
    pub components: BTreeMap<String, f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RejectedDirection {
    pub label: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tolerances {
    pub sigma_multiplier: f64,
    pub allowance_factor: f64,
    pub absolute: f64,
    pub node_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridInfo {
    #[serde(rename = "N")]
    pub steps: usize,
    #[serde(rename = "M")]
    pub paths: usize,
    pub seed: u64,
    pub refined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverInfo {
    pub method: String,
    #[serde(flatten)]
    pub meta: SolverMeta,
}

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub condition: ConditionId,
    pub verdict: Verdict,
    /// Largest value over the probed directions (or nodes).
    pub value: f64,
    pub std_err: f64,
    pub witness: Option<Value>,
    pub directions: Vec<DirectionResult>,
    pub rejected: Vec<RejectedDirection>,
    pub tolerances: Tolerances,
    pub grid: GridInfo,
    pub solver: SolverInfo,
    pub details: BTreeMap<String, Value>,
    pub notes: Vec<String>,
}

impl ConditionReport {
    pub fn direction(&self, label: &str) -> Option<&DirectionResult> {
        self.directions.iter().find(|d| d.label == label)
    }
}

/// Directions to probe: the automatic battery or an explicit list, which is
/// validated strictly (an inadmissible entry is an error).
#[derive(Clone, Debug)]
pub enum Directions {
    Battery,
    User(Vec<VariationDirection>),
}

// Integrand indices; all are time integrals except the terminal `g_xx` term.
const NT: usize = 9;
const T_HU_V: usize = 0;
const T_HU_H: usize = 1;
const T_HUU: usize = 2;
const T_P2S: usize = 3;
const T_SY: usize = 4;
const T_HXX: usize = 5;
const T_HXU: usize = 6;
const T_GXX: usize = 7;
const T_MULT: usize = 8;
const TERM_NAMES: [&str; NT] = [
    "hu_v",
    "hu_h",
    "huu_vv",
    "p2_sigma_v",
    "s_y1_v",
    "hxx_y1_y1",
    "hxu_v_y1",
    "gxx_terminal",
    "multiplier_vv",
];

#[derive(Clone, Copy, Debug)]
enum Combo {
    First,
    Second,
    Mixed,
    Singular,
    Convex,
}

const NC: usize = 5;

impl Combo {
    fn index(self) -> usize {
        self as usize
    }

    fn of(self, t: &[f64; NT]) -> f64 {
        match self {
            Combo::First => t[T_HU_V],
            Combo::Second => t[T_HU_H] + 0.5 * t[T_HUU] + 0.5 * t[T_P2S] + t[T_SY],
            Combo::Mixed => 0.5 * t[T_HUU] + 0.5 * t[T_P2S] + t[T_SY] - 0.5 * t[T_MULT],
            Combo::Singular => t[T_SY],
            Combo::Convex => 0.5 * t[T_HXX] + t[T_HXU] + 0.5 * t[T_HUU] - 0.5 * t[T_GXX],
        }
    }
}

const COMBOS: [Combo; NC] = [Combo::First, Combo::Second, Combo::Mixed, Combo::Singular, Combo::Convex];

#[derive(Clone, Copy, Debug, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn estimate(&self) -> Estimate {
        let se = if self.n > 1.0 {
            (self.m2.max(0.0) / (self.n - 1.0) / self.n).sqrt()
        } else {
            0.0
        };
        Estimate {
            mean: self.mean,
            std_err: se,
        }
    }
}

/// Kernel output for one direction at one resolution.
#[derive(Clone, Debug)]
struct DirEval {
    terms: Vec<Estimate>,
    combos: Vec<Estimate>,
    /// `E<H_u, v>` per node `k < N`.
    gate: Vec<Estimate>,
    /// Whether the second-order terms were computed.
    second: bool,
}

/// Coefficients and adjoint quantities along one path, `[node][...]`.
#[derive(Clone, Debug, Default)]
struct PathData {
    x: Vec<f64>,
    u: Vec<f64>,
    dw: Vec<f64>,
    bx: Vec<f64>,
    bu: Vec<f64>,
    sx: Vec<f64>,
    su: Vec<f64>,
    hu: Vec<f64>,
    p1: Vec<f64>,
    q1: Vec<f64>,
    /// Standard error of `H_u` implied by the regression tier.
    se_hu: Vec<f64>,
    huu: Vec<f64>,
    hxx: Vec<f64>,
    hxu: Vec<f64>,
    p2: Vec<f64>,
    s: Vec<f64>,
    se_form: Vec<f64>,
    gxx: Vec<f64>,
}

struct Level {
    brownian: BrownianBundle,
    adj: AdjointSolution,
    samples: Mutex<Option<Arc<Vec<PathData>>>>,
    evals: Mutex<HashMap<String, DirEval>>,
}

impl Level {
    fn grid(&self) -> TimeGrid {
        self.brownian.grid
    }
}

enum MixedRef<'a> {
    Fixed(&'a [f64]),
    PerPath(&'a SmoothConstraints),
}

/// Node-wise means over the sampled paths, for plotting.
#[derive(Clone, Debug)]
pub struct MeanSeries {
    pub t: Vec<f64>,
    pub p1: Vec<Vec<f64>>,
    pub q1: Vec<Vec<f64>>,
    pub hu: Vec<Vec<f64>>,
    pub paths: usize,
}

/// Simulation, adjoints and caches shared by the checks on one candidate.
pub struct CheckContext<'a> {
    pub problem: &'a ControlProblem,
    pub constraints: &'a ConstraintSpec,
    pub candidate: &'a CandidateControl,
    pub opts: CheckOptions,
    second: bool,
    coarse: Level,
    fine: Option<Level>,
    cones: Mutex<HashMap<Vec<u64>, Arc<TangentSet>>>,
    singular: Mutex<Option<(bool, ConditionReport)>>,
}

fn key(parts: &[&[f64]]) -> Vec<u64> {
    let mut k = Vec::new();
    for p in parts {
        k.push(p.len() as u64);
        // Normalize -0.0 so that equal points share an entry.
        k.extend(p.iter().map(|x| (x + 0.0).to_bits()));
    }
    k
}

fn dir_key(d: &VariationDirection) -> String {
    format!("{}|{}", d.label, d.describe())
}

fn frob(a: &[f64]) -> f64 {
    linalg::norm(a)
}

fn same(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= 1e-13 * (1.0 + x.abs()))
}

/// Short decimal rendering used in labels.
pub fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v
        .iter()
        .map(|x| {
            let x = if x.abs() < 5e-13 { 0.0 } else { *x };
            let s = format!("{x:.4}");
            let s = s.trim_end_matches('0').trim_end_matches('.').to_string();
            if s == "-0" {
                "0".into()
            } else {
                s
            }
        })
        .collect();
    format!("({})", parts.join(","))
}

/// Node values as a constant law when they agree, else a step law on the grid.
fn law_from_nodes(values: &[Vec<f64>], grid: &TimeGrid) -> ControlLaw {
    if values.iter().all(|v| same(v, &values[0])) {
        return ControlLaw::Constant(values[0].clone());
    }
    let breaks: Vec<f64> = (1..values.len()).map(|k| grid.t(k)).collect();
    ControlLaw::Step {
        breaks,
        values: values.to_vec(),
    }
}

impl<'a> CheckContext<'a> {
    /// Simulates the candidate and solves the adjoints (both when `second`), on the
    /// main grid and, with `opts.refine`, on the grid with twice as many steps.
    pub fn new(
        problem: &'a ControlProblem,
        constraints: &'a ConstraintSpec,
        candidate: &'a CandidateControl,
        opts: CheckOptions,
        second: bool,
    ) -> Result<Self> {
        if opts.paths == 0 {
            return Err(Error::Invalid("at least one path is required".into()));
        }
        if constraints.control_set.dim() != problem.control_dim {
            return Err(Error::DimensionMismatch {
                callback: "control set".into(),
                detail: format!("dimension {} for {} controls", constraints.control_set.dim(), problem.control_dim),
            });
        }
        if second {
            problem.second()?;
        }
        let grid = TimeGrid::new(problem.horizon, opts.steps)?;
        let x0 = &constraints.initial_point;
        let level = |brownian: BrownianBundle| -> Result<Level> {
            let adj = solve_adjoints(problem, candidate, x0, &brownian, &opts.adjoint, second)?;
            Ok(Level {
                brownian,
                adj,
                samples: Mutex::new(None),
                evals: Mutex::new(HashMap::new()),
            })
        };
        let (coarse, fine) = if opts.refine {
            let fine_grid = TimeGrid::new(problem.horizon, 2 * opts.steps)?;
            let c = BrownianBundle::with_base(opts.seed, opts.paths, grid, 2 * opts.steps)?;
            let f = BrownianBundle::new(opts.seed, opts.paths, fine_grid);
            (level(c)?, Some(level(f)?))
        } else {
            (level(BrownianBundle::new(opts.seed, opts.paths, grid))?, None)
        };
        Ok(CheckContext {
            problem,
            constraints,
            candidate,
            opts,
            second,
            coarse,
            fine,
            cones: Mutex::new(HashMap::new()),
            singular: Mutex::new(None),
        })
    }

    pub fn has_second(&self) -> bool {
        self.second
    }

    pub fn grid(&self) -> TimeGrid {
        self.coarse.grid()
    }

    pub fn adjoint(&self) -> &AdjointSolution {
        &self.coarse.adj
    }

    pub fn refined_adjoint(&self) -> Option<&AdjointSolution> {
        self.fine.as_ref().map(|l| &l.adj)
    }

    pub fn brownian(&self) -> &BrownianBundle {
        &self.coarse.brownian
    }

    fn grid_info(&self) -> GridInfo {
        GridInfo {
            steps: self.opts.steps,
            paths: self.opts.paths,
            seed: self.opts.seed,
            refined: self.fine.is_some(),
        }
    }

    fn report(&self, id: ConditionId) -> ConditionReport {
        let meta = self.coarse.adj.meta.clone();
        ConditionReport {
            condition: id,
            verdict: Verdict::Pass,
            value: 0.0,
            std_err: 0.0,
            witness: None,
            directions: Vec::new(),
            rejected: Vec::new(),
            tolerances: Tolerances {
                sigma_multiplier: self.opts.sigma_multiplier,
                allowance_factor: self.opts.allowance_factor,
                absolute: self.opts.absolute_tolerance,
                node_fraction: self.opts.node_fraction,
            },
            grid: self.grid_info(),
            solver: SolverInfo {
                method: if id.is_second_order() {
                    meta.second_method.clone().unwrap_or_else(|| meta.first_method.clone())
                } else {
                    meta.first_method.clone()
                },
                meta,
            },
            details: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn threshold(&self, se: f64, allowance: f64) -> f64 {
        self.opts.sigma_multiplier * se + allowance + self.opts.absolute_tolerance
    }

    fn allowance(&self, coarse: f64, fine: Option<f64>) -> f64 {
        fine.map_or(0.0, |f| self.opts.allowance_factor * (coarse - f).abs())
    }

    /// Adjacent cone of `U` at `u`, cached by value.
    pub fn tangent_cone(&self, u: &[f64]) -> Result<Arc<TangentSet>> {
        let k = key(&[u]);
        if let Some(t) = self.cones.lock().expect("cone cache").get(&k) {
            return Ok(t.clone());
        }
        let t = Arc::new(self.constraints.control_set.adjacent_cone(u)?);
        self.cones.lock().expect("cone cache").insert(k, t.clone());
        Ok(t)
    }

    /// Second-order adjacent set of `U` at `u` along `v`, cached by value.
    pub fn second_tangent(&self, u: &[f64], v: &[f64]) -> Result<Arc<TangentSet>> {
        let k = key(&[u, v]);
        if let Some(t) = self.cones.lock().expect("cone cache").get(&k) {
            return Ok(t.clone());
        }
        let t = Arc::new(self.constraints.control_set.second_order_adjacent(u, v)?);
        self.cones.lock().expect("cone cache").insert(k, t.clone());
        Ok(t)
    }

    fn path_data(
        &self,
        level: &Level,
        path: usize,
        second: bool,
        ws: &mut PathBuffers,
        c: &mut NodeCoeffs,
    ) -> Result<PathData> {
        let p = self.problem;
        let (n, m) = (p.state_dim, p.control_dim);
        let second = second && self.second;
        simulate_path(p, self.candidate, &self.constraints.initial_point, &level.brownian, path, ws)?;
        let grid = level.grid();
        let nodes = grid.steps + 1;
        let adj = &level.adj;
        let meta = &adj.meta;
        let z = |len: usize| vec![0.0; nodes * len];
        let mut d = PathData {
            x: ws.x.clone(),
            u: ws.u.clone(),
            dw: ws.dw.clone(),
            bx: z(n * n),
            bu: z(n * m),
            sx: z(n * n),
            su: z(n * m),
            hu: z(m),
            p1: z(n),
            q1: z(n),
            se_hu: z(1),
            ..PathData::default()
        };
        let mut q2 = vec![0.0; n * n];
        if second {
            d.huu = z(m * m);
            d.hxx = z(n * n);
            d.hxu = z(n * m);
            d.p2 = z(n * n);
            d.s = z(m * n);
            d.se_form = z(1);
        }
        let (nn, nm, mm) = (n * n, n * m, m * m);
        for k in 0..nodes {
            let (x, u, w) = (ws.xk(k), ws.uk(k), ws.w[k]);
            c.eval(p, grid.t(k), x, u);
            let p1 = &mut d.p1[k * n..(k + 1) * n];
            adj.p1(k, x, w, p1);
            let q1 = &mut d.q1[k * n..(k + 1) * n];
            adj.q1(k, x, w, q1);
            let (p1, q1) = (&d.p1[k * n..(k + 1) * n], &d.q1[k * n..(k + 1) * n]);
            c.h_u(p1, q1, &mut d.hu[k * m..(k + 1) * m]);
            d.bx[k * nn..(k + 1) * nn].copy_from_slice(&c.b_x);
            d.bu[k * nm..(k + 1) * nm].copy_from_slice(&c.b_u);
            d.sx[k * nn..(k + 1) * nn].copy_from_slice(&c.s_x);
            d.su[k * nm..(k + 1) * nm].copy_from_slice(&c.s_u);
            let (fb, fs) = (frob(&c.b_u), frob(&c.s_u));
            d.se_hu[k] = (m as f64).sqrt() * (fb * meta.regression_sigma_p1 + fs * meta.regression_sigma_q1);
            if second {
                let p2 = &mut d.p2[k * nn..(k + 1) * nn];
                adj.p2(k, x, w, p2);
                adj.q2(k, x, w, &mut q2);
                let p2 = &d.p2[k * nn..(k + 1) * nn];
                let huu = &mut d.huu[k * mm..(k + 1) * mm];
                c.h_uu_into(p1, q1, huu);
                linalg::symmetrize(huu, m);
                let hxx = &mut d.hxx[k * nn..(k + 1) * nn];
                c.h_xx_into(p1, q1, hxx);
                linalg::symmetrize(hxx, n);
                c.h_xu_into(p1, q1, &mut d.hxu[k * nm..(k + 1) * nm]);
                c.s_matrix_into(p1, q1, p2, &q2, &mut d.s[k * nm..(k + 1) * nm]);
                let sec = c.second.as_ref().expect("second derivatives evaluated");
                d.se_form[k] = fs * fs * meta.regression_sigma_p2
                    + (frob(&sec.b_uu) + frob(&sec.s_uu)) * (meta.regression_sigma_p1 + meta.regression_sigma_q1);
            }
        }
        if second {
            let g = p.second()?;
            d.gxx = vec![0.0; n * n];
            (g.g_xx)(ws.xk(grid.steps), ws.w[grid.steps], &mut d.gxx);
        }
        Ok(d)
    }

    /// Path data on the first `check_paths` paths.
    fn samples(&self, fine: bool) -> Result<Arc<Vec<PathData>>> {
        let level = self.level(fine);
        if let Some(s) = level.samples.lock().expect("samples").as_ref() {
            return Ok(s.clone());
        }
        let (n, m) = (self.problem.state_dim, self.problem.control_dim);
        let count = self.opts.check_paths.clamp(1, self.opts.paths);
        let mut ws = PathBuffers::new(n, m, level.grid().steps);
        let mut c = NodeCoeffs::new(self.problem, self.second)?;
        let v = (0..count)
            .map(|path| self.path_data(level, path, true, &mut ws, &mut c))
            .collect::<Result<Vec<_>>>()?;
        let v = Arc::new(v);
        *level.samples.lock().expect("samples") = Some(v.clone());
        Ok(v)
    }

    fn level(&self, fine: bool) -> &Level {
        if fine {
            self.fine.as_ref().expect("refined level requested")
        } else {
            &self.coarse
        }
    }

    /// True when the candidate, `H_u` and the second-order data are the same on
    /// every sampled path, so nodewise tests need only one path.
    fn nodewise_deterministic(&self, samples: &[PathData]) -> bool {
        let first = &samples[0];
        samples.iter().all(|s| {
            same(&s.u, &first.u)
                && same(&s.hu, &first.hu)
                && same(&s.huu, &first.huu)
                && same(&s.p2, &first.p2)
                && same(&s.s, &first.s)
                && same(&s.su, &first.su)
                && same(&s.bu, &first.bu)
        })
    }

    fn nodewise_paths(&self) -> Result<usize> {
        let s = self.samples(false)?;
        Ok(if self.nodewise_deterministic(&s) { 1 } else { s.len() })
    }

    /// Means of `P1`, `Q1` and `H_u` over the sampled paths, per node.
    pub fn mean_series(&self) -> Result<MeanSeries> {
        let s = self.samples(false)?;
        let (n, m) = (self.problem.state_dim, self.problem.control_dim);
        let grid = self.grid();
        let w = 1.0 / s.len() as f64;
        let mut out = MeanSeries {
            t: grid.nodes(),
            p1: vec![vec![0.0; n]; grid.steps + 1],
            q1: vec![vec![0.0; n]; grid.steps + 1],
            hu: vec![vec![0.0; m]; grid.steps + 1],
            paths: s.len(),
        };
        for d in s.iter() {
            for k in 0..=grid.steps {
                linalg::axpy(w, &d.p1[k * n..(k + 1) * n], &mut out.p1[k]);
                linalg::axpy(w, &d.q1[k * n..(k + 1) * n], &mut out.q1[k]);
                linalg::axpy(w, &d.hu[k * m..(k + 1) * m], &mut out.hu[k]);
            }
        }
        Ok(out)
    }

    /// Per-node mean of `H_u` over the sampled paths.
    fn mean_hu(&self) -> Result<Vec<Vec<f64>>> {
        let s = self.samples(false)?;
        let m = self.problem.control_dim;
        let nodes = self.grid().steps + 1;
        let mut out = vec![vec![0.0; m]; nodes];
        for d in s.iter() {
            for k in 0..nodes {
                linalg::axpy(1.0 / s.len() as f64, &d.hu[k * m..(k + 1) * m], &mut out[k]);
            }
        }
        Ok(out)
    }

    fn direction_terms(
        &self,
        d: &PathData,
        grid: &TimeGrid,
        dir: &VariationDirection,
        mixed: Option<&MixedRef>,
    ) -> Result<([f64; NT], Vec<f64>)> {
        let (n, m) = (self.problem.state_dim, self.problem.control_dim);
        let dt = grid.dt();
        let steps = grid.steps;
        let (v, h) = direction_values(dir, grid, &d.x, n, m);
        let per_path_q = match mixed {
            Some(MixedRef::PerPath(s)) => Some(self.multiplier_hessians(s, d, &v, steps)?),
            _ => None,
        };
        let second = !d.p2.is_empty();
        let mut t = [0.0; NT];
        let mut gate = Vec::with_capacity(steps);
        let mut y = dir.nu0.clone();
        let mut drift = vec![0.0; n];
        let mut diff = vec![0.0; n];
        let mut tmp = vec![0.0; n];
        let mut suv = vec![0.0; n];
        for k in 0..steps {
            let vk = &v[k * m..(k + 1) * m];
            let hk = &h[k * m..(k + 1) * m];
            let hu = &d.hu[k * m..(k + 1) * m];
            let g = dot(hu, vk);
            gate.push(g);
            t[T_HU_V] += g * dt;
            t[T_HU_H] += dot(hu, hk) * dt;
            linalg::matvec(&d.su[k * n * m..(k + 1) * n * m], n, m, vk, &mut suv);
            if second {
                let mm = m * m;
                let nn = n * n;
                t[T_HUU] += bilinear(&d.huu[k * mm..(k + 1) * mm], m, m, vk, vk) * dt;
                t[T_P2S] += bilinear(&d.p2[k * nn..(k + 1) * nn], n, n, &suv, &suv) * dt;
                t[T_SY] += bilinear(&d.s[k * m * n..(k + 1) * m * n], m, n, &y, vk) * dt;
                t[T_HXX] += bilinear(&d.hxx[k * nn..(k + 1) * nn], n, n, &y, &y) * dt;
                t[T_HXU] += bilinear(&d.hxu[k * n * m..(k + 1) * n * m], n, m, vk, &y) * dt;
                let q = match (mixed, per_path_q.as_ref()) {
                    (_, Some(q)) => Some(&q[k * mm..(k + 1) * mm]),
                    (Some(MixedRef::Fixed(q)), None) => Some(&q[k * mm..(k + 1) * mm]),
                    _ => None,
                };
                if let Some(q) = q {
                    t[T_MULT] += bilinear(q, m, m, vk, vk) * dt;
                }
            }
            linalg::matvec(&d.bx[k * n * n..(k + 1) * n * n], n, n, &y, &mut drift);
            linalg::matvec(&d.bu[k * n * m..(k + 1) * n * m], n, m, vk, &mut tmp);
            linalg::axpy(1.0, &tmp, &mut drift);
            linalg::matvec(&d.sx[k * n * n..(k + 1) * n * n], n, n, &y, &mut diff);
            linalg::axpy(1.0, &suv, &mut diff);
            for i in 0..n {
                y[i] += drift[i] * dt + diff[i] * d.dw[k];
            }
        }
        if second {
            t[T_GXX] = bilinear(&d.gxx, n, n, &y, &y);
        }
        Ok((t, gate))
    }

    /// `sum mu phi'' + sum lambda psi''` per node along one path.
    fn multiplier_hessians(&self, s: &SmoothConstraints, d: &PathData, v: &[f64], steps: usize) -> Result<Vec<f64>> {
        let m = self.problem.control_dim;
        let controls: Vec<Vec<f64>> = (0..steps).map(|k| d.u[k * m..(k + 1) * m].to_vec()).collect();
        let hu: Vec<Vec<f64>> = (0..steps).map(|k| d.hu[k * m..(k + 1) * m].to_vec()).collect();
        let vs: Vec<Vec<f64>> = (0..steps).map(|k| v[k * m..(k + 1) * m].to_vec()).collect();
        let mp = decompose_multipliers(s, &controls, &hu, Some(&vs))?;
        let mut out = Vec::with_capacity(steps * m * m);
        for k in 0..steps {
            out.extend(multiplier_hessian(s, &controls[k], &mp.mu[k], &mp.lambda[k]));
        }
        Ok(out)
    }

    /// Streams all paths of a level through `direction_terms`.
    fn kernel(
        &self,
        fine: bool,
        dirs: &[VariationDirection],
        mixed: Option<&[MixedRef]>,
        second: bool,
    ) -> Result<Vec<DirEval>> {
        const CHUNK: usize = 1024;
        let level = self.level(fine);
        let (n, m) = (self.problem.state_dim, self.problem.control_dim);
        let grid = level.grid();
        let second = second && self.second;
        let proto = NodeCoeffs::new(self.problem, second)?;
        let nd = dirs.len();
        let mut terms = vec![[Welford::default(); NT]; nd];
        let mut combos = vec![[Welford::default(); NC]; nd];
        let mut gate = vec![vec![Welford::default(); grid.steps]; nd];
        let total = level.brownian.paths;
        let mut start = 0;
        while start < total {
            let end = (start + CHUNK).min(total);
            type PathOut = Vec<([f64; NT], Vec<f64>)>;
            let per: Vec<PathOut> = (start..end)
                .into_par_iter()
                .map_init(
                    || (PathBuffers::new(n, m, grid.steps), proto.clone()),
                    |(ws, c), path| {
                        let d = self.path_data(level, path, second, ws, c)?;
                        dirs.iter()
                            .enumerate()
                            .map(|(i, dir)| self.direction_terms(&d, &grid, dir, mixed.map(|mx| &mx[i])))
                            .collect::<Result<PathOut>>()
                    },
                )
                .collect::<Result<_>>()?;
            for path_out in per {
                for (i, (t, g)) in path_out.into_iter().enumerate() {
                    for j in 0..NT {
                        terms[i][j].push(t[j]);
                    }
                    for (j, c) in COMBOS.iter().enumerate() {
                        combos[i][j].push(c.of(&t));
                    }
                    for (k, gk) in g.into_iter().enumerate() {
                        gate[i][k].push(gk);
                    }
                }
            }
            start = end;
        }
        Ok((0..nd)
            .map(|i| DirEval {
                terms: terms[i].iter().map(|w| w.estimate()).collect(),
                combos: combos[i].iter().map(|w| w.estimate()).collect(),
                gate: gate[i].iter().map(|w| w.estimate()).collect(),
                second,
            })
            .collect())
    }

    /// Cached kernel evaluations (without the multiplier term) on both levels.
    fn evaluate(&self, dirs: &[VariationDirection], second: bool) -> Result<Vec<(DirEval, Option<DirEval>)>> {
        let second = second && self.second;
        let mut out_levels = Vec::new();
        for fine in [false, true] {
            if fine && self.fine.is_none() {
                out_levels.push(None);
                continue;
            }
            let level = self.level(fine);
            let missing: Vec<VariationDirection> = {
                let cache = level.evals.lock().expect("eval cache");
                let mut seen = std::collections::BTreeSet::new();
                dirs.iter()
                    .filter(|d| {
                        cache.get(&dir_key(d)).is_none_or(|e| second && !e.second) && seen.insert(dir_key(d))
                    })
                    .cloned()
                    .collect()
            };
            if !missing.is_empty() {
                let evals = self.kernel(fine, &missing, None, second)?;
                let mut cache = level.evals.lock().expect("eval cache");
                for (d, e) in missing.iter().zip(evals) {
                    cache.insert(dir_key(d), e);
                }
            }
            let cache = level.evals.lock().expect("eval cache");
            out_levels.push(Some(dirs.iter().map(|d| cache[&dir_key(d)].clone()).collect::<Vec<_>>()));
        }
        let coarse = out_levels[0].take().expect("coarse level");
        let fine = out_levels[1].take();
        Ok(coarse
            .into_iter()
            .enumerate()
            .map(|(i, c)| (c, fine.as_ref().map(|f| f[i].clone())))
            .collect())
    }

    /// Nodes (and paths) on which a direction must be checked for tangency.
    fn direction_nodes(&self, dir: &VariationDirection) -> Result<Vec<(usize, usize)>> {
        let samples = self.samples(false)?;
        let det = self.candidate.law.is_deterministic() && dir.is_deterministic();
        let paths = if det { 1 } else { samples.len() };
        let steps = self.grid().steps;
        Ok((0..paths).flat_map(|p| (0..=steps).map(move |k| (p, k))).collect())
    }

    /// Returns the first node where `v` leaves the adjacent cone.
    fn tangency_defect(&self, dir: &VariationDirection, second: bool) -> Result<Option<(usize, String)>> {
        let (n, m) = (self.problem.state_dim, self.problem.control_dim);
        let samples = self.samples(false)?;
        let grid = self.grid();
        let mut cur = usize::MAX;
        let mut vals = (Vec::new(), Vec::new());
        for (p, k) in self.direction_nodes(dir)? {
            if p != cur {
                vals = direction_values(dir, &grid, &samples[p].x, n, m);
                cur = p;
            }
            let u = &samples[p].u[k * m..(k + 1) * m];
            let v = &vals.0[k * m..(k + 1) * m];
            let t = self.tangent_cone(u)?;
            if !t.contains(v, 1e-7) {
                return Ok(Some((k, "not tangent".into())));
            }
            if second {
                let h = &vals.1[k * m..(k + 1) * m];
                let t2 = self.second_tangent(u, v)?;
                if !t2.contains(h, 1e-7) {
                    return Ok(Some((k, "h outside the second-order adjacent set".into())));
                }
            }
        }
        Ok(None)
    }

    /// First node where the second-order adjacent set along `v` is empty.
    fn second_order_empty(&self, dir: &VariationDirection) -> Result<Option<usize>> {
        let (n, m) = (self.problem.state_dim, self.problem.control_dim);
        let samples = self.samples(false)?;
        let grid = self.grid();
        let mut cur = usize::MAX;
        let mut vals = (Vec::new(), Vec::new());
        for (p, k) in self.direction_nodes(dir)? {
            if p != cur {
                vals = direction_values(dir, &grid, &samples[p].x, n, m);
                cur = p;
            }
            let u = &samples[p].u[k * m..(k + 1) * m];
            let v = &vals.0[k * m..(k + 1) * m];
            if self.second_tangent(u, v)?.is_empty()? {
                return Ok(Some(k));
            }
        }
        Ok(None)
    }

    /// First node where `|E<H_u, v>|` exceeds its tolerance.
    fn gate_failure(&self, c: &DirEval, f: Option<&DirEval>) -> Option<(usize, f64)> {
        for (k, g) in c.gate.iter().enumerate() {
            let allowance = self.allowance(g.mean, f.map(|f| f.gate[2 * k].mean));
            if g.mean.abs() > self.threshold(g.std_err, allowance) + 1e-9 {
                return Some((k, g.mean));
            }
        }
        None
    }

    fn direction_result(
        &self,
        dir: &VariationDirection,
        combo: Combo,
        c: &DirEval,
        f: Option<&DirEval>,
        terms: &[usize],
    ) -> DirectionResult {
        let e = c.combos[combo.index()];
        let allowance = self.allowance(e.mean, f.map(|f| f.combos[combo.index()].mean));
        let threshold = self.threshold(e.std_err, allowance);
        let components = terms.iter().map(|&j| (TERM_NAMES[j].to_string(), c.terms[j].mean)).collect();
        DirectionResult {
            label: dir.label.clone(),
            direction: dir.describe(),
            value: e.mean,
            std_err: e.std_err,
            allowance,
            threshold,
            violated: e.mean > threshold,
            components,
        }
    }

    /// Distinct candidate values visited on the sampled paths.
    fn distinct_controls(&self) -> Result<Vec<Vec<f64>>> {
        let m = self.problem.control_dim;
        let samples = self.samples(false)?;
        let paths = if self.candidate.law.is_deterministic() { 1 } else { samples.len() };
        let mut out: Vec<Vec<f64>> = Vec::new();
        let mut seen = std::collections::BTreeSet::new();
        for s in samples.iter().take(paths) {
            for u in s.u.chunks(m) {
                if seen.insert(key(&[u])) {
                    out.push(u.to_vec());
                }
            }
        }
        Ok(out)
    }

    /// Unit directions tangent at every visited control value, plus (for
    /// deterministic candidates) the nodewise maximizer of `<E H_u, v>`.
    pub fn first_order_battery(&self) -> Result<Vec<VariationDirection>> {
        let n = self.problem.state_dim;
        let m = self.problem.control_dim;
        let us = self.distinct_controls()?;
        // Visiting many distinct values (feedback laws) makes the intersection
        // expensive; a spread subset is enough to reject most directions.
        let stride = (us.len() / 64).max(1);
        let cones: Vec<Arc<TangentSet>> = us
            .iter()
            .step_by(stride)
            .map(|u| self.tangent_cone(u))
            .collect::<Result<_>>()?;
        let mut out: Vec<VariationDirection> = Vec::new();
        for v in cones[0].sample_directions(self.opts.battery_mesh) {
            if cones.iter().all(|c| c.contains(&v, 1e-9)) {
                out.push(VariationDirection::constant(&v, n).with_label(&format!("v={}", fmt_vec(&v))));
            }
        }
        if self.candidate.law.is_deterministic() {
            let grid = self.grid();
            let samples = self.samples(false)?;
            let hu = self.mean_hu()?;
            let mut best = Vec::with_capacity(grid.steps + 1);
            let mut gain = 0.0;
            // The terminal node carries no weight in the integral; it repeats the last value.
            for k in 0..grid.steps {
                let t = self.tangent_cone(&samples[0].u[k * m..(k + 1) * m])?;
                match t.lp_maximize(&hu[k], 1.0)? {
                    LpBest::Optimal { value, x } if value > 0.0 => {
                        gain += value;
                        best.push(x.iter().map(|a| if a.abs() < 1e-12 { 0.0 } else { *a }).collect());
                    }
                    _ => best.push(vec![0.0; m]),
                }
            }
            best.push(best[grid.steps - 1].clone());
            if gain > 0.0 {
                let law = law_from_nodes(&best, &grid);
                let dup = match &law {
                    ControlLaw::Constant(c) => out.iter().any(|d| matches!(&d.v, ControlLaw::Constant(e) if same(c, e))),
                    _ => false,
                };
                if !dup {
                    let label = match &law {
                        ControlLaw::Constant(c) => format!("v={}", fmt_vec(c)),
                        _ => "v=argmax<H_u,v>".to_string(),
                    };
                    out.push(VariationDirection::new(law, n).with_label(&label));
                }
            }
        }
        Ok(out)
    }

    /// Battery directions that pass a sampled `<H_u, v> = 0` pre-gate, each
    /// paired with the nodewise maximizer `h` of `<E H_u, h>` over the
    /// second-order adjacent set intersected with the unit box.
    pub fn second_order_battery(&self) -> Result<Vec<VariationDirection>> {
        let (n, m) = (self.problem.state_dim, self.problem.control_dim);
        let grid = self.grid();
        let samples = self.samples(false)?;
        let fine = match self.fine {
            Some(_) => Some(self.samples(true)?),
            None => None,
        };
        let hu = self.mean_hu()?;
        let mut out = Vec::new();
        'dirs: for dir in self.first_order_battery()? {
            if !matches!(dir.v, ControlLaw::Constant(_)) {
                continue;
            }
            let ControlLaw::Constant(v) = &dir.v else { unreachable!() };
            for k in 0..grid.steps {
                let vals: Vec<f64> = samples.iter().map(|s| dot(&s.hu[k * m..(k + 1) * m], v)).collect();
                let e = Estimate::from_samples(&vals);
                let f = fine.as_ref().map(|fs| {
                    let fv: Vec<f64> = fs.iter().map(|s| dot(&s.hu[2 * k * m..(2 * k + 1) * m], v)).collect();
                    Estimate::from_samples(&fv).mean
                });
                if e.mean.abs() > self.threshold(e.std_err, self.allowance(e.mean, f)) + 1e-9 {
                    continue 'dirs;
                }
            }
            if !self.candidate.law.is_deterministic() {
                out.push(dir.with_h(&vec![0.0; m]));
                continue;
            }
            let mut hs = Vec::with_capacity(grid.steps + 1);
            for k in 0..grid.steps {
                let t2 = self.second_tangent(&samples[0].u[k * m..(k + 1) * m], v)?;
                match t2.lp_maximize_sparse(&hu[k], 1.0, 1e-6)? {
                    LpBest::Optimal { x, .. } => {
                        hs.push(x.iter().map(|a| if a.abs() < 1e-12 { 0.0 } else { *a }).collect::<Vec<f64>>())
                    }
                    _ => continue 'dirs,
                }
            }
            hs.push(hs[grid.steps - 1].clone());
            let law = law_from_nodes(&hs, &grid);
            let hl = match &law {
                ControlLaw::Constant(c) => fmt_vec(c),
                _ => "argmax<H_u,h>".into(),
            };
            let label = format!("v={} h={}", fmt_vec(v), hl);
            out.push(VariationDirection::new(dir.v.clone(), n).with_h_law(law).with_label(&label));
        }
        Ok(out)
    }

    /// Evaluates, in one pass per grid, every direction the listed checks will
    /// probe. Checks run afterwards read the cached values.
    pub fn prefetch(&self, checks: &[ConditionId], dirs: &Directions) -> Result<()> {
        use ConditionId::*;
        let wants = |c: ConditionId| checks.contains(&c);
        let second = self.second
            && [SecondIntegral, SingularIntegral, ConvexFirst, ConvexSecond].iter().any(|c| wants(*c));
        let mut list = Vec::new();
        if [FirstIntegral, MixedConstraint, SingularIntegral, ConvexFirst, ConvexSecond]
            .iter()
            .any(|c| wants(*c))
        {
            list.extend(self.resolve(dirs, false)?.0);
        }
        if self.second && (wants(SecondIntegral) || wants(MixedConstraint)) {
            list.extend(self.resolve(dirs, true)?.0);
        }
        if !list.is_empty() {
            self.evaluate(&list, second)?;
        }
        Ok(())
    }

    fn resolve(&self, dirs: &Directions, second: bool) -> Result<(Vec<VariationDirection>, bool)> {
        Ok(match dirs {
            Directions::Battery => (
                if second { self.second_order_battery()? } else { self.first_order_battery()? },
                false,
            ),
            Directions::User(v) => {
                for d in v {
                    d.check(self.problem.control_dim, self.problem.state_dim)?;
                }
                (v.clone(), true)
            }
        })
    }

    /// Keeps directions tangent at every node; strict mode turns a failure into an error.
    fn filter_tangent(
        &self,
        dirs: Vec<VariationDirection>,
        strict: bool,
        second: bool,
        rejected: &mut Vec<RejectedDirection>,
    ) -> Result<Vec<VariationDirection>> {
        let mut out = Vec::new();
        for d in dirs {
            match self.tangency_defect(&d, second)? {
                None => out.push(d),
                Some((step, reason)) => {
                    if strict {
                        return Err(if reason == "not tangent" {
                            Error::DirectionNotTangent {
                                direction: d.label.clone(),
                                step,
                            }
                        } else {
                            Error::DirectionNotSecondOrderTangent {
                                direction: d.label.clone(),
                                step,
                            }
                        });
                    }
                    rejected.push(RejectedDirection {
                        label: d.label.clone(),
                        reason: format!("{reason} at step {step}"),
                    });
                }
            }
        }
        Ok(out)
    }

    /// Fills value, witness and verdict from per-direction results.
    fn conclude(&self, r: &mut ConditionReport, results: Vec<DirectionResult>) {
        let worst = results
            .iter()
            .enumerate()
            .fold(None::<usize>, |b, (i, d)| match b {
                Some(j) if results[j].value >= d.value => Some(j),
                _ => Some(i),
            });
        let witness = results
            .iter()
            .enumerate()
            .filter(|(_, d)| d.violated)
            .fold(None::<usize>, |b, (i, d)| match b {
                Some(j) if results[j].value - results[j].threshold >= d.value - d.threshold => Some(j),
                _ => Some(i),
            });
        if let Some(w) = witness.or(worst) {
            r.value = results[w].value;
            r.std_err = results[w].std_err;
        }
        if let Some(w) = witness {
            r.verdict = Verdict::Violated;
            r.witness = Some(json!({
                "label": results[w].label,
                "direction": results[w].direction,
                "value": results[w].value,
            }));
        } else if results.is_empty() {
            r.notes.push("no admissible directions; the condition holds vacuously".into());
        }
        r.directions = results;
    }
}

/// `E int <H_u, v> dt <= 0` for tangent directions `v`.
pub fn first_order_integral_check(ctx: &CheckContext, dirs: &Directions) -> Result<ConditionReport> {
    let mut r = ctx.report(ConditionId::FirstIntegral);
    let (list, strict) = ctx.resolve(dirs, false)?;
    let list = ctx.filter_tangent(list, strict, false, &mut r.rejected)?;
    let evals = ctx.evaluate(&list, false)?;
    let results = list
        .iter()
        .zip(&evals)
        .map(|(d, (c, f))| ctx.direction_result(d, Combo::First, c, f.as_ref(), &[T_HU_V]))
        .collect();
    ctx.conclude(&mut r, results);
    Ok(r)
}

/// `P1(0)` with its standard error at a level.
fn p1_at_zero(ctx: &CheckContext, fine: bool) -> (Vec<f64>, f64) {
    let adj = &ctx.level(fine).adj;
    let mut p = vec![0.0; ctx.problem.state_dim];
    adj.p1(0, &ctx.constraints.initial_point, 0.0, &mut p);
    (p, adj.meta.regression_sigma_p1)
}

fn p2_at_zero(ctx: &CheckContext, fine: bool) -> (Vec<f64>, f64) {
    let adj = &ctx.level(fine).adj;
    let n = ctx.problem.state_dim;
    let mut p = vec![0.0; n * n];
    adj.p2(0, &ctx.constraints.initial_point, 0.0, &mut p);
    linalg::symmetrize(&mut p, n);
    (p, adj.meta.regression_sigma_p2)
}

/// `P1(0)` lies in the normal cone of `K` at the initial point.
pub fn first_order_transversality_check(ctx: &CheckContext) -> Result<ConditionReport> {
    let mut r = ctx.report(ConditionId::FirstTransversality);
    let k = &ctx.constraints.initial_set;
    let x0 = &ctx.constraints.initial_point;
    let (p1, sigma) = p1_at_zero(ctx, false);
    let verdict = k.normal_cone_membership(x0, &p1)?;
    let fine = match ctx.fine {
        Some(_) => Some(k.normal_cone_membership(x0, &p1_at_zero(ctx, true).0)?.value),
        None => None,
    };
    let n = ctx.problem.state_dim as f64;
    let se = sigma * n.sqrt();
    let allowance = ctx.allowance(verdict.value, fine);
    let threshold = ctx.threshold(se, allowance);
    r.value = verdict.value;
    r.std_err = se;
    r.details.insert("p1_0".into(), json!(p1));
    r.details.insert("threshold".into(), json!(threshold));
    r.details.insert("initial_set".into(), json!(k.kind()));
    if verdict.value > threshold {
        r.verdict = Verdict::Violated;
        r.witness = Some(json!({ "v": verdict.maximizer, "value": verdict.value }));
    }
    Ok(r)
}

/// Nodewise `H_u(t) in N_U(u(t))`: at each node, `max <H_u, v>` over the
/// adjacent cone intersected with the unit box.
pub fn first_order_pointwise_check(ctx: &CheckContext) -> Result<ConditionReport> {
    let mut r = ctx.report(ConditionId::FirstPointwise);
    let m = ctx.problem.control_dim;
    let grid = ctx.grid();
    let samples = ctx.samples(false)?;
    let fine = match ctx.fine {
        Some(_) => Some(ctx.samples(true)?),
        None => None,
    };
    let paths = ctx.nodewise_paths()?;
    let node_value = |d: &PathData, k: usize| -> Result<(f64, Vec<f64>)> {
        let t = ctx.tangent_cone(&d.u[k * m..(k + 1) * m])?;
        Ok(match t.lp_maximize(&d.hu[k * m..(k + 1) * m], 1.0)? {
            LpBest::Optimal { value, x } => (value.max(0.0), x),
            LpBest::Empty => (0.0, vec![0.0; m]),
            LpBest::Unbounded => return Err(Error::LpFailure("unbounded LP over a boxed cone".into())),
        })
    };
    let mut flagged = vec![0usize; grid.steps];
    let mut max_val = vec![f64::NEG_INFINITY; grid.steps];
    let mut best: Option<(f64, f64, usize, Vec<f64>, f64)> = None;
    let mut total = 0usize;
    let mut bad = 0usize;
    for p in 0..paths {
        for k in 0..grid.steps {
            let (val, v) = node_value(&samples[p], k)?;
            let fval = match &fine {
                Some(f) => Some(node_value(&f[p], 2 * k)?.0),
                None => None,
            };
            let se = samples[p].se_hu[k];
            let thr = ctx.threshold(se, ctx.allowance(val, fval));
            total += 1;
            max_val[k] = max_val[k].max(val);
            if val > thr {
                bad += 1;
                flagged[k] += 1;
                if best.as_ref().map_or(true, |b| val > b.0) {
                    best = Some((val, grid.t(k), p, v, se));
                }
            }
        }
    }
    let fraction = bad as f64 / total.max(1) as f64;
    let flag_frac: Vec<f64> = flagged.iter().map(|&c| c as f64 / paths as f64).collect();
    let t: Vec<f64> = (0..grid.steps).map(|k| grid.t(k)).collect();
    r.details.insert("flagged_fraction".into(), json!(fraction));
    r.details.insert("paths_examined".into(), json!(paths));
    r.details.insert(
        "series".into(),
        json!({ "t": t, "max_value": max_val, "flagged": flag_frac }),
    );
    r.value = max_val.iter().cloned().fold(0.0, f64::max);
    if let Some((val, t, path, v, se)) = best {
        r.value = val;
        r.std_err = se;
        r.witness = Some(json!({ "t": t, "path": path, "v": v, "value": val }));
    }
    if fraction > ctx.opts.node_fraction {
        r.verdict = Verdict::Violated;
    }
    Ok(r)
}

fn require_second(ctx: &CheckContext) -> Result<()> {
    if !ctx.second {
        return Err(Error::MissingSecondDerivatives);
    }
    Ok(())
}

/// `E int (<H_u, h> + <H_uu v, v>/2 + <P2 sigma_u v, sigma_u v>/2 + <S y1, v>) dt <= 0`
/// for pairs `(v, h)` with `<H_u, v> = 0`.
pub fn second_order_integral_check(ctx: &CheckContext, dirs: &Directions) -> Result<ConditionReport> {
    require_second(ctx)?;
    let mut r = ctx.report(ConditionId::SecondIntegral);
    let (list, strict) = ctx.resolve(dirs, true)?;
    let list = ctx.filter_tangent(list, strict, true, &mut r.rejected)?;
    let evals = ctx.evaluate(&list, true)?;
    let mut results = Vec::new();
    for (d, (c, f)) in list.iter().zip(&evals) {
        if let Some((step, value)) = ctx.gate_failure(c, f.as_ref()) {
            if strict {
                return Err(Error::UpsilonGateFailed {
                    direction: d.label.clone(),
                    step,
                    value,
                });
            }
            r.rejected.push(RejectedDirection {
                label: d.label.clone(),
                reason: format!("<H_u, v> = {value:.3e} at step {step}"),
            });
            continue;
        }
        let mut res = ctx.direction_result(d, Combo::Second, c, f.as_ref(), &[T_HU_H, T_HUU, T_P2S, T_SY]);
        res.components.insert("unhalved_form".into(), 2.0 * res.value);
        results.push(res);
    }
    ctx.conclude(&mut r, results);
    Ok(r)
}

/// `P2(0)` lies in the second-order normal set of `K` at `(x0, P1(0))`.
pub fn second_order_transversality_check(ctx: &CheckContext) -> Result<ConditionReport> {
    require_second(ctx)?;
    let mut r = ctx.report(ConditionId::SecondTransversality);
    let k = &ctx.constraints.initial_set;
    let x0 = &ctx.constraints.initial_point;
    let n = ctx.problem.state_dim as f64;
    let value_at = |fine: bool| -> Result<std::result::Result<crate::cones::SecondOrderNormalVerdict, f64>> {
        let (p1, _) = p1_at_zero(ctx, fine);
        let (p2, _) = p2_at_zero(ctx, fine);
        match k.second_order_normal_membership(x0, &p1, &p2, ctx.opts.mesh) {
            Ok(v) => Ok(Ok(v)),
            Err(Error::NotNormal { value }) => Ok(Err(value)),
            Err(e) => Err(e),
        }
    };
    let (_, s1) = p1_at_zero(ctx, false);
    let (p2, s2) = p2_at_zero(ctx, false);
    r.details.insert("p2_0".into(), json!(p2));
    match value_at(false)? {
        Err(v) => {
            r.verdict = Verdict::Inconclusive;
            r.value = v;
            r.notes.push("P1(0) is not in the normal cone of K; the second-order test does not apply".into());
        }
        Ok(v) => {
            let fine = match ctx.fine {
                Some(_) => value_at(true)?.ok().map(|f| f.value),
                None => None,
            };
            let se = s1 * n.sqrt() + 0.5 * s2 * n;
            let threshold = ctx.threshold(se, ctx.allowance(v.value, fine));
            r.value = v.value;
            r.std_err = se;
            r.details.insert("sampled".into(), json!(v.sampled));
            r.details.insert("directions_checked".into(), json!(v.directions_checked));
            if !v.member && v.value > threshold {
                r.verdict = Verdict::Violated;
                r.witness = v.witness.map(|(v, h)| json!({ "v": v, "h": h }));
            }
        }
    }
    Ok(r)
}

/// Second-order condition for `U` given by smooth constraints, with the
/// multiplier correction `- sum mu phi'' - sum lambda psi''`.
pub fn mixed_constraint_second_order_check(ctx: &CheckContext, dirs: &Directions) -> Result<ConditionReport> {
    require_second(ctx)?;
    let s = match &ctx.constraints.control_set {
        ConeDescriptor::Smooth(s) => s,
        _ => {
            return Err(Error::Invalid(
                "the mixed-constraint check needs a control set given by smooth constraints".into(),
            ))
        }
    };
    let mut r = ctx.report(ConditionId::MixedConstraint);
    let (list, strict) = ctx.resolve(dirs, true)?;
    let list = ctx.filter_tangent(list, strict, false, &mut r.rejected)?;
    // Gate first, using the cached evaluation.
    let evals = ctx.evaluate(&list, false)?;
    let mut keep = Vec::new();
    for (d, (c, f)) in list.iter().zip(&evals) {
        if let Some((step, value)) = ctx.gate_failure(c, f.as_ref()) {
            if strict {
                return Err(Error::UpsilonGateFailed {
                    direction: d.label.clone(),
                    step,
                    value,
                });
            }
            r.rejected.push(RejectedDirection {
                label: d.label.clone(),
                reason: format!("<H_u, v> = {value:.3e} at step {step}"),
            });
            continue;
        }
        keep.push(d.clone());
    }
    let samples = ctx.samples(false)?;
    let deterministic = ctx.nodewise_deterministic(&samples) && keep.iter().all(|d| d.is_deterministic());
    let run = |fine: bool| -> Result<Vec<DirEval>> {
        if deterministic {
            let d0 = &ctx.samples(fine)?[0];
            let steps = ctx.level(fine).grid().steps;
            let grid = ctx.level(fine).grid();
            let (n, m) = (ctx.problem.state_dim, ctx.problem.control_dim);
            let qs = keep
                .iter()
                .map(|d| ctx.multiplier_hessians(s, d0, &direction_values(d, &grid, &d0.x, n, m).0, steps))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<MixedRef> = qs.iter().map(|q| MixedRef::Fixed(q)).collect();
            ctx.kernel(fine, &keep, Some(&refs), true)
        } else {
            let refs: Vec<MixedRef> = keep.iter().map(|_| MixedRef::PerPath(s)).collect();
            ctx.kernel(fine, &keep, Some(&refs), true)
        }
    };
    let coarse = run(false)?;
    let fine = if ctx.fine.is_some() { Some(run(true)?) } else { None };
    let results = keep
        .iter()
        .enumerate()
        .map(|(i, d)| {
            ctx.direction_result(
                d,
                Combo::Mixed,
                &coarse[i],
                fine.as_ref().map(|f| &f[i]),
                &[T_HUU, T_P2S, T_SY, T_MULT],
            )
        })
        .collect();
    ctx.conclude(&mut r, results);
    r.details.insert("multipliers_per_path".into(), json!(!deterministic));
    Ok(r)
}

/// Quadratic form `<(H_uu + sigma_u^T P2 sigma_u) v, v>` at one node.
fn singular_form(d: &PathData, k: usize, n: usize, m: usize, v: &[f64]) -> f64 {
    let mut suv = vec![0.0; n];
    linalg::matvec(&d.su[k * n * m..(k + 1) * n * m], n, m, v, &mut suv);
    bilinear(&d.huu[k * m * m..(k + 1) * m * m], m, m, v, v) + bilinear(&d.p2[k * n * n..(k + 1) * n * n], n, n, &suv, &suv)
}

/// Partial singularity: `H_u = 0` and the quadratic form vanishes on the
/// adjacent cone, on at least 99% of the examined nodes. The verdict records
/// that the test ran; the classification is in `details.singular`.
pub fn singularity_test(ctx: &CheckContext) -> Result<ConditionReport> {
    require_second(ctx)?;
    if let Some((_, r)) = ctx.singular.lock().expect("singular cache").as_ref() {
        return Ok(r.clone());
    }
    let mut r = ctx.report(ConditionId::Singularity);
    let (n, m) = (ctx.problem.state_dim, ctx.problem.control_dim);
    let grid = ctx.grid();
    let samples = ctx.samples(false)?;
    let fine = match ctx.fine {
        Some(_) => Some(ctx.samples(true)?),
        None => None,
    };
    let paths = ctx.nodewise_paths()?;
    let (mut ok_nodes, mut total) = (0usize, 0usize);
    let (mut max_hu, mut max_form): (f64, f64) = (0.0, 0.0);
    let mut first_bad: Option<Value> = None;
    for p in 0..paths {
        let d = &samples[p];
        for k in 0..grid.steps {
            total += 1;
            let hu = &d.hu[k * m..(k + 1) * m];
            let hu_norm = linalg::norm(hu);
            let fine_hu = fine.as_ref().map(|f| linalg::norm(&f[p].hu[2 * k * m..(2 * k + 1) * m]));
            let hu_ok = hu_norm <= ctx.threshold(d.se_hu[k], ctx.allowance(hu_norm, fine_hu)) + 1e-8;
            max_hu = max_hu.max(hu_norm);
            let cone = ctx.tangent_cone(&d.u[k * m..(k + 1) * m])?;
            let mut form_ok = true;
            for v in cone.sample_directions(ctx.opts.mesh) {
                let q = singular_form(d, k, n, m, &v);
                let fq = fine.as_ref().map(|f| singular_form(&f[p], 2 * k, n, m, &v));
                max_form = max_form.max(q.abs());
                if q.abs() > ctx.threshold(d.se_form[k], ctx.allowance(q, fq)) + 1e-8 {
                    form_ok = false;
                    if first_bad.is_none() {
                        first_bad = Some(json!({ "t": grid.t(k), "v": v, "form": q }));
                    }
                    break;
                }
            }
            if hu_ok && form_ok {
                ok_nodes += 1;
            } else if first_bad.is_none() {
                first_bad = Some(json!({ "t": grid.t(k), "h_u": hu }));
            }
        }
    }
    let fraction = ok_nodes as f64 / total.max(1) as f64;
    let singular = fraction >= 1.0 - ctx.opts.node_fraction;
    r.value = fraction;
    r.details.insert("singular".into(), json!(singular));
    r.details.insert(
        "classification".into(),
        json!(if singular { "singular" } else { "not-singular" }),
    );
    r.details.insert("singular_fraction".into(), json!(fraction));
    r.details.insert("max_abs_h_u".into(), json!(max_hu));
    r.details.insert("max_abs_form".into(), json!(max_form));
    if !singular {
        r.witness = first_bad;
    }
    *ctx.singular.lock().expect("singular cache") = Some((singular, r.clone()));
    Ok(r)
}

fn require_singular(ctx: &CheckContext) -> Result<()> {
    let r = singularity_test(ctx)?;
    if r.details.get("singular") != Some(&json!(true)) {
        return Err(Error::NotSingular);
    }
    Ok(())
}

/// For singular candidates: `E int <S y1, v> dt <= 0` for `v` admitting a second-order tangent.
pub fn singular_integral_check(ctx: &CheckContext, dirs: &Directions) -> Result<ConditionReport> {
    require_second(ctx)?;
    require_singular(ctx)?;
    let mut r = ctx.report(ConditionId::SingularIntegral);
    let (list, strict) = ctx.resolve(dirs, false)?;
    let list = ctx.filter_tangent(list, strict, false, &mut r.rejected)?;
    let mut keep = Vec::new();
    for d in list {
        match ctx.second_order_empty(&d)? {
            None => keep.push(d),
            Some(step) if strict => {
                return Err(Error::DirectionNotSecondOrderTangent {
                    direction: d.label.clone(),
                    step,
                })
            }
            Some(step) => r.rejected.push(RejectedDirection {
                label: d.label.clone(),
                reason: format!("empty second-order adjacent set at step {step}"),
            }),
        }
    }
    let evals = ctx.evaluate(&keep, true)?;
    let results = keep
        .iter()
        .zip(&evals)
        .map(|(d, (c, f))| ctx.direction_result(d, Combo::Singular, c, f.as_ref(), &[T_SY]))
        .collect();
    ctx.conclude(&mut r, results);
    Ok(r)
}

/// `S(t)` per node with its Malliavin derivative.
fn s_and_grad(ctx: &CheckContext, d: &PathData, fine: bool, deterministic: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, m) = (ctx.problem.state_dim, ctx.problem.control_dim);
    let grid = ctx.level(fine).grid();
    let nodes = grid.steps + 1;
    let grad = if deterministic && ctx.level(fine).adj.first_is_deterministic() && ctx.level(fine).adj.second_is_deterministic() {
        vec![0.0; nodes * m * n]
    } else if let Some(g) = &ctx.problem.grad_s {
        let mut out = vec![0.0; nodes * m * n];
        for k in 0..nodes {
            g(grid.t(k), &mut out[k * m * n..(k + 1) * m * n]);
        }
        out
    } else {
        return Err(Error::MalliavinUnavailable(
            "S is random and the problem supplies no derivative for it".into(),
        ));
    };
    Ok((d.s.clone(), grad))
}

/// Pointwise value `<S b_u v, v> + <DS sigma_u v, v>` at node `k`.
fn pointwise_value(d: &PathData, s: &[f64], grad: &[f64], k: usize, n: usize, m: usize, v: &[f64]) -> f64 {
    let sk = &s[k * m * n..(k + 1) * m * n];
    let gk = &grad[k * m * n..(k + 1) * m * n];
    let mut buv = vec![0.0; n];
    let mut suv = vec![0.0; n];
    linalg::matvec(&d.bu[k * n * m..(k + 1) * n * m], n, m, v, &mut buv);
    linalg::matvec(&d.su[k * n * m..(k + 1) * n * m], n, m, v, &mut suv);
    bilinear(sk, m, n, &buv, v) + bilinear(gk, m, n, &suv, v)
}

/// For singular candidates with a deterministic or step-function structure:
/// `<S b_u v, v> + <DS sigma_u v, v> <= 0` for unit `v` in the adjacent cone.
pub fn pointwise_second_order_check(ctx: &CheckContext) -> Result<ConditionReport> {
    require_second(ctx)?;
    require_singular(ctx)?;
    let id = if matches!(ctx.candidate.law, ControlLaw::Step { .. }) {
        ConditionId::SingularStep
    } else {
        ConditionId::SingularPointwise
    };
    let mut r = ctx.report(id);
    let (n, m) = (ctx.problem.state_dim, ctx.problem.control_dim);
    let grid = ctx.grid();
    let samples = ctx.samples(false)?;
    let deterministic = ctx.nodewise_deterministic(&samples);
    if !deterministic && !ctx.candidate.law.is_deterministic() && ctx.problem.grad_s.is_none() {
        return Err(Error::MalliavinUnavailable(
            "the candidate is a feedback law and S is random".into(),
        ));
    }
    let fine = match ctx.fine {
        Some(_) => Some(ctx.samples(true)?),
        None => None,
    };
    let paths = if deterministic { 1 } else { samples.len() };
    let mut by_dir: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut max_val = vec![f64::NEG_INFINITY; grid.steps];
    let (mut bad_nodes, mut total) = (0usize, 0usize);
    let mut best: Option<(f64, Value)> = None;
    for p in 0..paths {
        let d = &samples[p];
        let (s, g) = s_and_grad(ctx, d, false, deterministic)?;
        let fs = match &fine {
            Some(f) => Some((s_and_grad(ctx, &f[p], true, deterministic)?, &f[p])),
            None => None,
        };
        for k in 0..grid.steps {
            total += 1;
            let cone = ctx.tangent_cone(&d.u[k * m..(k + 1) * m])?;
            let mut node_bad = false;
            for v in cone.sample_directions(ctx.opts.mesh) {
                let val = pointwise_value(d, &s, &g, k, n, m, &v);
                let fval = fs.as_ref().map(|((s2, g2), fd)| pointwise_value(fd, s2, g2, 2 * k, n, m, &v));
                if p == 0 {
                    by_dir.entry(fmt_vec(&v)).or_insert_with(|| vec![f64::NAN; grid.steps])[k] = val;
                }
                max_val[k] = max_val[k].max(val);
                if val > ctx.threshold(d.se_form[k], ctx.allowance(val, fval)) {
                    node_bad = true;
                    if best.as_ref().map_or(true, |b| val > b.0) {
                        best = Some((val, json!({ "t": grid.t(k), "path": p, "v": v, "value": val })));
                    }
                }
            }
            if node_bad {
                bad_nodes += 1;
            }
        }
    }
    // Directions missing at some nodes (the cone changes along the path) carry NaN; JSON
    // has no NaN, so those entries are dropped from the series.
    let series: BTreeMap<String, Vec<Option<f64>>> = by_dir
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| x.is_finite().then_some(x)).collect()))
        .collect();
    let fraction = bad_nodes as f64 / total.max(1) as f64;
    r.value = max_val.iter().cloned().filter(|x| x.is_finite()).fold(f64::NEG_INFINITY, f64::max);
    if !r.value.is_finite() {
        r.value = 0.0;
    }
    let t: Vec<f64> = (0..grid.steps).map(|k| grid.t(k)).collect();
    r.details.insert("t".into(), json!(t));
    r.details.insert("values_by_direction".into(), json!(series));
    r.details.insert("violating_fraction".into(), json!(fraction));
    r.details.insert("deterministic_s".into(), json!(deterministic));
    if fraction > ctx.opts.node_fraction {
        r.verdict = Verdict::Violated;
        r.witness = best.map(|b| b.1);
    }
    Ok(r)
}

/// Benchmark conditions for convex `U`: `E int <H_u, v> dt <= 0` and, on critical
/// directions, `E int (<H_xx y1, y1>/2 + <H_xu v, y1> + <H_uu v, v>/2) dt - E<g_xx y1(T), y1(T)>/2 <= 0`.
/// Returns the first- and second-order reports.
pub fn convex_benchmark_check(ctx: &CheckContext, dirs: &Directions) -> Result<(ConditionReport, ConditionReport)> {
    if !ctx.constraints.control_set.is_convex() {
        return Err(Error::NotConvexSet);
    }
    let mut first = ctx.report(ConditionId::ConvexFirst);
    let mut second = ctx.report(ConditionId::ConvexSecond);
    let (list, strict) = ctx.resolve(dirs, false)?;
    let list = ctx.filter_tangent(list, strict, false, &mut first.rejected)?;
    let evals = ctx.evaluate(&list, true)?;
    let res1: Vec<DirectionResult> = list
        .iter()
        .zip(&evals)
        .map(|(d, (c, f))| ctx.direction_result(d, Combo::First, c, f.as_ref(), &[T_HU_V]))
        .collect();
    let note = "closure conditions on the directions are not certified; supplied directions are assumed admissible";
    if ctx.second {
        let mut res2 = Vec::new();
        for ((d, (c, f)), r1) in list.iter().zip(&evals).zip(&res1) {
            if r1.value.abs() > r1.threshold {
                second.rejected.push(RejectedDirection {
                    label: d.label.clone(),
                    reason: format!("not critical: E int <H_u, v> dt = {:.3e}", r1.value),
                });
                continue;
            }
            res2.push(ctx.direction_result(d, Combo::Convex, c, f.as_ref(), &[T_HXX, T_HXU, T_HUU, T_GXX]));
        }
        ctx.conclude(&mut second, res2);
    } else {
        second.verdict = Verdict::Inconclusive;
        second.notes.push("second derivatives were not evaluated".into());
    }
    ctx.conclude(&mut first, res1);
    first.notes.push(note.into());
    second.notes.push(note.into());
    Ok((first, second))
}

/// Empty INCONCLUSIVE report, for checks whose preconditions cannot be evaluated.
pub fn inconclusive(ctx: &CheckContext, id: ConditionId) -> ConditionReport {
    let mut r = ctx.report(id);
    r.verdict = Verdict::Inconclusive;
    r
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ids_round_trip() {
        for id in ConditionId::ALL {
            assert_eq!(id.as_str().parse::<ConditionId>().unwrap(), id);
            let s = serde_json::to_string(&id).unwrap();
            assert_eq!(s, format!("\"{}\"", id.as_str()));
        }
        assert!("T9.9".parse::<ConditionId>().is_err());
    }

    #[test]
    fn welford_matches_two_pass() {
        let xs = [1.0, 2.5, -0.5, 4.0, 3.25];
        let mut w = Welford::default();
        for x in xs {
            w.push(x);
        }
        let a = w.estimate();
        let b = Estimate::from_samples(&xs);
        assert!((a.mean - b.mean).abs() < 1e-14);
        assert!((a.std_err - b.std_err).abs() < 1e-14);
    }

    #[test]
    fn labels_are_compact() {
        assert_eq!(fmt_vec(&[1.0, -0.0, 0.5]), "(1,0,0.5)");
        assert_eq!(fmt_vec(&[0.70710678]), "(0.7071)");
    }
}
