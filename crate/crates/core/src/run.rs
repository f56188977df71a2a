//! Orchestration of a full check run: configuration in, report and plot data out.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::adjoint::{AdjointOptions, SolverMeta};
use crate::conditions::{self as cond, CheckContext, CheckOptions, ConditionId, ConditionReport, Directions, GridInfo, MeanSeries, Verdict};
use crate::config::{DirectionSpec, RunConfig, SCHEMA_VERSION};
use crate::cones::ConeDescriptor;
use crate::error::{Error, Result};
use crate::fixtures::{builtin_example, Example};
use crate::problem::CandidateControl;
use crate::sde::{estimate_cost_streaming, BrownianBundle, Estimate, TimeGrid};
use crate::variational::{remainder_probe_first, remainder_probe_second, DecayTable, ProbeOptions, VariationDirection};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_VIOLATED: i32 = 2;
pub const EXIT_INCONCLUSIVE: i32 = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedCheck {
    pub condition: ConditionId,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub pass: usize,
    pub violated: usize,
    pub inconclusive: usize,
    pub exit_code: i32,
}

/// Contents of `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub problem: String,
    pub candidate: String,
    pub candidate_law: Value,
    pub order: u8,
    pub grid: GridInfo,
    pub solver: SolverMeta,
    pub cost: Estimate,
    pub checks: Vec<ConditionReport>,
    pub skipped: Vec<SkippedCheck>,
    pub summary: Summary,
}

impl RunReport {
    pub fn get(&self, id: ConditionId) -> Option<&ConditionReport> {
        self.checks.iter().find(|r| r.condition == id)
    }

    pub fn exit_code(&self) -> i32 {
        exit_code(&self.checks)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let r: RunReport = serde_json::from_str(s)?;
        if r.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!("report schema_version {} is not supported", r.schema_version)));
        }
        Ok(r)
    }
}

pub fn exit_code(reports: &[ConditionReport]) -> i32 {
    if reports.iter().any(|r| r.verdict == Verdict::Violated) {
        EXIT_VIOLATED
    } else if reports.iter().any(|r| r.verdict == Verdict::Inconclusive) {
        EXIT_INCONCLUSIVE
    } else {
        EXIT_PASS
    }
}

/// Checks run by default for an order.
pub fn default_checks(order: u8) -> Vec<ConditionId> {
    ConditionId::ALL
        .into_iter()
        .filter(|c| order >= 2 || !c.is_second_order())
        .filter(|c| *c != ConditionId::SingularStep)
        .collect()
}

/// Outcome of [`run`]: the report (absent for an empty check list), the files
/// written, the mean adjoint series used for plotting, and the exit code.
#[derive(Debug)]
pub struct RunOutcome {
    pub report: Option<RunReport>,
    pub files: Vec<PathBuf>,
    pub series: Option<MeanSeries>,
    pub exit_code: i32,
}

pub fn check_options(config: &RunConfig) -> CheckOptions {
    CheckOptions {
        paths: config.paths,
        steps: config.steps,
        seed: config.seed,
        adjoint: AdjointOptions {
            method: config.method,
            ..AdjointOptions::default()
        },
        sigma_multiplier: config.tolerances.sigma_multiplier,
        allowance_factor: config.tolerances.allowance_factor,
        absolute_tolerance: config.tolerances.absolute,
        node_fraction: config.tolerances.node_fraction,
        refine: config.tolerances.refine,
        ..CheckOptions::default()
    }
}

fn load(config: &RunConfig) -> Result<(Example, CandidateControl)> {
    config.validate()?;
    let ex = builtin_example(&config.example)?;
    let cand = config.resolve_candidate(&ex.candidates, ex.problem.control_dim)?;
    Ok((ex, cand))
}

fn user_directions(config: &RunConfig, ex: &Example) -> Result<Directions> {
    if config.directions.is_empty() {
        return Ok(Directions::Battery);
    }
    let (n, m) = (ex.problem.state_dim, ex.problem.control_dim);
    Ok(Directions::User(
        config
            .directions
            .iter()
            .map(|d| d.to_direction(n, m))
            .collect::<Result<_>>()?,
    ))
}

fn summary_line(r: &ConditionReport) -> String {
    let mut s = format!("{:<24} {:<12} value={:.6} std_err={:.2e}", r.condition.as_str(), r.verdict.to_string(), r.value, r.std_err);
    if let Some(w) = &r.witness {
        let label = w.get("label").and_then(|l| l.as_str()).map(String::from).unwrap_or_else(|| w.to_string());
        let _ = write!(s, " witness={label}");
    }
    s
}

struct Collected<'a> {
    log: &'a mut dyn FnMut(&str),
    reports: Vec<ConditionReport>,
    skipped: Vec<SkippedCheck>,
}

impl Collected<'_> {
    fn emit(&mut self, r: ConditionReport) {
        (self.log)(&summary_line(&r));
        self.reports.push(r);
    }

    fn skip(&mut self, condition: ConditionId, reason: &str) {
        (self.log)(&format!("{:<24} skipped: {reason}", condition.as_str()));
        self.skipped.push(SkippedCheck {
            condition,
            reason: reason.to_string(),
        });
    }
}

/// Runs the configured checks. `log` receives one line per check.
pub fn run(config: &RunConfig, log: &mut dyn FnMut(&str)) -> Result<RunOutcome> {
    let (ex, cand) = load(config)?;
    let checks = config.checks.clone().unwrap_or_else(|| default_checks(config.order));
    if checks.is_empty() {
        log("no checks requested");
        return Ok(RunOutcome {
            report: None,
            files: Vec::new(),
            series: None,
            exit_code: EXIT_PASS,
        });
    }
    let second = config.order >= 2 || checks.iter().any(|c| c.is_second_order());
    let opts = check_options(config);
    let ctx = CheckContext::new(&ex.problem, &ex.constraints, &cand, opts, second)?;
    let dirs = user_directions(config, &ex)?;
    ctx.prefetch(&checks, &dirs)?;
    let wants = |c: ConditionId| checks.contains(&c);
    let mut out = Collected {
        log,
        reports: Vec::new(),
        skipped: Vec::new(),
    };
    use ConditionId::*;
    if wants(FirstIntegral) {
        out.emit(cond::first_order_integral_check(&ctx, &dirs)?);
    }
    if wants(FirstTransversality) {
        out.emit(cond::first_order_transversality_check(&ctx)?);
    }
    if wants(FirstPointwise) {
        out.emit(cond::first_order_pointwise_check(&ctx)?);
    }
    if wants(SecondIntegral) {
        out.emit(cond::second_order_integral_check(&ctx, &dirs)?);
    }
    if wants(SecondTransversality) {
        out.emit(cond::second_order_transversality_check(&ctx)?);
    }
    if wants(MixedConstraint) {
        if matches!(ex.constraints.control_set, ConeDescriptor::Smooth(_)) {
            out.emit(cond::mixed_constraint_second_order_check(&ctx, &dirs)?);
        } else {
            out.skip(MixedConstraint, "control set is not given by smooth constraints");
        }
    }
    let singular_needed = [Singularity, SingularIntegral, SingularPointwise, SingularStep]
        .iter()
        .any(|c| wants(*c));
    let singular = if singular_needed {
        let r = cond::singularity_test(&ctx)?;
        let s = r.details.get("singular") == Some(&Value::Bool(true));
        if wants(Singularity) {
            out.emit(r);
        }
        s
    } else {
        false
    };
    if wants(SingularIntegral) {
        if singular {
            out.emit(cond::singular_integral_check(&ctx, &dirs)?);
        } else {
            out.skip(SingularIntegral, "candidate is not partially singular");
        }
    }
    if wants(SingularPointwise) || wants(SingularStep) {
        let id = if cand.law.is_step() { SingularStep } else { SingularPointwise };
        if !singular {
            out.skip(id, "candidate is not partially singular");
        } else {
            match cond::pointwise_second_order_check(&ctx) {
                Ok(r) => out.emit(r),
                Err(Error::MalliavinUnavailable(why)) => {
                    let mut r = cond::inconclusive(&ctx, id);
                    r.notes.push(format!("Malliavin derivative of S unavailable: {why}"));
                    out.emit(r);
                }
                Err(e) => return Err(e),
            }
        }
    }
    if wants(ConvexFirst) || wants(ConvexSecond) {
        if ex.constraints.control_set.is_convex() {
            let (a, b) = cond::convex_benchmark_check(&ctx, &dirs)?;
            if wants(ConvexFirst) {
                out.emit(a);
            }
            if wants(ConvexSecond) {
                out.emit(b);
            }
        } else {
            for c in [ConvexFirst, ConvexSecond].into_iter().filter(|c| wants(*c)) {
                out.skip(c, "control set is not convex");
            }
        }
    }
    let cost = estimate_cost_streaming(
        &ex.problem,
        &cand,
        &ex.constraints.initial_point,
        &BrownianBundle::new(config.seed, config.paths, TimeGrid::new(ex.problem.horizon, config.steps)?),
    )?;
    let Collected { reports, skipped, .. } = out;
    let code = exit_code(&reports);
    let count = |v: Verdict| reports.iter().filter(|r| r.verdict == v).count();
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        problem: ex.problem.name.clone(),
        candidate: cand.name.clone(),
        candidate_law: cand.law.describe(),
        order: config.order,
        grid: GridInfo {
            steps: config.steps,
            paths: config.paths,
            seed: config.seed,
            refined: config.tolerances.refine,
        },
        solver: ctx.adjoint().meta.clone(),
        cost,
        summary: Summary {
            pass: count(Verdict::Pass),
            violated: count(Verdict::Violated),
            inconclusive: count(Verdict::Inconclusive),
            exit_code: code,
        },
        checks: reports,
        skipped,
    };
    let series = ctx.mean_series()?;
    let mut files = Vec::new();
    if let Some(dir) = &config.out {
        files.push(write_report(&report, dir)?);
        if config.plot_data {
            files.extend(emit_plot_data(&report, Some(&series), dir)?);
        }
    }
    Ok(RunOutcome {
        report: Some(report),
        files,
        series: Some(series),
        exit_code: code,
    })
}

pub fn write_report(report: &RunReport, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let path = dir.join("report.json");
    fs::write(&path, report.to_json()?)?;
    Ok(path)
}

fn num(v: &Value) -> String {
    v.as_f64().map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `hu_path.csv` (mean `P1`, `Q1`, `H_u` per node) when a series is
/// given, and one CSV per check that carries a time series. Returns the files.
pub fn emit_plot_data(report: &RunReport, series: Option<&MeanSeries>, dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    if report.checks.is_empty() {
        return Ok(files);
    }
    fs::create_dir_all(dir)?;
    if let Some(s) = series {
        let (n, m) = (s.p1[0].len(), s.hu[0].len());
        let mut out = String::from("t");
        for (name, d) in [("p1", n), ("q1", n), ("hu", m)] {
            for i in 1..=d {
                let _ = write!(out, ",{name}_{i}");
            }
        }
        out.push('\n');
        for k in 0..s.t.len() {
            let _ = write!(out, "{}", s.t[k]);
            for v in s.p1[k].iter().chain(&s.q1[k]).chain(&s.hu[k]) {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        let path = dir.join("hu_path.csv");
        fs::write(&path, out)?;
        files.push(path);
    }
    for r in &report.checks {
        let mut out = String::new();
        if let Some(series) = r.details.get("series") {
            out.push_str("t,max_value,flagged_fraction\n");
            let (t, v, f) = (&series["t"], &series["max_value"], &series["flagged"]);
            for k in 0..t.as_array().map_or(0, |a| a.len()) {
                let _ = writeln!(out, "{},{},{}", num(&t[k]), num(&v[k]), num(&f[k]));
            }
        } else if let (Some(t), Some(by)) = (r.details.get("t"), r.details.get("values_by_direction")) {
            let by = by.as_object().expect("object of series");
            out.push('t');
            for label in by.keys() {
                let _ = write!(out, ",\"v={label}\"");
            }
            out.push('\n');
            for k in 0..t.as_array().map_or(0, |a| a.len()) {
                out.push_str(&num(&t[k]));
                for vals in by.values() {
                    let _ = write!(out, ",{}", num(&vals[k]));
                }
                out.push('\n');
            }
        } else {
            continue;
        }
        let path = dir.join(format!("{}.csv", r.condition.as_str()));
        fs::write(&path, out)?;
        files.push(path);
    }
    Ok(files)
}

/// Remainder probe along one direction; writes `decay.csv` and `decay.json`
/// when the configuration names an output directory.
pub fn run_probe(config: &RunConfig, direction: &DirectionSpec, order: u8, eps: Option<Vec<f64>>, force: bool) -> Result<(DecayTable, Vec<PathBuf>)> {
    let (ex, cand) = load(config)?;
    let dir = direction.to_direction(ex.problem.state_dim, ex.problem.control_dim)?;
    let mut opts = ProbeOptions {
        paths: config.paths,
        steps: config.steps,
        seed: config.seed,
        force,
        ..ProbeOptions::default()
    };
    if let Some(e) = eps {
        opts.eps = e;
    }
    let table = match order {
        1 => remainder_probe_first(&ex.problem, &ex.constraints, &cand, &dir, &opts)?,
        2 => remainder_probe_second(&ex.problem, &ex.constraints, &cand, &dir, &opts)?,
        o => return Err(Error::Config(format!("probe order must be 1 or 2, got {o}"))),
    };
    let mut files = Vec::new();
    if let Some(out) = &config.out {
        fs::create_dir_all(out)?;
        let csv = out.join("decay.csv");
        fs::write(&csv, table.to_csv())?;
        let json = out.join("decay.json");
        fs::write(&json, serde_json::to_string_pretty(&table)? + "\n")?;
        files.extend([csv, json]);
    }
    Ok((table, files))
}

/// Direction from a report witness, for re-running a single check.
pub fn witness_direction(witness: &Value, n: usize, m: usize) -> Result<VariationDirection> {
    let d = witness
        .get("direction")
        .ok_or_else(|| Error::Config("witness carries no direction".into()))?;
    let mut spec = DirectionSpec::from_report(d)?;
    if spec.label.is_none() {
        spec.label = witness.get("label").and_then(|l| l.as_str()).map(String::from);
    }
    spec.to_direction(n, m)
}
