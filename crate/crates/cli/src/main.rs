//! `socx` command line: checks necessary optimality conditions of a candidate
//! control on a builtin problem and writes `report.json` plus CSV plot data.
//!
//! Exit codes: 0 all checks pass, 2 some check is violated, 3 some check is
//! inconclusive (and none violated), 1 on any error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use socx::adjoint::{solve_adjoints, AdjointMethod, AdjointOptions};
use socx::conditions::ConditionId;
use socx::config::{DirectionSpec, LawSpec, RunConfig};
use socx::error::{Error, Result};
use socx::export;
use socx::fixtures::builtin_example;
use socx::run::{self, EXIT_ERROR};
use socx::sde::{simulate_state, BrownianBundle, TimeGrid};

#[derive(Parser)]
#[command(name = "socx", version, about = "Necessary optimality conditions for stochastic optimal control, checked by Monte Carlo")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the condition checks on a candidate control.
    Check(CheckArgs),
    /// Tabulate the variational remainder norms along one direction.
    Probe(ProbeArgs),
    /// Simulate state paths (and adjoints) and dump them.
    Simulate(SimulateArgs),
}

#[derive(Copy, Clone, ValueEnum)]
enum Method {
    Auto,
    Ode,
    Regression,
}

impl From<Method> for AdjointMethod {
    fn from(m: Method) -> Self {
        match m {
            Method::Auto => AdjointMethod::Auto,
            Method::Ode => AdjointMethod::Ode,
            Method::Regression => AdjointMethod::Regression,
        }
    }
}

#[derive(Args)]
struct Common {
    /// Builtin problem: ex31, ex41, ex42, ex43, zero, gbm, sphere, counter.
    #[arg(long, conflicts_with = "problem", required_unless_present = "problem")]
    example: Option<String>,
    /// TOML run configuration; flags given on the command line override it.
    #[arg(long, value_name = "PATH")]
    problem: Option<PathBuf>,
    #[arg(long)]
    candidate: Option<String>,
    #[arg(long)]
    paths: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    method: Option<Method>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn config(&self) -> Result<RunConfig> {
        let mut c = match (&self.problem, &self.example) {
            (Some(path), _) => RunConfig::from_file(path)?,
            (None, Some(name)) => RunConfig::for_example(name),
            (None, None) => return Err(Error::Config("one of --example or --problem is required".into())),
        };
        if let Some(v) = &self.candidate {
            c.candidate = Some(v.clone());
            c.control = None;
        }
        if let Some(v) = self.paths {
            c.paths = v;
        }
        if let Some(v) = self.steps {
            c.steps = v;
        }
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.method {
            c.method = v.into();
        }
        if let Some(v) = &self.out {
            c.out = Some(v.clone());
        }
        Ok(c)
    }
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_parser = ["1", "2"])]
    order: Option<String>,
    /// Comma separated condition ids; an empty value runs nothing.
    #[arg(long, value_name = "LIST")]
    checks: Option<String>,
    /// Skip the CSV plot data next to report.json.
    #[arg(long)]
    no_plot_data: bool,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    /// 1 for the first variation remainder, 2 for the second.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=2))]
    order: u8,
    /// Constant direction v, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    v: Vec<f64>,
    /// Constant second-order direction h.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    h: Vec<f64>,
    /// Perturbation sizes.
    #[arg(long, value_delimiter = ',')]
    eps: Vec<f64>,
    /// Report leaving the control set instead of failing.
    #[arg(long)]
    force: bool,
}

#[derive(Copy, Clone, ValueEnum)]
enum Format {
    Csv,
    Binary,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
    /// Also write first and second adjoints along this many paths.
    #[arg(long, default_value_t = 0)]
    adjoint_paths: usize,
}

fn parse_checks(list: &str) -> Result<Vec<ConditionId>> {
    list.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(str::parse)
        .collect()
}

fn check(args: &CheckArgs) -> Result<i32> {
    let mut config = args.common.config()?;
    if let Some(o) = &args.order {
        config.order = o.parse().expect("validated by clap");
    }
    if let Some(list) = &args.checks {
        config.checks = Some(parse_checks(list)?);
    }
    if args.no_plot_data {
        config.plot_data = false;
    }
    let outcome = run::run(&config, &mut |line| println!("{line}"))?;
    for f in &outcome.files {
        println!("wrote {}", f.display());
    }
    if let Some(r) = &outcome.report {
        println!(
            "cost {:.6} (std_err {:.2e}); {} pass, {} violated, {} inconclusive",
            r.cost.mean, r.cost.std_err, r.summary.pass, r.summary.violated, r.summary.inconclusive
        );
    }
    Ok(outcome.exit_code)
}

fn probe(args: &ProbeArgs) -> Result<i32> {
    let config = args.common.config()?;
    let direction = DirectionSpec {
        label: None,
        v: LawSpec::Constant(args.v.clone()),
        h: (!args.h.is_empty()).then(|| LawSpec::Constant(args.h.clone())),
        nu0: None,
        varpi0: None,
    };
    let eps = (!args.eps.is_empty()).then(|| args.eps.clone());
    let (table, files) = run::run_probe(&config, &direction, args.order, eps, args.force)?;
    print!("{}", table.to_csv());
    println!(
        "status {:?}, slope {}, floor {:.2e}, membership defect {:.2e}",
        table.status,
        table.slope.map_or("n/a".to_string(), |s| format!("{s:.3}")),
        table.floor,
        table.max_membership_defect
    );
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(0)
}

fn simulate(args: &SimulateArgs) -> Result<i32> {
    let config = args.common.config()?;
    config.validate()?;
    let out = config
        .out
        .clone()
        .ok_or_else(|| Error::Config("simulate needs --out".into()))?;
    let ex = builtin_example(&config.example)?;
    let cand = config.resolve_candidate(&ex.candidates, ex.problem.control_dim)?;
    let x0 = &ex.constraints.initial_point;
    let brownian = BrownianBundle::new(config.seed, config.paths, TimeGrid::new(ex.problem.horizon, config.steps)?);
    let bundle = simulate_state(&ex.problem, &cand, x0, &brownian)?;
    let mut files = match args.format {
        Format::Csv => export::write_bundle_csv(&bundle, &out)?,
        Format::Binary => {
            std::fs::create_dir_all(&out)?;
            let f = out.join("paths.bin");
            export::write_bundle_binary(&bundle, &f)?;
            vec![f]
        }
    };
    if args.adjoint_paths > 0 {
        let opts = AdjointOptions {
            method: config.method,
            ..AdjointOptions::default()
        };
        let adj = solve_adjoints(&ex.problem, &cand, x0, &brownian, &opts, true)?;
        files.push(export::write_adjoint_csv(&adj, &bundle, args.adjoint_paths, &out)?);
    }
    for f in &files {
        println!("wrote {}", f.display());
    }
    Ok(0)
}

fn threads_from_env() -> Result<()> {
    let Ok(v) = std::env::var("SOCX_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("SOCX_THREADS must be a positive integer, got `{v}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(e.to_string()))
}

fn source(c: &Command) -> String {
    let common = match c {
        Command::Check(a) => &a.common,
        Command::Probe(a) => &a.common,
        Command::Simulate(a) => &a.common,
    };
    common
        .problem
        .as_deref()
        .map(Path::display)
        .map(|p| p.to_string())
        .or_else(|| common.example.clone())
        .unwrap_or_default()
}

fn main() -> ExitCode {
    // clap uses exit status 2 for usage errors, which would read as a violation.
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_ERROR as u8 } else { 0 });
        }
    };
    let result = threads_from_env().and_then(|()| match &cli.command {
        Command::Check(a) => check(a),
        Command::Probe(a) => probe(a),
        Command::Simulate(a) => simulate(a),
    });
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {}: {e}", source(&cli.command));
            ExitCode::from(EXIT_ERROR as u8)
        }
    }
}
