use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use socx::config::{DirectionSpec, LawSpec, RunConfig};
use socx::run::{run_probe, RunReport};

fn socx(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_socx"))
        .args(args)
        .env("SOCX_THREADS", "2")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn report(dir: &Path) -> RunReport {
    RunReport::from_json(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap()
}

#[test]
fn ex31_zero_order_one_is_violated() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = socx(&["check", "--example", "ex31", "--candidate", "zero", "--order", "1", "--paths", "4000", "--out", out]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("witness=v=(1,0)"), "{stdout}");
    let r = report(dir.path());
    let t31 = &r.checks[0];
    assert_eq!(t31.condition.as_str(), "T3.1-integral");
    assert_eq!(t31.witness.as_ref().unwrap()["label"], "v=(1,0)");
    assert_eq!(r.exit_code(), 2);

    // The guide's figure data: P1 component 2 is (1 - t) / 2 along u = 0.
    let csv = fs::read_to_string(dir.path().join("hu_path.csv")).unwrap();
    let mut lines = csv.lines();
    let head: Vec<&str> = lines.next().unwrap().split(',').collect();
    let (it, ip) = (0, head.iter().position(|h| *h == "p1_2").unwrap());
    let mut rows = 0;
    for line in lines {
        let cols: Vec<f64> = line.split(',').map(|c| c.parse().unwrap()).collect();
        assert!((cols[ip] - (1.0 - cols[it]) / 2.0).abs() < 1e-8, "{line}");
        rows += 1;
    }
    assert_eq!(rows, 257);
}

#[test]
fn ex31_optimal_order_two_passes() {
    let o = socx(&["check", "--example", "ex31", "--candidate", "optimal", "--order", "2", "--paths", "4000"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
}

#[test]
fn ex42_order_two_is_violated_at_one_eighth() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = socx(&["check", "--example", "ex42", "--candidate", "zero", "--order", "2", "--paths", "4000", "--out", out]);
    assert_eq!(code(&o), 2);
    let r = report(dir.path());
    let t41 = r.checks.iter().find(|c| c.condition.as_str() == "T4.1-integral").unwrap();
    assert!((t41.value - 0.125).abs() < 0.0125, "{}", t41.value);
    assert_eq!(r.checks[0].verdict.to_string(), "PASS");
}

#[test]
fn reports_round_trip_and_repeat_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        let o = socx(&["check", "--example", "ex43", "--paths", "2000", "--out", out.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        fs::read_to_string(out.join("report.json")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let parsed = RunReport::from_json(&a).unwrap();
    assert_eq!(parsed.to_json().unwrap(), a);
    let raw: Value = serde_json::from_str(&a).unwrap();
    assert_eq!(raw["schema_version"], 1);
    for (c, j) in parsed.checks.iter().zip(raw["checks"].as_array().unwrap()) {
        assert_eq!(j["verdict"], c.verdict.to_string());
    }
}

#[test]
fn empty_check_list_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = socx(&["check", "--example", "ex31", "--checks", "", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    assert!(!out.exists());
}

#[test]
fn selected_checks_only() {
    let o = socx(&["check", "--example", "ex42", "--checks", "T3.1-integral,D4.1-singularity", "--paths", "500"]);
    assert_eq!(code(&o), 0);
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert!(stdout.contains("T3.1-integral") && stdout.contains("D4.1-singularity"));
    assert!(!stdout.contains("T4.1"));
}

#[test]
fn errors_exit_with_one() {
    for args in [
        vec!["check", "--example", "ex99"],
        vec!["check", "--example", "ex31", "--candidate", "nope"],
        vec!["check", "--example", "ex31", "--checks", "T9.9"],
        vec!["check", "--example", "ex31", "--paths", "0"],
        vec!["check"],
        vec!["check", "--example", "ex31", "--order", "3"],
    ] {
        let o = socx(&args);
        assert_eq!(code(&o), 1, "{args:?}");
        assert!(!o.stderr.is_empty());
    }
    let o = Command::new(env!("CARGO_BIN_EXE_socx"))
        .args(["check", "--example", "ex31", "--checks", ""])
        .env("SOCX_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn toml_config_drives_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(
        &cfg,
        r#"
schema_version = 1
example = "ex31"
candidate = "zero"
order = 1
paths = 1000
checks = ["T3.1-integral"]

[[directions]]
v = [0.0, 1.0]
"#,
    )
    .unwrap();
    // v = (0,1) is orthogonal to H_u, so the check passes.
    let o = socx(&["check", "--problem", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    fs::write(&cfg, "example = \"ex31\"\nbogus = 1\n").unwrap();
    let o = socx(&["check", "--problem", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("bogus"));
}

#[test]
fn decay_csv_matches_the_probe_table() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("probe");
    let o = socx(&[
        "probe", "--example", "ex42", "--order", "2", "--v", "0,1", "--h", "0.5,0", "--force", "--paths", "300", "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let mut config = RunConfig::for_example("ex42");
    config.paths = 300;
    let dir_spec = DirectionSpec {
        label: None,
        v: LawSpec::Constant(vec![0.0, 1.0]),
        h: Some(LawSpec::Constant(vec![0.5, 0.0])),
        nu0: None,
        varpi0: None,
    };
    let (table, _) = run_probe(&config, &dir_spec, 2, None, true).unwrap();
    assert_eq!(fs::read_to_string(out.join("decay.csv")).unwrap(), table.to_csv());
    assert_eq!(table.rows.len(), 4);
}

#[test]
fn simulate_dumps_paths() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = socx(&["simulate", "--example", "ex31", "--paths", "3", "--steps", "8", "--adjoint-paths", "2", "--out", out]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["x.csv", "u.csv", "w.csv", "adjoint.csv"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let o = socx(&["simulate", "--example", "ex31", "--paths", "3", "--steps", "8", "--format", "binary", "--out", out]);
    assert_eq!(code(&o), 0);
    let b = socx::export::read_bundle_binary(&dir.path().join("paths.bin")).unwrap();
    assert_eq!((b.paths, b.grid.steps), (3, 8));
}
