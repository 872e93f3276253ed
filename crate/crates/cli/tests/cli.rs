use std::fs;
use std::path::{Path, PathBuf};

use cvarrl::driver::RunResult;
use cvarrl::Error;
use cvarrl_cli::{cli_main, exit_code, EXIT_CONFIG, EXIT_NUMERIC, EXIT_OK};

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn cli(args: &[&str]) -> (i32, String) {
    let mut out = Vec::new();
    let argv = std::iter::once("cvarrl").chain(args.iter().copied());
    let code = cli_main(argv, &mut out);
    (code, String::from_utf8(out).unwrap())
}

fn field(output: &str, key: &str) -> f64 {
    output
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|rest| rest.split_whitespace().next().unwrap().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` in {output:?}"))
}

#[test]
fn oracle_on_two_path_instance() {
    let inst = data("two_path.json");
    let (code, out) = cli(&["oracle", "--instance", inst.to_str().unwrap(), "--tau", "0.5"]);
    assert_eq!(code, EXIT_OK);
    assert!((field(&out, "cvar_star") - 0.8).abs() <= 1e-9);
    assert!((field(&out, "budget") - 0.8).abs() <= 1e-9);
}

#[test]
fn run_then_eval_reproduces_the_last_iterate() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.json");
    fs::copy(data("two_path_ela.json"), &config).unwrap();
    fs::copy(data("two_path.json"), dir.path().join("two_path.json")).unwrap();
    let out_dir = dir.path().join("out");
    let (code, out) = cli(&["run", "--config", config.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert!((field(&out, "cvar_star") - 0.8).abs() <= 1e-9);

    let result_path = out_dir.join("result.json");
    let result = RunResult::from_json(&fs::read_to_string(&result_path).unwrap()).unwrap();
    assert_eq!(result.records.len(), 25);
    let metrics = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 26);

    let inst = data("two_path.json");
    for (pick, expected) in [
        ("last", result.records.last().unwrap().cvar_true_of_iterate),
        ("best", result.best.cvar_true),
        ("sampled", result.sampled.cvar_true),
    ] {
        let (code, out) = cli(&[
            "eval",
            "--instance",
            inst.to_str().unwrap(),
            "--policy",
            result_path.to_str().unwrap(),
            "--tau",
            "0.5",
            "--pick",
            pick,
        ]);
        assert_eq!(code, EXIT_OK);
        assert!((field(&out, "cvar") - expected).abs() <= 1e-9, "{pick}: {out}");
    }

    let policy_path = dir.path().join("policy.json");
    fs::write(&policy_path, serde_json::to_string(&result.last.policy).unwrap()).unwrap();
    let budget = result.last.budget.to_string();
    let (code, out) = cli(&[
        "eval",
        "--instance",
        inst.to_str().unwrap(),
        "--policy",
        policy_path.to_str().unwrap(),
        "--tau",
        "0.5",
        "--budget",
        &budget,
    ]);
    assert_eq!(code, EXIT_OK);
    assert!((field(&out, "cvar") - result.last.cvar_true).abs() <= 1e-9);
    let (code, _) =
        cli(&["eval", "--instance", inst.to_str().unwrap(), "--policy", policy_path.to_str().unwrap(), "--tau", "0.5"]);
    assert_eq!(code, EXIT_CONFIG);
}

#[test]
fn gen_env_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for path in [&a, &b] {
        let (code, _) = cli(&["gen-env", "--seed", "7", "--out", path.to_str().unwrap()]);
        assert_eq!(code, EXIT_OK);
    }
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let c = dir.path().join("c.json");
    cli(&["gen-env", "--seed", "8", "--out", c.to_str().unwrap()]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&c).unwrap());
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let inst = data("two_path.json");
    let missing = dir.path().join("missing.json");
    assert_eq!(cli(&["oracle", "--instance", missing.to_str().unwrap(), "--tau", "0.5"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["oracle", "--instance", inst.to_str().unwrap(), "--tau", "1.5"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["oracle", "--instance", inst.to_str().unwrap()]).0, EXIT_CONFIG);
    assert_eq!(cli(&["frobnicate"]).0, EXIT_CONFIG);
    assert_eq!(cli(&["props", "--suite", "nope"]).0, EXIT_CONFIG);

    let bad = dir.path().join("bad.json");
    fs::write(&bad, fs::read_to_string(data("two_path_ela.json")).unwrap().replace("\"exact\"", "\"lsvi\"")).unwrap();
    let out_dir = dir.path().join("out");
    assert_eq!(cli(&["run", "--config", bad.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]).0, EXIT_CONFIG);
    fs::write(&bad, "{not json").unwrap();
    assert_eq!(cli(&["run", "--config", bad.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]).0, EXIT_CONFIG);
    assert_eq!(cli(&["gen-env", "--states", "0", "--out", bad.to_str().unwrap()]).0, EXIT_CONFIG);
}

#[test]
fn numerical_failures_exit_with_three() {
    assert_eq!(exit_code(&Error::SingularMatrix), EXIT_NUMERIC);
    assert_eq!(exit_code(&Error::InvariantViolation("negative regret".into())), EXIT_NUMERIC);
    assert_eq!(exit_code(&Error::InvalidTau(2.0)), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::Parse("x".into())), EXIT_CONFIG);
}

#[test]
fn props_reports_each_suite() {
    let (code, out) = cli(&["props", "--suite", "eigen", "--cases", "5", "--seed", "3"]);
    assert_eq!(code, EXIT_OK);
    assert!(out.starts_with("PASS eigen held 5/5"), "{out}");
    let (code, out) = cli(&["props", "--cases", "2"]);
    assert_eq!(code, EXIT_OK, "{out}");
    assert_eq!(out.lines().count(), 7);
}

#[test]
fn help_exits_cleanly() {
    assert_eq!(cli(&["--help"]).0, EXIT_OK);
}

#[test]
fn binary_propagates_exit_codes() {
    let inst = data("two_path.json");
    let bin = env!("CARGO_BIN_EXE_cvarrl");
    let run = |tau: &str| {
        std::process::Command::new(bin)
            .args(["oracle", "--instance", inst.to_str().unwrap(), "--tau", tau])
            .output()
            .unwrap()
    };
    let ok = run("0.5");
    assert_eq!(ok.status.code(), Some(EXIT_OK));
    assert!(String::from_utf8_lossy(&ok.stdout).starts_with("cvar_star 0.8"));
    assert_eq!(run("0").status.code(), Some(EXIT_CONFIG));
}
