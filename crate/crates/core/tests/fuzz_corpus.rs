//! Replays the checked-in fuzz corpus through the same checks the fuzz
//! targets run, so parser regressions show up under plain `cargo test`.

use std::fs;
use std::path::{Path, PathBuf};

use cvarrl::driver::{ExperimentConfig, RunConfig, RunResult};
use cvarrl::env::{AugmentedPolicy, Instance};
use cvarrl::learn::TransitionDataset;
use cvarrl::plan_exact::ValueSnapshot;

fn seeds(target: &str) -> Vec<(PathBuf, String)> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("fuzz/corpus").join(target);
    let mut out: Vec<(PathBuf, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| e.unwrap().path())
        .map(|p| {
            let text = fs::read_to_string(&p).unwrap();
            (p, text)
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

/// Seeds whose names mark them as malformed must be rejected; all others must parse.
fn expect_valid(path: &Path) -> bool {
    let name = path.file_stem().unwrap().to_str().unwrap();
    !["bad_", "invalid", "mismatch", "zero_step"].iter().any(|p| name.starts_with(p))
}

fn replay<T>(target: &str, parse: impl Fn(&str) -> Option<T>, round_trip: impl Fn(&T)) {
    for (path, text) in seeds(target) {
        match parse(&text) {
            Some(value) => {
                assert!(expect_valid(&path), "{} should be rejected", path.display());
                round_trip(&value);
            }
            None => assert!(!expect_valid(&path), "{} should parse", path.display()),
        }
    }
}

#[test]
fn instance_seeds() {
    replay(
        "instance",
        |t| Instance::from_json(t).ok(),
        |inst| {
            assert_eq!(&Instance::from_json(&inst.to_json()).unwrap(), inst);
        },
    );
}

#[test]
fn run_config_seeds() {
    replay(
        "run_config",
        |t| RunConfig::from_json(t).ok(),
        |cfg| {
            assert_eq!(&RunConfig::from_json(&serde_json::to_string(cfg).unwrap()).unwrap(), cfg);
        },
    );
}

#[test]
fn experiment_config_seeds() {
    replay(
        "experiment_config",
        |t| ExperimentConfig::from_json(t).ok(),
        |cfg| {
            assert_eq!(&ExperimentConfig::from_json(&serde_json::to_string(cfg).unwrap()).unwrap(), cfg);
        },
    );
}

#[test]
fn dataset_seeds() {
    replay(
        "dataset",
        |t| TransitionDataset::from_jsonl(t, 3, 3, 2).ok(),
        |ds| {
            assert_eq!(&TransitionDataset::from_jsonl(&ds.to_jsonl(), 3, 3, 2).unwrap(), ds);
        },
    );
}

#[test]
fn policy_seeds() {
    replay(
        "policy",
        |t| serde_json::from_str::<AugmentedPolicy>(t).ok(),
        |p| {
            let again: AugmentedPolicy = serde_json::from_str(&serde_json::to_string(p).unwrap()).unwrap();
            assert_eq!(&again, p);
        },
    );
}

#[test]
fn value_table_seeds() {
    replay(
        "value_table",
        |t| ValueSnapshot::from_json(t).ok(),
        |snap| {
            assert_eq!(snap.values.len(), snap.horizon + 1);
        },
    );
}

#[test]
fn run_result_seeds() {
    replay(
        "run_result",
        |t| RunResult::from_json(t).ok(),
        |r| {
            assert_eq!(r.metrics_csv().unwrap().lines().count(), r.records.len() + 1);
        },
    );
}

#[test]
fn truncated_seeds_never_panic() {
    for target in ["instance", "run_config", "experiment_config", "dataset", "policy", "value_table", "run_result"] {
        for (_, text) in seeds(target) {
            for cut in (0..text.len()).step_by(7).filter(|c| text.is_char_boundary(*c)) {
                let prefix = &text[..cut];
                let _ = Instance::from_json(prefix);
                let _ = RunConfig::from_json(prefix);
                let _ = ExperimentConfig::from_json(prefix);
                let _ = TransitionDataset::from_jsonl(prefix, 3, 3, 2);
                let _ = serde_json::from_str::<AugmentedPolicy>(prefix);
                let _ = ValueSnapshot::from_json(prefix);
                let _ = RunResult::from_json(prefix);
            }
        }
    }
}
