//! Command-line front end: instance generation, oracle queries, learning runs,
//! policy re-evaluation and the lemma property suites.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use cvarrl::driver::{cvar_of_iterate, run_with_sink, ExperimentConfig, GenerateSpec, IterationRecord, RunResult};
use cvarrl::env::{AugmentedPolicy, Instance};
use cvarrl::plan_exact::enumerate_cvar_oracle;
use cvarrl::props::Suite;
use cvarrl::risk::BudgetGrid;
use cvarrl::Error;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "cvarrl", about = "CVaR reinforcement learning in low-rank MDPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a random tabular instance as JSON.
    GenEnv {
        #[arg(long, default_value_t = 3)]
        states: usize,
        #[arg(long, default_value_t = 2)]
        actions: usize,
        #[arg(long, default_value_t = 3)]
        horizon: usize,
        #[arg(long, default_value_t = 0.1)]
        upsilon: f64,
        #[arg(long, default_value_t = 1.0)]
        dirichlet_alpha: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the optimal CVaR and its initial budget.
    Oracle {
        #[arg(long)]
        instance: PathBuf,
        #[arg(long)]
        tau: f64,
    },
    /// Run ELA or ELLA from an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Re-evaluate a stored policy in a stored instance.
    Eval {
        #[arg(long)]
        instance: PathBuf,
        /// A policy JSON file, or a `result.json` written by `run`.
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        tau: f64,
        /// Initial budget; required for plain policy files.
        #[arg(long)]
        budget: Option<f64>,
        /// Which iterate of a result file to evaluate.
        #[arg(long, value_enum, default_value_t = Pick::Last)]
        pick: Pick,
    },
    /// Run the lemma property suites.
    Props {
        /// Run a single suite by name.
        #[arg(long)]
        suite: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Override the number of cases per suite.
        #[arg(long)]
        cases: Option<usize>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Pick {
    Last,
    Sampled,
    Best,
}

/// Exit code for a library error: numerical failures map to 3, everything
/// that traces back to inputs maps to 2.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::SingularMatrix | Error::InvariantViolation(_) => EXIT_NUMERIC,
        _ => EXIT_CONFIG,
    }
}

/// Parses `argv` (program name first) and runs the command, writing
/// human-readable output to `out`.
pub fn cli_main<I, T>(argv: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    match execute(cli.command, out) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn read(path: &Path) -> cvarrl::Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn load_instance(path: &Path) -> cvarrl::Result<Instance> {
    Instance::from_json(&read(path)?)
}

fn emit(out: &mut dyn Write, line: std::fmt::Arguments) -> cvarrl::Result<()> {
    writeln!(out, "{line}").map_err(Error::Io)
}

fn execute(command: Command, out: &mut dyn Write) -> cvarrl::Result<i32> {
    match command {
        Command::GenEnv { states, actions, horizon, upsilon, dirichlet_alpha, seed, out: path } => {
            let spec =
                GenerateSpec { num_states: states, num_actions: actions, horizon, upsilon, dirichlet_alpha, seed };
            let instance = spec.build()?;
            fs::write(&path, instance.to_json())?;
            emit(out, format_args!("wrote {}", path.display()))?;
        }
        Command::Oracle { instance, tau } => {
            let inst = load_instance(&instance)?;
            let grid = BudgetGrid::new(inst.rewards.upsilon(), inst.model.horizon())?;
            let res = enumerate_cvar_oracle(&inst.model, &inst.rewards, tau, &grid)?;
            emit(out, format_args!("cvar_star {}", res.cvar_star))?;
            emit(out, format_args!("budget {}", grid.value(res.budget_index)))?;
        }
        Command::Run { config, out_dir } => run(&config, &out_dir, out)?,
        Command::Eval { instance, policy, tau, budget, pick } => {
            let inst = load_instance(&instance)?;
            let text = read(&policy)?;
            let (policy, budget_index) = match (RunResult::from_json(&text), budget) {
                (Ok(result), None) => {
                    let choice = match pick {
                        Pick::Last => result.last,
                        Pick::Sampled => result.sampled,
                        Pick::Best => result.best,
                    };
                    (choice.policy, choice.budget_index)
                }
                (_, Some(c)) => {
                    let policy: AugmentedPolicy = match RunResult::from_json(&text) {
                        Ok(result) => result.last.policy,
                        Err(_) => serde_json::from_str(&text)?,
                    };
                    let index = policy.grid().index_of(c);
                    (policy, index)
                }
                (Err(_), None) => return Err(Error::ConfigInvalid("plain policy files need --budget".into())),
            };
            let value = cvar_of_iterate(&inst.model, &inst.rewards, &policy, budget_index, tau)?;
            emit(out, format_args!("cvar {value}"))?;
        }
        Command::Props { suite, seed, cases } => {
            let suites =
                match suite {
                    Some(name) => vec![Suite::from_name(&name)
                        .ok_or_else(|| Error::ConfigInvalid(format!("unknown suite `{name}`")))?],
                    None => Suite::ALL.to_vec(),
                };
            let mut all_passed = true;
            for s in suites {
                let report = s.run(seed, cases.unwrap_or_else(|| s.default_cases()))?;
                let verdict = if report.passed() { "PASS" } else { "FAIL" };
                all_passed &= report.passed();
                emit(
                    out,
                    format_args!(
                        "{verdict} {} held {}/{} (need {}) worst margin {:.3e}",
                        s.name(),
                        report.held,
                        report.cases,
                        report.required,
                        report.worst_margin
                    ),
                )?;
            }
            return Ok(if all_passed { EXIT_OK } else { EXIT_NUMERIC });
        }
    }
    Ok(EXIT_OK)
}

fn run(config: &Path, out_dir: &Path, out: &mut dyn Write) -> cvarrl::Result<()> {
    let cfg = ExperimentConfig::from_json(&read(config)?)?;
    let instance = match (&cfg.instance, &cfg.generate) {
        (Some(path), _) => {
            let base = config.parent().unwrap_or(Path::new("."));
            load_instance(&base.join(path))?
        }
        (None, Some(spec)) => spec.build()?,
        (None, None) => unreachable!("validated by ExperimentConfig::from_json"),
    };
    let class = cfg.model_class(&instance.model)?;
    fs::create_dir_all(out_dir)?;
    let mut metrics = csv::Writer::from_path(out_dir.join("metrics.csv")).map_err(Error::from)?;
    let mut sink = |r: &IterationRecord| -> cvarrl::Result<()> {
        metrics.serialize(r)?;
        metrics.flush()?;
        Ok(())
    };
    let result = run_with_sink(&instance.model, &instance.rewards, &class, &cfg.run, &mut sink)?;
    fs::write(out_dir.join("result.json"), result.to_json())?;
    let last = result.records.last().expect("K ≥ 1");
    emit(out, format_args!("cvar_star {}", result.cvar_star))?;
    emit(out, format_args!("final cvar {} regret {}", last.cvar_true_of_iterate, last.regret_k))?;
    emit(out, format_args!("best k {} regret {}", result.best.k, result.best_regret()))?;
    Ok(())
}
