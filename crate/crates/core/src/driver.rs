//! The exploration outer loops, run configuration and per-iteration metrics.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    make_tabular_lowrank, AugmentedPolicy, Instance, LowRankModel, RewardModel, RewardSource, TabularSpec, START_STATE,
};
use crate::error::{Error, Result};
use crate::explore::{schedule_params, BonusState, BonusTable, ScheduleInputs};
use crate::learn::{collect_iteration_data, mle_fit, ModelClass, TransitionDataset};
use crate::lsvi::{cvar_lsvi, LsviConfig, TheoryInputs};
use crate::plan_exact::{augmented_vi, enumerate_cvar_oracle, plan_cvar, return_distribution, BudgetTracking};
use crate::risk::{check_tau, cvar_objective_from_values, cvar_of_distribution, BudgetGrid};
use crate::rng::{derive_seed, seeded, stream};

/// Slack allowed before a negative regret counts as an invariant violation.
pub const REGRET_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algo {
    /// Exploration with exact planning on the budget grid.
    Ela,
    /// Exploration with the least-squares planner.
    Ella,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Planner {
    Exact,
    Lsvi,
}

fn one() -> f64 {
    1.0
}

/// Configuration of one learning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub tau: f64,
    #[serde(rename = "K")]
    pub iterations: usize,
    pub upsilon: f64,
    pub delta: f64,
    #[serde(default = "one")]
    pub c_alpha: f64,
    #[serde(default = "one")]
    pub c_lambda: f64,
    #[serde(default = "one")]
    pub c_beta: f64,
    #[serde(default = "one", rename = "c_T1")]
    pub c_t1: f64,
    #[serde(default = "one", rename = "c_T2")]
    pub c_t2: f64,
    pub seed: u64,
    pub algo: Algo,
    pub planner: Planner,
    /// Explicit planner parameters; unset ones come from the theory formulas.
    #[serde(default)]
    pub lsvi_lambda: Option<f64>,
    #[serde(default)]
    pub lsvi_beta: Option<f64>,
    #[serde(default, rename = "lsvi_T1")]
    pub lsvi_t1: Option<usize>,
    #[serde(default, rename = "lsvi_T2")]
    pub lsvi_t2: Option<usize>,
}

impl RunConfig {
    pub fn ela(tau: f64, iterations: usize, upsilon: f64, seed: u64) -> Self {
        Self {
            tau,
            iterations,
            upsilon,
            delta: 0.1,
            c_alpha: 1.0,
            c_lambda: 1.0,
            c_beta: 1.0,
            c_t1: 1.0,
            c_t2: 1.0,
            seed,
            algo: Algo::Ela,
            planner: Planner::Exact,
            lsvi_lambda: None,
            lsvi_beta: None,
            lsvi_t1: None,
            lsvi_t2: None,
        }
    }

    pub fn ella(tau: f64, iterations: usize, upsilon: f64, seed: u64) -> Self {
        Self { algo: Algo::Ella, planner: Planner::Lsvi, ..Self::ela(tau, iterations, upsilon, seed) }
    }

    pub fn validate(&self) -> Result<()> {
        check_tau(self.tau).map_err(|_| Error::ConfigInvalid(format!("tau {} outside (0, 1]", self.tau)))?;
        if self.iterations == 0 {
            return Err(Error::ConfigInvalid("K must be at least 1".into()));
        }
        if !(self.upsilon > 0.0 && self.upsilon <= 1.0) {
            return Err(Error::ConfigInvalid(format!("upsilon {} outside (0, 1]", self.upsilon)));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::ConfigInvalid(format!("delta {} outside (0, 1)", self.delta)));
        }
        let consts = [self.c_alpha, self.c_lambda, self.c_beta, self.c_t1, self.c_t2];
        if consts.iter().any(|c| !(c.is_finite() && *c >= 0.0)) || self.c_lambda == 0.0 {
            return Err(Error::ConfigInvalid("constants must be finite and nonnegative, c_lambda positive".into()));
        }
        match (self.algo, self.planner) {
            (Algo::Ela, Planner::Exact) | (Algo::Ella, Planner::Lsvi) => Ok(()),
            (Algo::Ela, _) => Err(Error::ConfigInvalid("ELA plans exactly; set planner = exact".into())),
            (Algo::Ella, _) => Err(Error::ConfigInvalid("ELLA plans with LSVI; set planner = lsvi".into())),
        }
    }

    /// Planner parameters: explicit overrides, else the theory formulas with
    /// `ε = 3Hυ/τ` (the accuracy the precision `υ` is chosen for).
    pub fn lsvi_config(&self, horizon: usize, rank: usize) -> Result<LsviConfig> {
        let epsilon = 3.0 * horizon as f64 * self.upsilon / self.tau;
        let theory = LsviConfig::from_theory(&TheoryInputs {
            horizon,
            rank,
            upsilon: self.upsilon,
            delta: self.delta,
            epsilon,
            c_beta: self.c_beta,
            c_t1: self.c_t1,
            c_t2: self.c_t2,
        })?;
        let cfg = LsviConfig {
            lambda: self.lsvi_lambda.unwrap_or(theory.lambda),
            beta: self.lsvi_beta.unwrap_or(theory.beta),
            t1: self.lsvi_t1.unwrap_or(theory.t1),
            t2: self.lsvi_t2.unwrap_or(theory.t2),
            instrument: false,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One row of the per-iteration metrics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub k: usize,
    pub c_k_index: usize,
    pub cvar_planned: f64,
    pub cvar_true_of_iterate: f64,
    pub regret_k: f64,
    pub cumulative_regret: f64,
    pub wall_ms: f64,
}

/// A returned `(policy, initial budget)` pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyChoice {
    pub k: usize,
    pub budget_index: usize,
    pub budget: f64,
    pub cvar_true: f64,
    pub policy: AugmentedPolicy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub algo: Algo,
    pub tau: f64,
    pub upsilon: f64,
    pub truth_in_class: bool,
    pub cvar_star: f64,
    pub cvar_star_budget_index: usize,
    pub records: Vec<IterationRecord>,
    /// The iterate drawn uniformly from `1..=K`.
    pub sampled: PolicyChoice,
    /// The iterate with the smallest regret (earliest on ties).
    pub best: PolicyChoice,
    /// The iterate of the final iteration.
    pub last: PolicyChoice,
    pub env_rollouts: u64,
}

impl RunResult {
    pub fn best_regret(&self) -> f64 {
        self.cvar_star - self.best.cvar_true
    }

    /// The result with wall-clock fields zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut out = self.clone();
        out.records.iter_mut().for_each(|r| r.wall_ms = 0.0);
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("result serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let r: RunResult = serde_json::from_str(text)?;
        if r.sampled.policy.grid() != r.best.policy.grid() || r.last.policy.grid() != r.best.policy.grid() {
            return Err(Error::Parse("returned policies use different grids".into()));
        }
        Ok(r)
    }

    pub fn metrics_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.records {
            w.serialize(r)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

/// `CVaR_τ` of the return of the wrapped grid policy started at `c_index` in the true environment.
pub fn cvar_of_iterate(
    env: &LowRankModel,
    rewards: &RewardModel,
    policy: &AugmentedPolicy,
    c_index: usize,
    tau: f64,
) -> Result<f64> {
    let c1 = policy.grid().value(c_index);
    let dist = return_distribution(env, rewards, policy, c1, BudgetTracking::Discretized)?;
    cvar_of_distribution(&dist, tau)
}

struct Planned {
    budget_index: usize,
    value: f64,
    policy: AugmentedPolicy,
}

/// Runs ELA or ELLA as selected by `cfg.algo`.
pub fn run(env: &LowRankModel, rewards: &RewardModel, class: &ModelClass, cfg: &RunConfig) -> Result<RunResult> {
    run_with_sink(env, rewards, class, cfg, &mut |_| Ok(()))
}

/// Exploration with exact augmented value iteration.
pub fn run_ela(env: &LowRankModel, rewards: &RewardModel, class: &ModelClass, cfg: &RunConfig) -> Result<RunResult> {
    if cfg.algo != Algo::Ela {
        return Err(Error::ConfigInvalid("run_ela needs algo = ela".into()));
    }
    run(env, rewards, class, cfg)
}

/// Exploration with the least-squares planner at every grid budget.
pub fn run_ella(env: &LowRankModel, rewards: &RewardModel, class: &ModelClass, cfg: &RunConfig) -> Result<RunResult> {
    if cfg.algo != Algo::Ella {
        return Err(Error::ConfigInvalid("run_ella needs algo = ella".into()));
    }
    run(env, rewards, class, cfg)
}

/// Like [`run`], handing every record to `sink` as soon as it exists.
pub fn run_with_sink(
    env: &LowRankModel,
    rewards: &RewardModel,
    class: &ModelClass,
    cfg: &RunConfig,
    sink: &mut dyn FnMut(&IterationRecord) -> Result<()>,
) -> Result<RunResult> {
    cfg.validate()?;
    let (h_n, s_n, a_n) = (env.horizon(), env.num_states(), env.num_actions());
    let reference = class.candidate(0);
    if reference.horizon() != h_n || reference.num_states() != s_n || reference.num_actions() != a_n {
        return Err(Error::ConfigInvalid("model class does not match the environment".into()));
    }
    let grid = BudgetGrid::new(cfg.upsilon, h_n)?;
    let rewards_disc = rewards.discretize(&grid);
    let native_grid = BudgetGrid::new(rewards.upsilon(), h_n)?;
    let oracle = enumerate_cvar_oracle(env, rewards, cfg.tau, &native_grid)?;
    let schedule = ScheduleInputs {
        horizon: h_n,
        num_actions: a_n,
        rank: reference.rank(),
        class_size: class.len(),
        delta: cfg.delta,
        c_alpha: cfg.c_alpha,
        c_lambda: cfg.c_lambda,
    };
    let lsvi_cfg = match cfg.algo {
        Algo::Ella => Some(cfg.lsvi_config(h_n, reference.rank())?),
        Algo::Ela => None,
    };

    let sampled_k = seeded(derive_seed(cfg.seed, &[3])).random_range(1..=cfg.iterations);
    let mut data_rng = stream(cfg.seed, &[1]);
    let mut dataset = TransitionDataset::new(h_n, s_n, a_n);
    let mut policy = AugmentedPolicy::uniform(grid, s_n, a_n);
    let mut budget_index = match cfg.algo {
        Algo::Ela => grid.index_of(1.0),
        Algo::Ella => grid.max_index(),
    };

    let mut records = Vec::with_capacity(cfg.iterations);
    let mut cumulative = 0.0;
    let mut sampled = None;
    let mut best: Option<PolicyChoice> = None;
    let mut last = None;
    for k in 1..=cfg.iterations {
        let started = Instant::now();
        collect_iteration_data(env, rewards, &policy, grid.value(budget_index), &mut dataset, &mut data_rng)?;

        let choice: Vec<usize> = (0..h_n)
            .map(|h| if dataset.len_at(h) == 0 { Ok(0) } else { mle_fit(&dataset, class, h) })
            .collect::<Result<_>>()?;
        let learned = class.assemble(&choice)?;
        let (alpha, lambda) = schedule_params(k, &schedule)?;
        let bonus = BonusState::build(&learned, &dataset, alpha, lambda, k)?.table(&learned);

        let planned = match lsvi_cfg {
            None => plan_exact_step(&learned, &rewards_disc, &bonus, &grid, cfg.tau)?,
            Some(ref lc) => plan_lsvi_step(&learned, &rewards_disc, &bonus, &grid, cfg, lc, k)?,
        };
        let cvar_true = cvar_of_iterate(env, rewards, &planned.policy, planned.budget_index, cfg.tau)?;
        let regret = oracle.cvar_star - cvar_true;
        if regret < -REGRET_TOLERANCE || !planned.value.is_finite() {
            return Err(Error::InvariantViolation(format!(
                "iteration {k}: regret {regret} with planned value {}",
                planned.value
            )));
        }
        cumulative += regret;
        let record = IterationRecord {
            k,
            c_k_index: planned.budget_index,
            cvar_planned: planned.value,
            cvar_true_of_iterate: cvar_true,
            regret_k: regret,
            cumulative_regret: cumulative,
            wall_ms: started.elapsed().as_secs_f64() * 1e3,
        };
        sink(&record)?;
        records.push(record);

        let choice = || PolicyChoice {
            k,
            budget_index: planned.budget_index,
            budget: grid.value(planned.budget_index),
            cvar_true,
            policy: planned.policy.clone(),
        };
        if k == sampled_k {
            sampled = Some(choice());
        }
        if best.as_ref().is_none_or(|b| cvar_true > b.cvar_true) {
            best = Some(choice());
        }
        if k == cfg.iterations {
            last = Some(choice());
        }
        policy = planned.policy;
        budget_index = planned.budget_index;
    }

    Ok(RunResult {
        seed: cfg.seed,
        algo: cfg.algo,
        tau: cfg.tau,
        upsilon: cfg.upsilon,
        truth_in_class: class.includes_truth(),
        cvar_star: oracle.cvar_star,
        cvar_star_budget_index: oracle.budget_index,
        records,
        sampled: sampled.expect("sampled iteration lies in 1..=K"),
        best: best.expect("K ≥ 1"),
        last: last.expect("K ≥ 1"),
        env_rollouts: dataset.rollouts(),
    })
}

fn plan_exact_step(
    learned: &LowRankModel,
    rewards: &RewardModel,
    bonus: &BonusTable,
    grid: &BudgetGrid,
    tau: f64,
) -> Result<Planned> {
    let table = augmented_vi(learned, rewards, bonus, grid)?;
    let plan = plan_cvar(&table, tau, START_STATE)?;
    Ok(Planned { budget_index: plan.budget_index, value: plan.value, policy: plan.policy })
}

fn plan_lsvi_step(
    learned: &LowRankModel,
    rewards: &RewardModel,
    bonus: &BonusTable,
    grid: &BudgetGrid,
    cfg: &RunConfig,
    lsvi_cfg: &LsviConfig,
    k: usize,
) -> Result<Planned> {
    let mut values = Vec::with_capacity(grid.len());
    let mut policies = Vec::with_capacity(grid.len());
    for i in 0..grid.len() {
        let mut rng = stream(cfg.seed, &[2, k as u64, i as u64]);
        let out = cvar_lsvi(learned, rewards, bonus, i, grid, lsvi_cfg, &mut rng)?;
        values.push(out.value);
        policies.push(out.policy);
    }
    let (budget_index, value) = cvar_objective_from_values(&values, cfg.tau, grid)?;
    let policy = policies.swap_remove(budget_index);
    Ok(Planned { budget_index, value, policy })
}

/// A full experiment: where the environment comes from, the model class, and the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Path to an instance JSON file, resolved by the caller.
    #[serde(default)]
    pub instance: Option<String>,
    /// Random tabular instance used when no file is given.
    #[serde(default)]
    pub generate: Option<GenerateSpec>,
    #[serde(default = "default_class_size")]
    pub class_size: usize,
    #[serde(default = "one")]
    pub class_mix: f64,
    pub run: RunConfig,
}

fn default_class_size() -> usize {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    pub num_states: usize,
    pub num_actions: usize,
    #[serde(rename = "H")]
    pub horizon: usize,
    pub upsilon: f64,
    #[serde(default = "one")]
    pub dirichlet_alpha: f64,
    pub seed: u64,
}

/// Largest `|S|·A·H` a generated experiment may request.
const MAX_GENERATED_CELLS: usize = 100_000;

impl GenerateSpec {
    pub fn build(&self) -> Result<Instance> {
        let cells = self.num_states.saturating_mul(self.num_actions).saturating_mul(self.horizon);
        if cells == 0 || cells > MAX_GENERATED_CELLS || self.num_states > 1000 {
            return Err(Error::ConfigInvalid("generated instance size outside desk scale".into()));
        }
        let spec = TabularSpec {
            num_states: self.num_states,
            num_actions: self.num_actions,
            horizon: self.horizon,
            upsilon: self.upsilon,
            dirichlet_alpha: self.dirichlet_alpha,
        };
        let (model, rewards) = make_tabular_lowrank(&spec, &mut seeded(self.seed))?;
        Instance::new(model, rewards)
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text)?;
        cfg.run.validate()?;
        if cfg.instance.is_some() == cfg.generate.is_some() {
            return Err(Error::ConfigInvalid("give exactly one of `instance` and `generate`".into()));
        }
        if cfg.class_size == 0 || cfg.class_size > 4096 || !(0.0..=1.0).contains(&cfg.class_mix) {
            return Err(Error::ConfigInvalid("class_size must be in 1..=4096 and class_mix in [0, 1]".into()));
        }
        Ok(cfg)
    }

    /// The model class `{truth} ∪ perturbed copies`, seeded from the run seed.
    pub fn model_class(&self, truth: &LowRankModel) -> Result<ModelClass> {
        ModelClass::perturbed(truth, self.class_size, self.class_mix, 1.0, &mut stream(self.run.seed, &[4]))
    }
}

/// Worker count: `CVARRL_THREADS` when set, else the available parallelism.
pub fn worker_count() -> usize {
    std::env::var("CVARRL_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Maps `f` over `items` on up to [`worker_count`] threads, preserving order.
pub fn parallel_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let workers = worker_count().min(items.len()).max(1);
    if workers == 1 {
        return items.iter().map(&f).collect();
    }
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<U>> = (0..items.len()).map(|_| None).collect();
    let results = std::sync::Mutex::new(&mut slots);
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let out = f(&items[i]);
                results.lock().expect("worker panicked")[i] = Some(out);
            });
        }
    });
    slots.into_iter().map(|s| s.expect("every item processed")).collect()
}
