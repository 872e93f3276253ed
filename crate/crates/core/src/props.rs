//! Executable checks of the analytical lemmas the algorithms rest on.
//!
//! Every suite draws its random cases from a root seed, evaluates both sides
//! of a lemma exactly (or, for the statistical ones, against a stated
//! threshold) and reports how many cases held.

use rand::Rng;
use serde::Serialize;

use crate::env::{
    dirichlet, make_raw_rewards, make_tabular_lowrank, AugmentedPolicy, LowRankModel, RewardModel, RewardSource,
    TabularSpec, START_STATE,
};
use crate::error::Result;
use crate::explore::{eigen_sum, elliptical_potential, BonusTable};
use crate::learn::{mle_fit, model_tv_error, weighted_squared_tv, Bag, ModelClass, Transition, TransitionDataset};
use crate::lsvi::{cvar_lsvi, LsviConfig};
use crate::plan_exact::{
    augmented_occupancy, augmented_vi, evaluate_policy_exact, markov_occupancy, markov_values, return_distribution,
    BudgetTracking,
};
use crate::risk::{cvar_of_distribution, BudgetGrid};
use crate::rng::{sample_index, stream};

/// Planner constants used on the 3-state, 2-action, `H = 3`, `υ = 0.1` benchmark family.
pub const BENCHMARK_LSVI: LsviConfig = LsviConfig { lambda: 1.0, beta: 0.5, t1: 200, t2: 400, instrument: false };

/// Failure probability in the MLE bound `10·log(|F|/δ)/k`.
pub const MLE_DELTA: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    DiscretizationSandwich,
    RiskSensitiveSimulation,
    RiskNeutralSimulation,
    Eigen,
    EllipticalPotential,
    MleConsistency,
    LsviOptimism,
}

impl Suite {
    pub const ALL: [Suite; 7] = [
        Suite::DiscretizationSandwich,
        Suite::RiskSensitiveSimulation,
        Suite::RiskNeutralSimulation,
        Suite::Eigen,
        Suite::EllipticalPotential,
        Suite::MleConsistency,
        Suite::LsviOptimism,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Suite::DiscretizationSandwich => "discretization_sandwich",
            Suite::RiskSensitiveSimulation => "risk_sensitive_simulation",
            Suite::RiskNeutralSimulation => "risk_neutral_simulation",
            Suite::Eigen => "eigen",
            Suite::EllipticalPotential => "elliptical_potential",
            Suite::MleConsistency => "mle_consistency",
            Suite::LsviOptimism => "lsvi_optimism",
        }
    }

    pub fn from_name(name: &str) -> Option<Suite> {
        Suite::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Default number of cases.
    pub fn default_cases(self) -> usize {
        match self {
            Suite::DiscretizationSandwich => 50,
            _ => 100,
        }
    }

    /// Fraction of cases that must hold: 1 for exact lemmas.
    pub fn required_fraction(self) -> f64 {
        match self {
            Suite::MleConsistency | Suite::LsviOptimism => 0.95,
            _ => 1.0,
        }
    }

    pub fn run(self, seed: u64, cases: usize) -> Result<PropReport> {
        let root = crate::rng::derive_seed(seed, &[self as u64]);
        let margins = (0..cases)
            .map(|c| {
                let mut rng = stream(root, &[c as u64]);
                match self {
                    Suite::DiscretizationSandwich => sandwich_case(c, &mut rng),
                    Suite::RiskSensitiveSimulation => risk_sensitive_case(&mut rng),
                    Suite::RiskNeutralSimulation => risk_neutral_case(&mut rng),
                    Suite::Eigen => eigen_case(c, &mut rng),
                    Suite::EllipticalPotential => elliptical_case(c, &mut rng),
                    Suite::MleConsistency => mle_case(&mut rng),
                    Suite::LsviOptimism => optimism_case(&mut rng),
                }
            })
            .collect::<Result<Vec<f64>>>()?;
        Ok(PropReport::new(self, &margins))
    }
}

/// Outcome of one suite. A case holds when its margin (violation amount) is ≤ 0.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PropReport {
    pub suite: Suite,
    pub cases: usize,
    pub held: usize,
    pub required: usize,
    /// Largest margin over all cases.
    pub worst_margin: f64,
}

impl PropReport {
    fn new(suite: Suite, margins: &[f64]) -> Self {
        let cases = margins.len();
        Self {
            suite,
            cases,
            held: margins.iter().filter(|m| **m <= 0.0).count(),
            required: (suite.required_fraction() * cases as f64 - 1e-9).ceil() as usize,
            worst_margin: margins.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        }
    }

    pub fn passed(&self) -> bool {
        self.held >= self.required
    }
}

fn benchmark_spec() -> TabularSpec {
    TabularSpec::default()
}

/// A random grid policy: a Dirichlet action distribution per `(h, s, i)`.
pub fn random_policy<G: Rng + ?Sized>(
    grid: BudgetGrid,
    num_states: usize,
    num_actions: usize,
    rng: &mut G,
) -> AugmentedPolicy {
    let cells = grid.horizon() * num_states * grid.len();
    let probs = (0..cells).flat_map(|_| dirichlet(num_actions, 1.0, rng)).collect();
    AugmentedPolicy::new(grid, num_states, num_actions, probs).expect("Dirichlet rows are distributions")
}

fn small_spec<G: Rng + ?Sized>(upsilon: f64, rng: &mut G) -> TabularSpec {
    TabularSpec {
        num_states: rng.random_range(2..=4),
        num_actions: rng.random_range(2..=3),
        horizon: rng.random_range(2..=3),
        upsilon,
        dirichlet_alpha: 1.0,
    }
}

/// `CVaR(R̄) − CVaR(R(π̄))` must lie in `[0, Hυ/τ]`; the margin is the larger excursion.
fn sandwich_case<G: Rng + ?Sized>(case: usize, rng: &mut G) -> Result<f64> {
    let upsilon = [0.05, 0.1, 0.25][case % 3];
    let tau = [0.2, 0.5][(case / 3) % 2];
    let spec = small_spec(upsilon, rng);
    let (model, _) = make_tabular_lowrank(&spec, rng)?;
    let raw = make_raw_rewards(spec.horizon, spec.num_states, spec.num_actions, 3, rng)?;
    let grid = BudgetGrid::new(upsilon, spec.horizon)?;
    let policy = random_policy(grid, spec.num_states, spec.num_actions, rng);
    let c1 = grid.value(rng.random_range(0..grid.len()));
    let disc = raw.discretize(&grid);
    let upper =
        cvar_of_distribution(&return_distribution(&model, &disc, &policy, c1, BudgetTracking::Discretized)?, tau)?;
    let lower =
        cvar_of_distribution(&return_distribution(&model, &raw, &policy, c1, BudgetTracking::Discretized)?, tau)?;
    let gap = upper - lower;
    let bound = spec.horizon as f64 * upsilon / tau + 1e-9;
    Ok((-gap).max(gap - bound))
}

fn perturbed_pair<G: Rng + ?Sized>(
    spec: &TabularSpec,
    rng: &mut G,
) -> Result<(LowRankModel, RewardModel, LowRankModel)> {
    let (model, rewards) = make_tabular_lowrank(spec, rng)?;
    let mix: f64 = rng.random();
    let class = ModelClass::perturbed(&model, 2, mix, 1.0, rng)?;
    let other = class.candidate(1 - class.truth_index().expect("perturbed classes contain the truth")).clone();
    Ok((model, rewards, other))
}

/// `V_P(s₁,c) − V_P̂(s₁,c) ≤ H·Σ_h E_{d_h^P}[‖P_h − P̂_h‖₁]`.
fn risk_sensitive_case<G: Rng + ?Sized>(rng: &mut G) -> Result<f64> {
    let spec = small_spec(0.1, rng);
    let (truth, rewards, other) = perturbed_pair(&spec, rng)?;
    let grid = BudgetGrid::new(spec.upsilon, spec.horizon)?;
    let policy = random_policy(grid, spec.num_states, spec.num_actions, rng);
    let c = rng.random_range(0..grid.len());
    let zero = BonusTable::zero(spec.horizon, spec.num_states, spec.num_actions);
    let lhs = evaluate_policy_exact(&truth, &rewards, &policy, c, &zero)?
        - evaluate_policy_exact(&other, &rewards, &policy, c, &zero)?;
    let occ = augmented_occupancy(&truth, &rewards, &policy, c)?;
    let mut rhs = 0.0;
    for h in 0..spec.horizon {
        for s in 0..spec.num_states {
            for a in 0..spec.num_actions {
                let f = model_tv_error(truth.transition_row(h, s, a), other.transition_row(h, s, a))?;
                rhs += occ[(h * spec.num_states + s) * spec.num_actions + a] * f;
            }
        }
    }
    Ok(lhs - spec.horizon as f64 * rhs)
}

/// Both telescoping forms of `V_M̂ − V_M`; the margin is the larger error beyond 1e−9.
fn risk_neutral_case<G: Rng + ?Sized>(rng: &mut G) -> Result<f64> {
    let spec = small_spec(0.1, rng);
    let (truth, _, other) = perturbed_pair(&spec, rng)?;
    let (s_n, a_n, h_n) = (spec.num_states, spec.num_actions, spec.horizon);
    let cells = h_n * s_n * a_n;
    let r: Vec<f64> = (0..cells).map(|_| rng.random()).collect();
    let r_hat: Vec<f64> = (0..cells).map(|_| rng.random()).collect();
    let policy: Vec<f64> = (0..h_n * s_n).flat_map(|_| dirichlet(a_n, 1.0, rng)).collect();
    let v = markov_values(&truth, &r, &policy);
    let v_hat = markov_values(&other, &r_hat, &policy);
    let occ = markov_occupancy(&truth, &policy);
    let occ_hat = markov_occupancy(&other, &policy);
    let lhs = v_hat[START_STATE] - v[START_STATE];
    let (mut under_hat, mut under_truth) = (0.0, 0.0);
    for h in 0..h_n {
        for s in 0..s_n {
            for a in 0..a_n {
                let k = (h * s_n + s) * a_n + a;
                let (p, p_hat) = (truth.transition_row(h, s, a), other.transition_row(h, s, a));
                let diff =
                    |vals: &[f64]| -> f64 { (0..s_n).map(|s2| (p_hat[s2] - p[s2]) * vals[(h + 1) * s_n + s2]).sum() };
                under_hat += occ_hat[k] * (r_hat[k] - r[k] + diff(&v));
                under_truth += occ[k] * (r_hat[k] - r[k] + diff(&v_hat));
            }
        }
    }
    Ok((lhs - under_hat).abs().max((lhs - under_truth).abs()) - 1e-9)
}

/// A stream of `len` vectors with `‖φ‖ ≤ 1`: uniform directions, uniform radii.
pub fn feature_stream<G: Rng + ?Sized>(len: usize, dim: usize, rng: &mut G) -> Vec<Vec<f64>> {
    let normal = rand_distr::StandardNormal;
    (0..len)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample::<f64, _>(normal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let radius: f64 = rng.random();
            v.into_iter().map(|x| x * radius / norm).collect()
        })
        .collect()
}

fn eigen_case<G: Rng + ?Sized>(case: usize, rng: &mut G) -> Result<f64> {
    let dim = [2, 8][case % 2];
    let stream = feature_stream(1000, dim, rng);
    Ok(eigen_sum(&stream, dim, 1.0)? - dim as f64)
}

fn elliptical_case<G: Rng + ?Sized>(case: usize, rng: &mut G) -> Result<f64> {
    let dim = [2, 8][case % 2];
    let stream = feature_stream(1000, dim, rng);
    let (sum, bound) = elliptical_potential(&stream, dim, 1.0)?;
    Ok(sum - bound)
}

/// Draws `k` transitions per step from uniform-action roll-ins and checks the
/// fitted model's squared L1 error under that sampling distribution.
fn mle_case<G: Rng + ?Sized>(rng: &mut G) -> Result<f64> {
    const SAMPLES: usize = 5000;
    const CLASS: usize = 8;
    let spec = benchmark_spec();
    let (truth, _) = make_tabular_lowrank(&spec, rng)?;
    let class = ModelClass::perturbed(&truth, CLASS, 1.0, 1.0, rng)?;
    let (h_n, s_n, a_n) = (spec.horizon, spec.num_states, spec.num_actions);
    let uniform = vec![1.0 / a_n as f64; h_n * s_n * a_n];
    let occ = markov_occupancy(&truth, &uniform);
    let mut dataset = TransitionDataset::new(h_n, s_n, a_n);
    for h in 0..h_n {
        for _ in 0..SAMPLES {
            let mut s = START_STATE;
            for t in 0..h {
                let a = rng.random_range(0..a_n);
                s = sample_index(truth.transition_row(t, s, a), rng);
            }
            let a = rng.random_range(0..a_n);
            let s_next = sample_index(truth.transition_row(h, s, a), rng);
            dataset.push(Bag::D, h, Transition { s, a, s_next })?;
        }
    }
    let bound = 10.0 * (CLASS as f64 / MLE_DELTA).ln() / SAMPLES as f64;
    let mut worst = f64::NEG_INFINITY;
    for h in 0..h_n {
        let fitted = class.candidate(mle_fit(&dataset, &class, h)?);
        let weights = &occ[h * s_n * a_n..(h + 1) * s_n * a_n];
        worst = worst.max(weighted_squared_tv(fitted, &truth, h, weights)? - bound);
    }
    Ok(worst)
}

/// Largest `V^t_1(s₁, i₁υ) − V*_1(s₁, i₁υ) − 1e−6` over the iterations of one planner run.
fn optimism_case<G: Rng + ?Sized>(rng: &mut G) -> Result<f64> {
    let spec = benchmark_spec();
    let (model, rewards) = make_tabular_lowrank(&spec, rng)?;
    let grid = BudgetGrid::new(spec.upsilon, spec.horizon)?;
    let bonus = BonusTable::zero(spec.horizon, spec.num_states, spec.num_actions);
    let i1 = rng.random_range(0..grid.len());
    let exact = augmented_vi(&model, &rewards, &bonus, &grid)?.value(0, START_STATE, i1);
    let config = LsviConfig { instrument: true, ..BENCHMARK_LSVI };
    let out = cvar_lsvi(&model, &rewards, &bonus, i1, &grid, &config, rng)?;
    Ok(out.optimistic.iter().copied().fold(f64::NEG_INFINITY, f64::max) - exact - 1e-6)
}
