//! Exact planning on the budget grid and brute-force ground truth.
//!
//! [`augmented_vi`] runs backward induction over `(h, s, budget index)`.
//! [`enumerate_cvar_oracle`] answers the same question through a separate
//! code path that builds full return distributions, and
//! [`return_distribution`] enumerates the returns of a fixed policy played
//! in an environment whose rewards need not lie on the grid.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::env::{AugmentedPolicy, LowRankModel, RewardModel, RewardSource, START_STATE};
use crate::error::{Error, Result};
use crate::explore::BonusTable;
use crate::risk::{check_tau, cvar_objective_from_values, BudgetGrid, ReturnDistribution};

/// Largest `|S|·A·H·(⌈H/υ⌉+1)` the enumeration oracle accepts.
pub const ORACLE_CELL_LIMIT: u64 = 10_000_000;
/// Largest total number of stored return-pmf entries in the oracle.
const ORACLE_PMF_LIMIT: u64 = 200_000_000;
/// Largest number of live atoms during forward return enumeration.
const FORWARD_ATOM_LIMIT: usize = 5_000_000;

fn check_model_rewards(model: &LowRankModel, rewards: &impl RewardSource) -> Result<()> {
    if model.horizon() != rewards.horizon()
        || model.num_states() != rewards.num_states()
        || model.num_actions() != rewards.num_actions()
    {
        return Err(Error::InvalidModel("reward model does not match the transition model".into()));
    }
    Ok(())
}

fn check_grid(model: &LowRankModel, grid: &BudgetGrid) -> Result<()> {
    if grid.horizon() != model.horizon() {
        return Err(Error::GridMismatch(format!(
            "grid built for horizon {} but the model has {}",
            grid.horizon(),
            model.horizon()
        )));
    }
    Ok(())
}

/// Values `V[h][s][i]` for `h` in `0..=H` and greedy actions for `h < H`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    grid: BudgetGrid,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
    greedy: Vec<usize>,
}

impl ValueTable {
    pub fn grid(&self) -> &BudgetGrid {
        &self.grid
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    #[inline]
    pub fn value(&self, h: usize, s: usize, i: usize) -> f64 {
        self.values[(h * self.num_states + s) * self.grid.len() + i]
    }

    /// `V[h][s][·]`.
    pub fn row(&self, h: usize, s: usize) -> &[f64] {
        let g = self.grid.len();
        let start = (h * self.num_states + s) * g;
        &self.values[start..start + g]
    }

    pub fn greedy(&self, h: usize, s: usize, i: usize) -> usize {
        self.greedy[(h * self.num_states + s) * self.grid.len() + i]
    }

    /// The deterministic greedy policy.
    pub fn policy(&self) -> AugmentedPolicy {
        AugmentedPolicy::from_actions(self.grid, self.num_states, self.num_actions, &self.greedy)
            .expect("greedy table has policy shape")
    }

    /// `{H, grid, V}` with `V` listing steps `1..=H+1`.
    pub fn to_json(&self) -> String {
        let h_n = self.grid.horizon();
        let snapshot = ValueSnapshot {
            horizon: h_n,
            grid: self.grid,
            values: (0..=h_n).map(|h| (0..self.num_states).map(|s| self.row(h, s).to_vec()).collect()).collect(),
        };
        serde_json::to_string_pretty(&snapshot).expect("value table serialization cannot fail")
    }
}

/// Serialized form of a value table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValueSnapshot {
    #[serde(rename = "H")]
    pub horizon: usize,
    pub grid: BudgetGrid,
    #[serde(rename = "V")]
    pub values: Vec<Vec<Vec<f64>>>,
}

impl ValueSnapshot {
    pub fn from_json(text: &str) -> Result<Self> {
        let snap: ValueSnapshot = serde_json::from_str(text)?;
        if snap.grid.horizon() != snap.horizon || snap.values.len() != snap.horizon + 1 {
            return Err(Error::Parse("value table must list H + 1 steps".into()));
        }
        let states = snap.values.first().map_or(0, Vec::len);
        for per_step in &snap.values {
            if per_step.len() != states || per_step.iter().any(|row| row.len() != snap.grid.len()) {
                return Err(Error::Parse("ragged value table".into()));
            }
        }
        Ok(snap)
    }
}

/// Backward induction minimizing `E[(c − R)^+] − Σ b` over grid budgets.
///
/// `Q[h][s][i][a] = −b_h(s,a) + Σ_r r_h(r|s,a) Σ_{s'} P_h(s'|s,a)·V[h+1][s'][max(i − r/υ, 0)]`,
/// `V = min_a Q` with ties to the smallest action, and `V[H][s][i] = iυ`.
pub fn augmented_vi(
    model: &LowRankModel,
    rewards: &RewardModel,
    bonus: &BonusTable,
    grid: &BudgetGrid,
) -> Result<ValueTable> {
    check_model_rewards(model, rewards)?;
    check_grid(model, grid)?;
    bonus.check_dims(model)?;
    let rewards = rewards.on_grid(grid)?;
    let (h_n, s_n, a_n, g) = (model.horizon(), model.num_states(), model.num_actions(), grid.len());
    let mut values = vec![0.0; (h_n + 1) * s_n * g];
    let mut greedy = vec![0; h_n * s_n * g];
    for s in 0..s_n {
        for i in 0..g {
            values[(h_n * s_n + s) * g + i] = grid.value(i);
        }
    }
    let mut expected_next = vec![0.0; g];
    let mut best = vec![0.0; g];
    for h in (0..h_n).rev() {
        let (head, tail) = values.split_at_mut((h + 1) * s_n * g);
        let next = &tail[..s_n * g];
        let cur = &mut head[h * s_n * g..];
        for s in 0..s_n {
            best.iter_mut().for_each(|b| *b = f64::INFINITY);
            for a in 0..a_n {
                expected_next.iter_mut().for_each(|x| *x = 0.0);
                for (s2, &p) in model.transition_row(h, s, a).iter().enumerate() {
                    if p > 0.0 {
                        for (x, v) in expected_next.iter_mut().zip(&next[s2 * g..(s2 + 1) * g]) {
                            *x += p * v;
                        }
                    }
                }
                let b = bonus.get(h, s, a);
                let pmf = rewards.pmf(h, s, a);
                for i in 0..g {
                    let mut q = -b;
                    for (r, &pr) in pmf.iter().enumerate() {
                        if pr > 0.0 {
                            q += pr * expected_next[i.saturating_sub(r)];
                        }
                    }
                    if q < best[i] {
                        best[i] = q;
                        greedy[(h * s_n + s) * g + i] = a;
                    }
                }
            }
            cur[s * g..(s + 1) * g].copy_from_slice(&best);
        }
    }
    Ok(ValueTable { grid: *grid, num_states: s_n, num_actions: a_n, values, greedy })
}

/// Output of [`plan_cvar`].
#[derive(Debug, Clone, PartialEq)]
pub struct CvarPlan {
    pub budget_index: usize,
    pub value: f64,
    pub policy: AugmentedPolicy,
}

/// `argmax_i { iυ − V[1][s₁][i]/τ }` and the greedy policy of the table.
pub fn plan_cvar(table: &ValueTable, tau: f64, s1: usize) -> Result<CvarPlan> {
    let (budget_index, value) = cvar_objective_from_values(table.row(0, s1), tau, &table.grid)?;
    Ok(CvarPlan { budget_index, value, policy: table.policy() })
}

/// `V^π_{1,P,b}(s₁, c₁)` for a grid policy by the fixed-policy recursion.
pub fn evaluate_policy_exact(
    model: &LowRankModel,
    rewards: &RewardModel,
    policy: &AugmentedPolicy,
    c1_index: usize,
    bonus: &BonusTable,
) -> Result<f64> {
    check_model_rewards(model, rewards)?;
    bonus.check_dims(model)?;
    let grid = *policy.grid();
    check_grid(model, &grid)?;
    policy.check_dims(model.num_states(), model.num_actions(), model.horizon())?;
    let rewards = rewards.on_grid(&grid)?;
    let (h_n, s_n, a_n, g) = (model.horizon(), model.num_states(), model.num_actions(), grid.len());
    if c1_index >= g {
        return Err(Error::DimensionMismatch { expected: g, got: c1_index });
    }
    let mut next: Vec<f64> = (0..s_n).flat_map(|_| (0..g).map(|i| grid.value(i))).collect();
    let mut cur = vec![0.0; s_n * g];
    for h in (0..h_n).rev() {
        for s in 0..s_n {
            for i in 0..g {
                let mut v = 0.0;
                for (a, &pa) in policy.probs(h, s, i).iter().enumerate().take(a_n) {
                    if pa == 0.0 {
                        continue;
                    }
                    let mut q = -bonus.get(h, s, a);
                    for (r, &pr) in rewards.pmf(h, s, a).iter().enumerate() {
                        if pr == 0.0 {
                            continue;
                        }
                        let j = i.saturating_sub(r);
                        let mut cont = 0.0;
                        for (s2, &p) in model.transition_row(h, s, a).iter().enumerate() {
                            cont += p * next[s2 * g + j];
                        }
                        q += pr * cont;
                    }
                    v += pa * q;
                }
                cur[s * g + i] = v;
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    Ok(next[START_STATE * g + c1_index])
}

/// Output of [`enumerate_cvar_oracle`].
#[derive(Debug, Clone, PartialEq)]
pub struct OracleResult {
    pub cvar_star: f64,
    pub budget_index: usize,
    pub policy: AugmentedPolicy,
    /// Return distribution of the optimal policy from the optimal budget.
    pub distribution: ReturnDistribution,
}

struct Enumerator<'a> {
    model: &'a LowRankModel,
    rewards: &'a RewardModel,
    grid: BudgetGrid,
    levels: usize,
    memo: Vec<Option<(usize, Vec<f64>)>>,
}

impl Enumerator<'_> {
    fn key(&self, h: usize, s: usize, b: usize) -> usize {
        (h * self.model.num_states() + s) * self.grid.len() + b
    }

    /// Optimal action and the pmf of the remaining return (in reward-grid
    /// units) from step `h` in state `s` with budget index `b`.
    fn solve(&mut self, h: usize, s: usize, b: usize) -> &(usize, Vec<f64>) {
        let key = self.key(h, s, b);
        if self.memo[key].is_none() {
            let entry = self.compute(h, s, b);
            self.memo[key] = Some(entry);
        }
        self.memo[key].as_ref().expect("just filled")
    }

    fn compute(&mut self, h: usize, s: usize, b: usize) -> (usize, Vec<f64>) {
        let h_n = self.model.horizon();
        let span = (h_n - h) * (self.levels - 1) + 1;
        let mut best: Option<(f64, usize, Vec<f64>)> = None;
        for a in 0..self.model.num_actions() {
            let mut dist = vec![0.0; span];
            let pmf = self.rewards.pmf(h, s, a).to_vec();
            let row = self.model.transition_row(h, s, a).to_vec();
            for (r, &pr) in pmf.iter().enumerate() {
                if pr == 0.0 {
                    continue;
                }
                if h + 1 == h_n {
                    dist[r] += pr;
                    continue;
                }
                let b_next = b.saturating_sub(r);
                for (s2, &p) in row.iter().enumerate() {
                    if p == 0.0 {
                        continue;
                    }
                    let child = &self.solve(h + 1, s2, b_next).1;
                    for (x, &q) in child.iter().enumerate() {
                        dist[x + r] += pr * p * q;
                    }
                }
            }
            let shortfall: f64 = dist.iter().enumerate().map(|(x, &q)| q * b.saturating_sub(x) as f64).sum::<f64>()
                * self.grid.upsilon();
            if best.as_ref().is_none_or(|(v, _, _)| shortfall < *v) {
                best = Some((shortfall, a, dist));
            }
        }
        let (_, a, dist) = best.expect("at least one action");
        (a, dist)
    }
}

/// Exact `CVaR*_τ = max_i { iυ − τ⁻¹ min_π E[(iυ − R)^+] }` by enumerating
/// return distributions over every augmented state.
pub fn enumerate_cvar_oracle(
    model: &LowRankModel,
    rewards: &RewardModel,
    tau: f64,
    grid: &BudgetGrid,
) -> Result<OracleResult> {
    check_tau(tau)?;
    check_model_rewards(model, rewards)?;
    check_grid(model, grid)?;
    let (h_n, s_n, a_n, g) = (model.horizon(), model.num_states(), model.num_actions(), grid.len());
    let cells = (s_n as u64).saturating_mul(a_n as u64).saturating_mul(h_n as u64).saturating_mul(g as u64);
    if cells > ORACLE_CELL_LIMIT {
        return Err(Error::InstanceTooLarge { cells, limit: ORACLE_CELL_LIMIT });
    }
    let levels = grid.reward_levels();
    let pmf_entries = (cells / a_n as u64).saturating_mul((h_n * (levels - 1) + 1) as u64);
    if pmf_entries > ORACLE_PMF_LIMIT {
        return Err(Error::InstanceTooLarge { cells: pmf_entries, limit: ORACLE_PMF_LIMIT });
    }
    let rewards = rewards.on_grid(grid)?;
    let mut en = Enumerator { model, rewards: &rewards, grid: *grid, levels, memo: vec![None; h_n * s_n * g] };

    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    for i in 0..g {
        let dist = en.solve(0, START_STATE, i).1.clone();
        let shortfall: f64 =
            dist.iter().enumerate().map(|(x, &q)| q * i.saturating_sub(x) as f64).sum::<f64>() * grid.upsilon();
        let objective = grid.value(i) - shortfall / tau;
        if best.as_ref().is_none_or(|(v, _, _)| objective > *v) {
            best = Some((objective, i, dist));
        }
    }
    let (cvar_star, budget_index, dist) = best.expect("grid is nonempty");

    let mut actions = vec![0; h_n * s_n * g];
    for h in 0..h_n {
        for s in 0..s_n {
            for b in 0..g {
                actions[(h * s_n + s) * g + b] = en.solve(h, s, b).0;
            }
        }
    }
    let policy = AugmentedPolicy::from_actions(*grid, s_n, a_n, &actions)?;
    let distribution = ReturnDistribution::from_atoms(dist.iter().enumerate().map(|(x, &q)| (grid.value(x), q)))?;
    Ok(OracleResult { cvar_star, budget_index, policy, distribution })
}

/// How a played policy tracks its budget against observed rewards.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BudgetTracking {
    /// Query at `c₁ − Σ U(r_t)`, the wrapper played in the environment.
    Discretized,
    /// Query at the rounded raw residual `c₁ − Σ r_t`.
    Raw,
}

/// Exact distribution of the total reward of `policy` started at budget `c1`.
pub fn return_distribution<R: RewardSource>(
    model: &LowRankModel,
    rewards: &R,
    policy: &AugmentedPolicy,
    c1: f64,
    tracking: BudgetTracking,
) -> Result<ReturnDistribution> {
    check_model_rewards(model, rewards)?;
    policy.check_dims(model.num_states(), model.num_actions(), model.horizon())?;
    let grid = *policy.grid();
    let start_index = grid.index_of(c1);
    // Key: (state, spent discretized index, raw accumulated reward bits).
    let mut layer: BTreeMap<(usize, usize, u64), f64> = BTreeMap::new();
    layer.insert((START_STATE, 0, 0f64.to_bits()), 1.0);
    for h in 0..model.horizon() {
        let mut next: BTreeMap<(usize, usize, u64), f64> = BTreeMap::new();
        for (&(s, spent, acc_bits), &mass) in &layer {
            let acc = f64::from_bits(acc_bits);
            let query = match tracking {
                BudgetTracking::Discretized => start_index.saturating_sub(spent),
                BudgetTracking::Raw => grid.index_of(c1 - acc),
            };
            for (a, &pa) in policy.probs(h, s, query).iter().enumerate() {
                if pa == 0.0 {
                    continue;
                }
                let row = model.transition_row(h, s, a);
                for (r, pr) in rewards.atoms(h, s, a) {
                    let spent_next = match tracking {
                        BudgetTracking::Discretized => spent.saturating_add(grid.reward_index(r)),
                        BudgetTracking::Raw => 0,
                    };
                    let acc_next = (acc + r).to_bits();
                    for (s2, &p) in row.iter().enumerate() {
                        if p > 0.0 {
                            *next.entry((s2, spent_next, acc_next)).or_insert(0.0) += mass * pa * pr * p;
                        }
                    }
                }
            }
        }
        if next.len() > FORWARD_ATOM_LIMIT {
            return Err(Error::InstanceTooLarge { cells: next.len() as u64, limit: FORWARD_ATOM_LIMIT as u64 });
        }
        layer = next;
    }
    let mut atoms: BTreeMap<u64, f64> = BTreeMap::new();
    for (&(_, _, acc_bits), &mass) in &layer {
        *atoms.entry(acc_bits).or_insert(0.0) += mass;
    }
    let total: f64 = atoms.values().sum();
    ReturnDistribution::from_atoms(atoms.into_iter().map(|(bits, m)| (f64::from_bits(bits), m / total)))
}

/// `max_π E[Σ r_h]` by risk-neutral backward induction over Markov policies.
pub fn max_expected_return<R: RewardSource>(model: &LowRankModel, rewards: &R) -> Result<f64> {
    check_model_rewards(model, rewards)?;
    let s_n = model.num_states();
    let mut next = vec![0.0; s_n];
    for h in (0..model.horizon()).rev() {
        let cur: Vec<f64> = (0..s_n)
            .map(|s| {
                (0..model.num_actions())
                    .map(|a| {
                        let mean: f64 = rewards.atoms(h, s, a).iter().map(|(r, p)| r * p).sum();
                        let cont: f64 = model.transition_row(h, s, a).iter().zip(&next).map(|(p, v)| p * v).sum();
                        mean + cont
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        next = cur;
    }
    Ok(next[START_STATE])
}

/// Step-wise `(s,a)` occupancy `d_h(s,a)` of a grid policy started at `c1_index`.
pub fn augmented_occupancy(
    model: &LowRankModel,
    rewards: &RewardModel,
    policy: &AugmentedPolicy,
    c1_index: usize,
) -> Result<Vec<f64>> {
    check_model_rewards(model, rewards)?;
    policy.check_dims(model.num_states(), model.num_actions(), model.horizon())?;
    let grid = *policy.grid();
    let rewards = rewards.on_grid(&grid)?;
    let (h_n, s_n, a_n, g) = (model.horizon(), model.num_states(), model.num_actions(), grid.len());
    let mut occ = vec![0.0; h_n * s_n * a_n];
    let mut mass = vec![0.0; s_n * g];
    mass[START_STATE * g + c1_index.min(g - 1)] = 1.0;
    for h in 0..h_n {
        let mut next = vec![0.0; s_n * g];
        for s in 0..s_n {
            for i in 0..g {
                let m = mass[s * g + i];
                if m == 0.0 {
                    continue;
                }
                for (a, &pa) in policy.probs(h, s, i).iter().enumerate() {
                    if pa == 0.0 {
                        continue;
                    }
                    occ[(h * s_n + s) * a_n + a] += m * pa;
                    for (r, &pr) in rewards.pmf(h, s, a).iter().enumerate() {
                        if pr == 0.0 {
                            continue;
                        }
                        for (s2, &p) in model.transition_row(h, s, a).iter().enumerate() {
                            next[s2 * g + i.saturating_sub(r)] += m * pa * pr * p;
                        }
                    }
                }
            }
        }
        mass = next;
    }
    Ok(occ)
}

/// `V^π_h(s)` for a Markov policy `[h][s][a]` and mean rewards `[h][s][a]`,
/// returned as `[h][s]` for `h` in `0..=H`.
pub fn markov_values(model: &LowRankModel, mean_rewards: &[f64], policy: &[f64]) -> Vec<f64> {
    let (h_n, s_n, a_n) = (model.horizon(), model.num_states(), model.num_actions());
    let mut v = vec![0.0; (h_n + 1) * s_n];
    for h in (0..h_n).rev() {
        for s in 0..s_n {
            let mut total = 0.0;
            for a in 0..a_n {
                let k = (h * s_n + s) * a_n + a;
                let cont: f64 =
                    model.transition_row(h, s, a).iter().enumerate().map(|(s2, p)| p * v[(h + 1) * s_n + s2]).sum();
                total += policy[k] * (mean_rewards[k] + cont);
            }
            v[h * s_n + s] = total;
        }
    }
    v
}

/// `d_h(s,a)` for a Markov policy `[h][s][a]` started in `s₁`.
pub fn markov_occupancy(model: &LowRankModel, policy: &[f64]) -> Vec<f64> {
    let (h_n, s_n, a_n) = (model.horizon(), model.num_states(), model.num_actions());
    let mut occ = vec![0.0; h_n * s_n * a_n];
    let mut mass = vec![0.0; s_n];
    mass[START_STATE] = 1.0;
    for h in 0..h_n {
        let mut next = vec![0.0; s_n];
        for (s, &here) in mass.iter().enumerate() {
            for a in 0..a_n {
                let k = (h * s_n + s) * a_n + a;
                let m = here * policy[k];
                occ[k] = m;
                for (s2, p) in model.transition_row(h, s, a).iter().enumerate() {
                    next[s2] += m * p;
                }
            }
        }
        mass = next;
    }
    occ
}
