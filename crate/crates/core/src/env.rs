//! Low-rank episodic MDPs, known reward models, augmented policies and rollouts.
//!
//! Steps are 0-based in code: step `h` here is step `h + 1` of the episode.
//! Every episode starts in [`START_STATE`].

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::risk::{reward_levels, BudgetGrid, SNAP};
use crate::rng::{sample_index, seeded};

/// The fixed initial state `s₁`.
pub const START_STATE: usize = 0;

/// Upper bound on `H·|S|·A·|S|`; larger instances are not desk scale.
const MAX_TRANSITION_CELLS: usize = 50_000_000;

const NEG_TOL: f64 = 1e-12;
const SUM_TOL: f64 = 1e-9;

/// Transition kernels `P_h(s'|s,a) = ⟨ψ_h(s'), φ_h(s,a)⟩` over a finite state set.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankModel {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    rank: usize,
    /// `[h][s][a][j]`
    phi: Vec<f64>,
    /// `[h][s'][j]`
    psi: Vec<f64>,
    /// Cached validated kernels, `[h][s][a][s']`.
    transitions: Vec<f64>,
}

impl LowRankModel {
    pub fn new(
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        rank: usize,
        phi: Vec<f64>,
        psi: Vec<f64>,
    ) -> Result<Self> {
        if horizon == 0 || num_states == 0 || num_actions == 0 || rank == 0 {
            return Err(Error::InvalidModel("H, |S|, A and d must all be positive".into()));
        }
        let cells = horizon
            .checked_mul(num_states)
            .and_then(|x| x.checked_mul(num_actions))
            .and_then(|x| x.checked_mul(num_states))
            .filter(|&c| c <= MAX_TRANSITION_CELLS)
            .ok_or_else(|| Error::InvalidModel("instance exceeds desk-scale size".into()))?;
        let phi_len = horizon * num_states * num_actions * rank;
        let psi_len = horizon * num_states * rank;
        if phi.len() != phi_len {
            return Err(Error::DimensionMismatch { expected: phi_len, got: phi.len() });
        }
        if psi.len() != psi_len {
            return Err(Error::DimensionMismatch { expected: psi_len, got: psi.len() });
        }
        if phi.iter().chain(psi.iter()).any(|x| !x.is_finite()) {
            return Err(Error::InvalidModel("non-finite feature entry".into()));
        }
        let mut model =
            Self { horizon, num_states, num_actions, rank, phi, psi, transitions: Vec::with_capacity(cells) };
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let norm: f64 = model.phi(h, s, a).iter().map(|x| x * x).sum::<f64>().sqrt();
                    if norm > 1.0 + SUM_TOL {
                        return Err(Error::InvalidModel(format!(
                            "feature norm {norm} exceeds 1 at (h={h}, s={s}, a={a})"
                        )));
                    }
                    let row = model.transition_dist(h, s, a)?;
                    model.transitions.extend_from_slice(&row);
                }
            }
        }
        model.check_embedding_mass()?;
        Ok(model)
    }

    /// One-hot features `φ_h(s,a) = e_{(s,a)}` with `ψ_h(s')_{(s,a)} = P_h(s'|s,a)`.
    pub fn tabular(horizon: usize, num_states: usize, num_actions: usize, kernel: &[f64]) -> Result<Self> {
        let d = num_states * num_actions;
        let expected = horizon * num_states * num_actions * num_states;
        if kernel.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: kernel.len() });
        }
        let mut phi = vec![0.0; horizon * d * d];
        let mut psi = vec![0.0; horizon * num_states * d];
        for h in 0..horizon {
            for s in 0..num_states {
                for a in 0..num_actions {
                    let j = s * num_actions + a;
                    phi[(h * d + j) * d + j] = 1.0;
                    for s2 in 0..num_states {
                        psi[(h * num_states + s2) * d + j] =
                            kernel[((h * num_states + s) * num_actions + a) * num_states + s2];
                    }
                }
            }
        }
        Self::new(horizon, num_states, num_actions, d, phi, psi)
    }

    /// Builds a model whose step `h` is taken from `sources[h]`.
    pub fn from_steps(sources: &[&LowRankModel]) -> Result<Self> {
        let first = sources.first().ok_or_else(|| Error::InvalidModel("no steps".into()))?;
        if sources.len() != first.horizon
            || sources.iter().any(|m| {
                m.horizon != first.horizon
                    || m.num_states != first.num_states
                    || m.num_actions != first.num_actions
                    || m.rank != first.rank
            })
        {
            return Err(Error::InvalidModel("step sources do not share dimensions".into()));
        }
        let (s_n, a_n, d) = (first.num_states, first.num_actions, first.rank);
        let phi_step = s_n * a_n * d;
        let psi_step = s_n * d;
        let trans_step = s_n * a_n * s_n;
        let mut phi = Vec::with_capacity(first.phi.len());
        let mut psi = Vec::with_capacity(first.psi.len());
        let mut transitions = Vec::with_capacity(first.transitions.len());
        for (h, m) in sources.iter().enumerate() {
            phi.extend_from_slice(&m.phi[h * phi_step..(h + 1) * phi_step]);
            psi.extend_from_slice(&m.psi[h * psi_step..(h + 1) * psi_step]);
            transitions.extend_from_slice(&m.transitions[h * trans_step..(h + 1) * trans_step]);
        }
        Ok(Self { horizon: first.horizon, num_states: s_n, num_actions: a_n, rank: d, phi, psi, transitions })
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    pub fn phi(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = ((h * self.num_states + s) * self.num_actions + a) * self.rank;
        &self.phi[start..start + self.rank]
    }

    pub fn psi(&self, h: usize, s_next: usize) -> &[f64] {
        let start = (h * self.num_states + s_next) * self.rank;
        &self.psi[start..start + self.rank]
    }

    /// `P_h(·|s,a)` computed from the factors. Entries in `[−1e−12, 0)` are
    /// clamped; totals within `1e−9` of one are renormalized.
    pub fn transition_dist(&self, h: usize, s: usize, a: usize) -> Result<Vec<f64>> {
        if h >= self.horizon || s >= self.num_states || a >= self.num_actions {
            return Err(Error::InvalidModel(format!("index out of range (h={h}, s={s}, a={a})")));
        }
        let phi = self.phi(h, s, a);
        let mut row: Vec<f64> =
            (0..self.num_states).map(|s2| self.psi(h, s2).iter().zip(phi).map(|(x, y)| x * y).sum()).collect();
        let mut total = 0.0;
        for p in row.iter_mut() {
            if *p < -NEG_TOL || !p.is_finite() {
                return Err(Error::InvalidModel(format!(
                    "negative transition probability {p} at (h={h}, s={s}, a={a})"
                )));
            }
            *p = p.max(0.0);
            total += *p;
        }
        if (total - 1.0).abs() >= SUM_TOL {
            return Err(Error::InvalidModel(format!("transition row sums to {total} at (h={h}, s={s}, a={a})")));
        }
        row.iter_mut().for_each(|p| *p /= total);
        Ok(row)
    }

    /// Cached validated row `P_h(·|s,a)`.
    pub fn transition_row(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = ((h * self.num_states + s) * self.num_actions + a) * self.num_states;
        &self.transitions[start..start + self.num_states]
    }

    /// Whole kernel, `[h][s][a][s']`.
    pub fn transition_tensor(&self) -> &[f64] {
        &self.transitions
    }

    /// Checks `‖Σ_s ψ_h(s) g(s)‖₂ ≤ √d` for `g ≡ 1` and seeded random `g`.
    fn check_embedding_mass(&self) -> Result<()> {
        let bound = (self.rank as f64).sqrt() + SUM_TOL;
        let mut rng = seeded(0x5eed);
        let mut g = vec![1.0; self.num_states];
        for trial in 0..17 {
            if trial > 0 {
                g.iter_mut().for_each(|x| *x = rng.random::<f64>());
            }
            for h in 0..self.horizon {
                let mut acc = vec![0.0; self.rank];
                for (s2, gs) in g.iter().enumerate() {
                    for (x, p) in acc.iter_mut().zip(self.psi(h, s2)) {
                        *x += p * gs;
                    }
                }
                let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > bound {
                    return Err(Error::InvalidModel(format!("embedding mass {norm} exceeds sqrt(d) at step {h}")));
                }
            }
        }
        Ok(())
    }

    /// True when every feature is a standard basis vector indexed by `(s,a)`.
    pub fn is_tabular(&self) -> bool {
        self.rank == self.num_states * self.num_actions
            && (0..self.horizon).all(|h| {
                (0..self.num_states).all(|s| {
                    (0..self.num_actions).all(|a| {
                        let j = s * self.num_actions + a;
                        self.phi(h, s, a).iter().enumerate().all(|(k, &x)| x == if k == j { 1.0 } else { 0.0 })
                    })
                })
            })
    }
}

/// Reward sampling and enumeration, implemented by both reward model flavours.
pub trait RewardSource {
    fn horizon(&self) -> usize;
    fn num_states(&self) -> usize;
    fn num_actions(&self) -> usize;
    /// `(value, probability)` atoms of `r_h(s,a)`, zero-mass atoms omitted.
    fn atoms(&self, h: usize, s: usize, a: usize) -> Vec<(f64, f64)>;
    fn sample<R: Rng + ?Sized>(&self, h: usize, s: usize, a: usize, rng: &mut R) -> f64;
    /// The model with every reward rounded up to the grid, `r̄ = U(r)`.
    fn discretize(&self, grid: &BudgetGrid) -> RewardModel;
}

/// Known reward distributions supported on `{iυ : 0 ≤ i ≤ ⌈1/υ⌉} ∩ [0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardModel {
    upsilon: f64,
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    levels: usize,
    /// `[h][s][a][i]`
    pmf: Vec<f64>,
}

impl RewardModel {
    pub fn new(upsilon: f64, horizon: usize, num_states: usize, num_actions: usize, pmf: Vec<f64>) -> Result<Self> {
        if !(upsilon.is_finite() && upsilon > 0.0 && upsilon <= 1.0) {
            return Err(Error::InvalidModel(format!("reward precision {upsilon} outside (0, 1]")));
        }
        let levels = reward_levels(upsilon);
        let expected = horizon
            .checked_mul(num_states)
            .and_then(|x| x.checked_mul(num_actions))
            .and_then(|x| x.checked_mul(levels))
            .ok_or_else(|| Error::InvalidModel("reward table too large".into()))?;
        if pmf.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: pmf.len() });
        }
        for (k, row) in pmf.chunks(levels).enumerate() {
            let mut total = 0.0;
            for (i, &p) in row.iter().enumerate() {
                if !(p.is_finite() && p >= 0.0) {
                    return Err(Error::InvalidModel(format!("bad reward probability {p} in row {k}")));
                }
                if p > 0.0 && i as f64 * upsilon > 1.0 + SNAP {
                    return Err(Error::InvalidModel(format!("reward level {i} lies above 1 in row {k}")));
                }
                total += p;
            }
            if (total - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidModel(format!("reward pmf row {k} sums to {total}")));
            }
        }
        Ok(Self { upsilon, horizon, num_states, num_actions, levels, pmf })
    }

    /// Every reward is a point mass at zero.
    pub fn zero(upsilon: f64, horizon: usize, num_states: usize, num_actions: usize) -> Result<Self> {
        let levels = reward_levels(upsilon);
        let mut pmf = vec![0.0; horizon * num_states * num_actions * levels];
        pmf.iter_mut().step_by(levels).for_each(|p| *p = 1.0);
        Self::new(upsilon, horizon, num_states, num_actions, pmf)
    }

    /// Deterministic rewards given as grid indices `[h][s][a]`.
    pub fn deterministic(
        upsilon: f64,
        horizon: usize,
        num_states: usize,
        num_actions: usize,
        idx: &[usize],
    ) -> Result<Self> {
        let levels = reward_levels(upsilon);
        if idx.len() != horizon * num_states * num_actions {
            return Err(Error::DimensionMismatch { expected: horizon * num_states * num_actions, got: idx.len() });
        }
        let mut pmf = vec![0.0; idx.len() * levels];
        for (k, &i) in idx.iter().enumerate() {
            if i >= levels {
                return Err(Error::InvalidModel(format!("reward level {i} out of range")));
            }
            pmf[k * levels + i] = 1.0;
        }
        Self::new(upsilon, horizon, num_states, num_actions, pmf)
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }

    /// `⌈1/υ⌉ + 1`.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// The vector `φ_{h,r}(s,a)` with entries `r_h(iυ|s,a)`.
    pub fn pmf(&self, h: usize, s: usize, a: usize) -> &[f64] {
        let start = ((h * self.num_states + s) * self.num_actions + a) * self.levels;
        &self.pmf[start..start + self.levels]
    }

    pub fn pmf_table(&self) -> &[f64] {
        &self.pmf
    }

    pub fn mean(&self, h: usize, s: usize, a: usize) -> f64 {
        self.pmf(h, s, a).iter().enumerate().map(|(i, p)| i as f64 * self.upsilon * p).sum()
    }

    /// Whether every reward level is a multiple of `grid.upsilon()`.
    pub fn is_on_grid(&self, grid: &BudgetGrid) -> bool {
        if self.upsilon == grid.upsilon() {
            return true;
        }
        (0..self.levels).all(|i| {
            let mass: f64 = self.pmf.iter().skip(i).step_by(self.levels).sum();
            mass == 0.0 || grid.on_grid_index(i as f64 * self.upsilon).is_some()
        })
    }

    /// Reward pmf re-indexed onto `grid`, failing if any level is off-grid.
    pub fn on_grid(&self, grid: &BudgetGrid) -> Result<RewardModel> {
        if !self.is_on_grid(grid) {
            return Err(Error::GridMismatch(format!(
                "reward precision {} does not divide into grid precision {}",
                self.upsilon,
                grid.upsilon()
            )));
        }
        Ok(self.discretize(grid))
    }
}

impl RewardSource for RewardModel {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn atoms(&self, h: usize, s: usize, a: usize) -> Vec<(f64, f64)> {
        self.pmf(h, s, a)
            .iter()
            .enumerate()
            .filter(|(_, &p)| p > 0.0)
            .map(|(i, &p)| (i as f64 * self.upsilon, p))
            .collect()
    }

    fn sample<R: Rng + ?Sized>(&self, h: usize, s: usize, a: usize, rng: &mut R) -> f64 {
        sample_index(self.pmf(h, s, a), rng) as f64 * self.upsilon
    }

    fn discretize(&self, grid: &BudgetGrid) -> RewardModel {
        if self.upsilon == grid.upsilon() {
            return self.clone();
        }
        let levels = grid.reward_levels();
        let mut pmf = vec![0.0; self.horizon * self.num_states * self.num_actions * levels];
        for (k, row) in self.pmf.chunks(self.levels).enumerate() {
            for (i, &p) in row.iter().enumerate() {
                if p > 0.0 {
                    let j = grid.reward_index(i as f64 * self.upsilon).min(levels - 1);
                    pmf[k * levels + j] += p;
                }
            }
        }
        RewardModel {
            upsilon: grid.upsilon(),
            horizon: self.horizon,
            num_states: self.num_states,
            num_actions: self.num_actions,
            levels,
            pmf,
        }
    }
}

/// Reward distributions with arbitrary finite support in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRewardModel {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    atoms: Vec<Vec<(f64, f64)>>,
}

impl RawRewardModel {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, atoms: Vec<Vec<(f64, f64)>>) -> Result<Self> {
        if atoms.len() != horizon * num_states * num_actions {
            return Err(Error::DimensionMismatch { expected: horizon * num_states * num_actions, got: atoms.len() });
        }
        for row in &atoms {
            let total: f64 = row.iter().map(|a| a.1).sum();
            if row.iter().any(|&(v, p)| !(0.0..=1.0).contains(&v) || !(p >= 0.0)) || (total - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidModel("raw reward atoms must be a distribution on [0, 1]".into()));
            }
        }
        Ok(Self { horizon, num_states, num_actions, atoms })
    }

    fn row(&self, h: usize, s: usize, a: usize) -> &[(f64, f64)] {
        &self.atoms[(h * self.num_states + s) * self.num_actions + a]
    }
}

impl RewardSource for RawRewardModel {
    fn horizon(&self) -> usize {
        self.horizon
    }

    fn num_states(&self) -> usize {
        self.num_states
    }

    fn num_actions(&self) -> usize {
        self.num_actions
    }

    fn atoms(&self, h: usize, s: usize, a: usize) -> Vec<(f64, f64)> {
        self.row(h, s, a).iter().copied().filter(|a| a.1 > 0.0).collect()
    }

    fn sample<R: Rng + ?Sized>(&self, h: usize, s: usize, a: usize, rng: &mut R) -> f64 {
        let row = self.row(h, s, a);
        let probs: Vec<f64> = row.iter().map(|x| x.1).collect();
        row[sample_index(&probs, rng)].0
    }

    fn discretize(&self, grid: &BudgetGrid) -> RewardModel {
        let levels = grid.reward_levels();
        let mut pmf = vec![0.0; self.atoms.len() * levels];
        for (k, row) in self.atoms.iter().enumerate() {
            for &(v, p) in row {
                pmf[k * levels + grid.reward_index(v).min(levels - 1)] += p;
            }
        }
        RewardModel {
            upsilon: grid.upsilon(),
            horizon: self.horizon,
            num_states: self.num_states,
            num_actions: self.num_actions,
            levels,
            pmf,
        }
    }
}

/// Augmented policy `π_h(·|s, iυ)` tabulated on the budget grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPolicy {
    grid: BudgetGrid,
    num_states: usize,
    num_actions: usize,
    /// `[h][s][i][a]`
    probs: Vec<f64>,
}

impl AugmentedPolicy {
    pub fn new(grid: BudgetGrid, num_states: usize, num_actions: usize, probs: Vec<f64>) -> Result<Self> {
        let expected = grid
            .horizon()
            .checked_mul(num_states)
            .and_then(|x| x.checked_mul(grid.len()))
            .and_then(|x| x.checked_mul(num_actions))
            .ok_or_else(|| Error::InvalidModel("policy table too large".into()))?;
        if num_actions == 0 || probs.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: probs.len() });
        }
        for row in probs.chunks(num_actions) {
            let total: f64 = row.iter().sum();
            if row.iter().any(|p| !(p.is_finite() && *p >= 0.0)) || (total - 1.0).abs() > SUM_TOL {
                return Err(Error::InvalidModel(format!("policy row sums to {total}")));
            }
        }
        Ok(Self { grid, num_states, num_actions, probs })
    }

    /// `π_h(s, iυ) = U(A)` everywhere.
    pub fn uniform(grid: BudgetGrid, num_states: usize, num_actions: usize) -> Self {
        let len = grid.horizon() * num_states * grid.len() * num_actions;
        Self { grid, num_states, num_actions, probs: vec![1.0 / num_actions as f64; len] }
    }

    /// Deterministic policy from an action table `[h][s][i]`.
    pub fn from_actions(grid: BudgetGrid, num_states: usize, num_actions: usize, actions: &[usize]) -> Result<Self> {
        let cells = grid.horizon() * num_states * grid.len();
        if actions.len() != cells {
            return Err(Error::DimensionMismatch { expected: cells, got: actions.len() });
        }
        let mut probs = vec![0.0; cells * num_actions];
        for (k, &a) in actions.iter().enumerate() {
            if a >= num_actions {
                return Err(Error::InvalidModel(format!("action {a} out of range")));
            }
            probs[k * num_actions + a] = 1.0;
        }
        Ok(Self { grid, num_states, num_actions, probs })
    }

    pub fn grid(&self) -> &BudgetGrid {
        &self.grid
    }

    pub fn horizon(&self) -> usize {
        self.grid.horizon()
    }

    pub fn num_states(&self) -> usize {
        self.num_states
    }

    pub fn num_actions(&self) -> usize {
        self.num_actions
    }

    pub fn probs(&self, h: usize, s: usize, i: usize) -> &[f64] {
        let start = ((h * self.num_states + s) * self.grid.len() + i) * self.num_actions;
        &self.probs[start..start + self.num_actions]
    }

    pub fn table(&self) -> &[f64] {
        &self.probs
    }

    /// Query with a raw budget, rounded onto the grid.
    pub fn raw(&self) -> RawBudgetPolicy<'_> {
        RawBudgetPolicy { policy: self }
    }

    pub(crate) fn check_dims(&self, num_states: usize, num_actions: usize, horizon: usize) -> Result<()> {
        if self.num_states != num_states || self.num_actions != num_actions || self.horizon() != horizon {
            return Err(Error::InvalidModel("policy dimensions do not match the model".into()));
        }
        Ok(())
    }
}

/// A policy over raw (continuous) budgets, possibly carrying episode state.
pub trait BudgetedPolicy {
    fn begin(&mut self, c1: f64);
    fn action_probs(&self, h: usize, s: usize, budget: f64) -> &[f64];
    fn observe_reward(&mut self, r: f64);
}

/// Looks up `clamp(round(c/υ), 0, ⌈H/υ⌉)` for the raw budget `c`.
#[derive(Debug, Clone, Copy)]
pub struct RawBudgetPolicy<'a> {
    policy: &'a AugmentedPolicy,
}

impl BudgetedPolicy for RawBudgetPolicy<'_> {
    fn begin(&mut self, _c1: f64) {}

    fn action_probs(&self, h: usize, s: usize, budget: f64) -> &[f64] {
        self.policy.probs(h, s, self.policy.grid.index_of(budget))
    }

    fn observe_reward(&mut self, _r: f64) {}
}

/// Plays `π̄_h(s, c − Σ r_t) = π_h(s, c − Σ U(r_t))`: the grid policy is
/// queried with the budget reduced by discretized rewards.
#[derive(Debug, Clone)]
pub struct DiscretizedPolicy<'a> {
    policy: &'a AugmentedPolicy,
    start_index: usize,
    spent: usize,
}

/// Wraps a grid policy for play in an environment with raw rewards.
pub fn wrap_discretized_policy(policy: &AugmentedPolicy, c1: f64) -> DiscretizedPolicy<'_> {
    let mut w = DiscretizedPolicy { policy, start_index: 0, spent: 0 };
    w.begin(c1);
    w
}

impl DiscretizedPolicy<'_> {
    /// Grid index currently used for lookups.
    pub fn query_index(&self) -> usize {
        self.start_index.saturating_sub(self.spent)
    }

    pub fn query_budget(&self) -> f64 {
        self.policy.grid.value(self.query_index())
    }
}

impl BudgetedPolicy for DiscretizedPolicy<'_> {
    fn begin(&mut self, c1: f64) {
        self.start_index = self.policy.grid.index_of(c1);
        self.spent = 0;
    }

    fn action_probs(&self, h: usize, s: usize, _budget: f64) -> &[f64] {
        self.policy.probs(h, s, self.query_index())
    }

    fn observe_reward(&mut self, r: f64) {
        self.spent = self.spent.saturating_add(self.policy.grid.reward_index(r));
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub state: usize,
    pub budget: f64,
    pub action: usize,
    pub reward: f64,
    pub next_state: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub initial_budget: f64,
    pub steps: Vec<Step>,
}

impl Trajectory {
    /// `R = Σ_h r_h`.
    pub fn total_reward(&self) -> f64 {
        self.steps.iter().map(|s| s.reward).sum()
    }
}

/// Rolls out an augmented policy for one episode from `(s₁, c1)`.
pub fn rollout_augmented<R: RewardSource, P: BudgetedPolicy, G: Rng + ?Sized>(
    model: &LowRankModel,
    rewards: &R,
    policy: &mut P,
    c1: f64,
    rng: &mut G,
) -> Trajectory {
    policy.begin(c1);
    let mut steps = Vec::with_capacity(model.horizon());
    let mut state = START_STATE;
    let mut budget = c1;
    for h in 0..model.horizon() {
        let action = sample_index(policy.action_probs(h, state, budget), rng);
        let reward = rewards.sample(h, state, action, rng);
        let next_state = sample_index(model.transition_row(h, state, action), rng);
        policy.observe_reward(reward);
        steps.push(Step { state, budget, action, reward, next_state });
        budget -= reward;
        state = next_state;
    }
    Trajectory { initial_budget: c1, steps }
}

/// Parameters of the random tabular instance generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TabularSpec {
    pub num_states: usize,
    pub num_actions: usize,
    pub horizon: usize,
    pub upsilon: f64,
    pub dirichlet_alpha: f64,
}

impl Default for TabularSpec {
    fn default() -> Self {
        Self { num_states: 3, num_actions: 2, horizon: 3, upsilon: 0.1, dirichlet_alpha: 1.0 }
    }
}

pub(crate) fn dirichlet<R: Rng + ?Sized>(n: usize, alpha: f64, rng: &mut R) -> Vec<f64> {
    let gamma = Gamma::new(alpha, 1.0).expect("dirichlet concentration must be positive");
    let mut x: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = x.iter().sum();
    if total > 0.0 && total.is_finite() {
        x.iter_mut().for_each(|v| *v /= total);
    } else {
        x.iter_mut().for_each(|v| *v = 0.0);
        x[rng.random_range(0..n)] = 1.0;
    }
    x
}

/// Random tabular transitions (Dirichlet rows) with random reward pmfs on the grid.
pub fn random_kernel<R: Rng + ?Sized>(spec: &TabularSpec, rng: &mut R) -> Vec<f64> {
    let mut kernel = Vec::with_capacity(spec.horizon * spec.num_states * spec.num_actions * spec.num_states);
    for _ in 0..spec.horizon * spec.num_states * spec.num_actions {
        kernel.extend(dirichlet(spec.num_states, spec.dirichlet_alpha, rng));
    }
    kernel
}

/// Generates a random tabular instance in its one-hot low-rank form.
pub fn make_tabular_lowrank<R: Rng + ?Sized>(spec: &TabularSpec, rng: &mut R) -> Result<(LowRankModel, RewardModel)> {
    if !(spec.dirichlet_alpha > 0.0 && spec.dirichlet_alpha.is_finite()) {
        return Err(Error::ConfigInvalid("dirichlet_alpha must be positive".into()));
    }
    if spec.num_states == 0 || spec.num_actions == 0 || spec.horizon == 0 {
        return Err(Error::ConfigInvalid("instance dimensions must be positive".into()));
    }
    let kernel = random_kernel(spec, rng);
    let model = LowRankModel::tabular(spec.horizon, spec.num_states, spec.num_actions, &kernel)?;
    let levels = reward_levels(spec.upsilon);
    let admissible = (0..levels).filter(|&i| i as f64 * spec.upsilon <= 1.0 + SNAP).count();
    let mut pmf = Vec::with_capacity(spec.horizon * spec.num_states * spec.num_actions * levels);
    for _ in 0..spec.horizon * spec.num_states * spec.num_actions {
        let mut row = dirichlet(admissible, spec.dirichlet_alpha, rng);
        row.resize(levels, 0.0);
        pmf.extend(row);
    }
    let rewards = RewardModel::new(spec.upsilon, spec.horizon, spec.num_states, spec.num_actions, pmf)?;
    Ok((model, rewards))
}

/// Random raw rewards with `atoms` off-grid support points per `(h,s,a)`.
pub fn make_raw_rewards<R: Rng + ?Sized>(
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    atoms: usize,
    rng: &mut R,
) -> Result<RawRewardModel> {
    let rows = (0..horizon * num_states * num_actions)
        .map(|_| {
            let probs = dirichlet(atoms.max(1), 1.0, rng);
            probs.into_iter().map(|p| (rng.random::<f64>(), p)).collect()
        })
        .collect();
    RawRewardModel::new(horizon, num_states, num_actions, rows)
}

/// A low-rank model bundled with its known reward model.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub model: LowRankModel,
    pub rewards: RewardModel,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct InstanceFile {
    #[serde(rename = "H")]
    horizon: usize,
    #[serde(rename = "A")]
    num_actions: usize,
    d: usize,
    states: usize,
    phi: Vec<Vec<Vec<Vec<f64>>>>,
    psi: Vec<Vec<Vec<f64>>>,
    reward_pmf: Vec<Vec<Vec<Vec<f64>>>>,
    upsilon: f64,
}

fn flatten_checked<T: Copy>(parts: impl IntoIterator<Item = Vec<T>>, inner: usize, what: &str) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for p in parts {
        if p.len() != inner {
            return Err(Error::Parse(format!("{what}: inner length {} != {inner}", p.len())));
        }
        out.extend(p);
    }
    Ok(out)
}

fn check_len<T>(v: &[T], n: usize, what: &str) -> Result<()> {
    if v.len() == n {
        Ok(())
    } else {
        Err(Error::Parse(format!("{what}: length {} != {n}", v.len())))
    }
}

impl Instance {
    pub fn new(model: LowRankModel, rewards: RewardModel) -> Result<Self> {
        if model.horizon() != rewards.horizon
            || model.num_states() != rewards.num_states
            || model.num_actions() != rewards.num_actions
        {
            return Err(Error::InvalidModel("reward model does not match the transition model".into()));
        }
        Ok(Self { model, rewards })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: InstanceFile = serde_json::from_str(text)?;
        let (h_n, s_n, a_n, d) = (f.horizon, f.states, f.num_actions, f.d);
        check_len(&f.phi, h_n, "phi")?;
        check_len(&f.psi, h_n, "psi")?;
        check_len(&f.reward_pmf, h_n, "reward_pmf")?;
        let mut phi = Vec::new();
        for per_step in f.phi {
            check_len(&per_step, s_n, "phi[h]")?;
            for per_state in per_step {
                check_len(&per_state, a_n, "phi[h][s]")?;
                phi.extend(flatten_checked(per_state, d, "phi[h][s][a]")?);
            }
        }
        let mut psi = Vec::new();
        for per_step in f.psi {
            check_len(&per_step, s_n, "psi[h]")?;
            psi.extend(flatten_checked(per_step, d, "psi[h][s]")?);
        }
        if !(f.upsilon.is_finite() && f.upsilon > 0.0 && f.upsilon <= 1.0) {
            return Err(Error::Parse(format!("upsilon {} outside (0, 1]", f.upsilon)));
        }
        let levels = reward_levels(f.upsilon);
        let mut pmf = Vec::new();
        for per_step in f.reward_pmf {
            check_len(&per_step, s_n, "reward_pmf[h]")?;
            for per_state in per_step {
                check_len(&per_state, a_n, "reward_pmf[h][s]")?;
                pmf.extend(flatten_checked(per_state, levels, "reward_pmf[h][s][a]")?);
            }
        }
        let model = LowRankModel::new(h_n, s_n, a_n, d, phi, psi)?;
        let rewards = RewardModel::new(f.upsilon, h_n, s_n, a_n, pmf)?;
        Self::new(model, rewards)
    }

    pub fn to_json(&self) -> String {
        let m = &self.model;
        let (h_n, s_n, a_n) = (m.horizon, m.num_states, m.num_actions);
        let file = InstanceFile {
            horizon: h_n,
            num_actions: a_n,
            d: m.rank,
            states: s_n,
            phi: (0..h_n)
                .map(|h| (0..s_n).map(|s| (0..a_n).map(|a| m.phi(h, s, a).to_vec()).collect()).collect())
                .collect(),
            psi: (0..h_n).map(|h| (0..s_n).map(|s| m.psi(h, s).to_vec()).collect()).collect(),
            reward_pmf: (0..h_n)
                .map(|h| (0..s_n).map(|s| (0..a_n).map(|a| self.rewards.pmf(h, s, a).to_vec()).collect()).collect())
                .collect(),
            upsilon: self.rewards.upsilon,
        };
        serde_json::to_string_pretty(&file).expect("instance serialization cannot fail")
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PolicyFile {
    #[serde(rename = "H")]
    horizon: usize,
    #[serde(rename = "A")]
    num_actions: usize,
    states: usize,
    upsilon: f64,
    max_index: usize,
    pi: Vec<Vec<Vec<Vec<f64>>>>,
}

impl Serialize for AugmentedPolicy {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let pi = (0..self.horizon())
            .map(|h| {
                (0..self.num_states)
                    .map(|s| (0..self.grid.len()).map(|i| self.probs(h, s, i).to_vec()).collect())
                    .collect()
            })
            .collect();
        PolicyFile {
            horizon: self.horizon(),
            num_actions: self.num_actions,
            states: self.num_states,
            upsilon: self.grid.upsilon(),
            max_index: self.grid.max_index(),
            pi,
        }
        .serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for AugmentedPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as _;
        let f = PolicyFile::deserialize(deserializer)?;
        let grid = BudgetGrid::new(f.upsilon, f.horizon).map_err(D::Error::custom)?;
        if grid.max_index() != f.max_index {
            return Err(D::Error::custom("max_index does not match upsilon and H"));
        }
        let mut probs = Vec::new();
        let err = |e: Error| D::Error::custom(e.to_string());
        check_len(&f.pi, f.horizon, "pi").map_err(err)?;
        for per_step in f.pi {
            check_len(&per_step, f.states, "pi[h]").map_err(err)?;
            for per_state in per_step {
                check_len(&per_state, grid.len(), "pi[h][s]").map_err(err)?;
                probs.extend(flatten_checked(per_state, f.num_actions, "pi[h][s][i]").map_err(err)?);
            }
        }
        AugmentedPolicy::new(grid, f.states, f.num_actions, probs).map_err(err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn chain_instance() -> (LowRankModel, RewardModel) {
        // Two states, two actions, H = 3; action a moves deterministically to state a.
        let (h_n, s_n, a_n) = (3, 2, 2);
        let mut kernel = vec![0.0; h_n * s_n * a_n * s_n];
        for h in 0..h_n {
            for s in 0..s_n {
                for a in 0..a_n {
                    kernel[((h * s_n + s) * a_n + a) * s_n + a] = 1.0;
                }
            }
        }
        let model = LowRankModel::tabular(h_n, s_n, a_n, &kernel).unwrap();
        // Reward index 1 in state 0, 2 in state 1, regardless of action.
        let idx: Vec<usize> = (0..h_n * s_n * a_n).map(|k| 1 + (k / a_n) % s_n).collect();
        let rewards = RewardModel::deterministic(0.1, h_n, s_n, a_n, &idx).unwrap();
        (model, rewards)
    }

    #[test]
    fn tabular_rows_are_exact() {
        let mut rng = seeded(11);
        let spec = TabularSpec::default();
        let kernel = random_kernel(&spec, &mut rng);
        let model = LowRankModel::tabular(3, 3, 2, &kernel).unwrap();
        assert!(model.is_tabular());
        for h in 0..3 {
            for s in 0..3 {
                for a in 0..2 {
                    let row = model.transition_dist(h, s, a).unwrap();
                    let start = ((h * 3 + s) * 2 + a) * 3;
                    for (x, y) in row.iter().zip(&kernel[start..start + 3]) {
                        assert!((x - y).abs() < 1e-15);
                    }
                }
            }
        }
    }

    #[test]
    fn rank_one_uniform() {
        let n = 4;
        let model = LowRankModel::new(1, n, 1, 1, vec![1.0; n], vec![1.0 / n as f64; n]).unwrap();
        let row = model.transition_dist(0, 2, 0).unwrap();
        assert!(row.iter().all(|&p| (p - 0.25).abs() < 1e-15));
        assert!(!model.is_tabular());
    }

    #[test]
    fn random_rank_two_matches_dot_products() {
        // Mixture of two base distributions: ψ(s') = (q1(s'), q2(s')), φ(s,a) = (w, 1 − w).
        let mut rng = seeded(5);
        let q1 = dirichlet(3, 1.0, &mut rng);
        let q2 = dirichlet(3, 1.0, &mut rng);
        let weights: Vec<f64> = (0..6).map(|_| rng.random::<f64>()).collect();
        let phi: Vec<f64> = weights.iter().flat_map(|&w| [w, 1.0 - w]).collect();
        let psi: Vec<f64> = (0..3).flat_map(|s| [q1[s], q2[s]]).collect();
        let model = LowRankModel::new(1, 3, 2, 2, phi.clone(), psi.clone()).unwrap();
        for s in 0..3 {
            for a in 0..2 {
                let row = model.transition_dist(0, s, a).unwrap();
                let f = &phi[(s * 2 + a) * 2..(s * 2 + a) * 2 + 2];
                for s2 in 0..3 {
                    let direct = psi[s2 * 2] * f[0] + psi[s2 * 2 + 1] * f[1];
                    assert!((row[s2] - direct).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invalid_models_rejected() {
        // Row sums to 0.9.
        assert!(matches!(LowRankModel::new(1, 2, 1, 1, vec![1.0, 1.0], vec![0.5, 0.4]), Err(Error::InvalidModel(_))));
        // Negative entry.
        assert!(matches!(LowRankModel::new(1, 2, 1, 1, vec![1.0, 1.0], vec![1.1, -0.1]), Err(Error::InvalidModel(_))));
        // Feature norm above one.
        assert!(LowRankModel::new(1, 1, 1, 1, vec![2.0], vec![0.5]).is_err());
        assert!(matches!(
            LowRankModel::new(1, 1, 1, 1, vec![1.0], vec![1.0, 0.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn tiny_negative_entries_clamped() {
        let model = LowRankModel::new(1, 2, 1, 1, vec![1.0, 1.0], vec![1.0 + 5e-13, -5e-13]).unwrap();
        let row = model.transition_row(0, 0, 0);
        assert_eq!(row[1], 0.0);
        assert!((row[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn generator_examples() {
        let mut rng = seeded(1);
        let spec = TabularSpec { num_states: 1, ..TabularSpec::default() };
        let (model, rewards) = make_tabular_lowrank(&spec, &mut rng).unwrap();
        for h in 0..3 {
            for a in 0..2 {
                assert_eq!(model.transition_row(h, 0, a), &[1.0]);
                let total: f64 = rewards.pmf(h, 0, a).iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
        }
        let spec = TabularSpec::default();
        let a = make_tabular_lowrank(&spec, &mut seeded(9)).unwrap();
        let b = make_tabular_lowrank(&spec, &mut seeded(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.rank(), 6);
    }

    #[test]
    fn zero_reward_keeps_budget() {
        let mut rng = seeded(2);
        let (model, _) = make_tabular_lowrank(&TabularSpec::default(), &mut rng).unwrap();
        let rewards = RewardModel::zero(0.1, 3, 3, 2).unwrap();
        let grid = BudgetGrid::new(0.1, 3).unwrap();
        let policy = AugmentedPolicy::uniform(grid, 3, 2);
        let traj = rollout_augmented(&model, &rewards, &mut policy.raw(), 1.3, &mut rng);
        assert!(traj.steps.iter().all(|s| s.budget == 1.3));
    }

    #[test]
    fn single_step_budget_arithmetic() {
        let model = LowRankModel::tabular(1, 1, 1, &[1.0]).unwrap();
        let rewards = RewardModel::deterministic(0.1, 1, 1, 1, &[5]).unwrap();
        let grid = BudgetGrid::new(0.1, 1).unwrap();
        let policy = AugmentedPolicy::uniform(grid, 1, 1);
        let traj = rollout_augmented(&model, &rewards, &mut policy.raw(), 0.8, &mut seeded(0));
        let s = &traj.steps[0];
        assert_eq!(s.budget, 0.8);
        assert!((s.budget - s.reward - 0.3).abs() < 1e-12);
    }

    #[test]
    fn chain_rollout_matches_hand_unrolled_path() {
        let (model, rewards) = chain_instance();
        let grid = BudgetGrid::new(0.1, 3).unwrap();
        // Action 1 while budget index ≥ 2, action 0 otherwise.
        let mut actions = vec![0; 3 * 2 * grid.len()];
        for h in 0..3 {
            for s in 0..2 {
                for i in 0..grid.len() {
                    actions[(h * 2 + s) * grid.len() + i] = usize::from(i >= 2);
                }
            }
        }
        let policy = AugmentedPolicy::from_actions(grid, 2, 2, &actions).unwrap();
        let traj = rollout_augmented(&model, &rewards, &mut policy.raw(), 0.4, &mut seeded(3));
        // Hand-unrolled: (s=0,c=.4) → a=1, r=.1 → (s=1,c=.3) → a=1, r=.2 → (s=1,c=.1) → a=0, r=.2 → s=0.
        let states: Vec<usize> = traj.steps.iter().map(|s| s.state).collect();
        let acts: Vec<usize> = traj.steps.iter().map(|s| s.action).collect();
        assert_eq!(states, vec![0, 1, 1]);
        assert_eq!(acts, vec![1, 1, 0]);
        assert_eq!(traj.steps[2].next_state, 0);
        assert!((traj.total_reward() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn wrapper_queries_discretized_budget() {
        let grid = BudgetGrid::new(0.1, 2).unwrap();
        let policy = AugmentedPolicy::uniform(grid, 1, 1);
        let mut w = wrap_discretized_policy(&policy, 1.0);
        let mut seen = vec![w.query_budget()];
        w.observe_reward(0.23);
        seen.push(w.query_budget());
        w.observe_reward(0.5);
        seen.push(w.query_budget());
        for (x, y) in seen.iter().zip([1.0, 0.7, 0.2]) {
            assert!((x - y).abs() < 1e-12, "{seen:?}");
        }
        let mut zero = wrap_discretized_policy(&policy, 1.0);
        for _ in 0..3 {
            zero.observe_reward(0.0);
            assert_eq!(zero.query_index(), 10);
        }
    }

    #[test]
    fn wrapper_agrees_with_raw_lookup_on_grid_rewards() {
        let grid = BudgetGrid::new(0.1, 3).unwrap();
        let policy = AugmentedPolicy::uniform(grid, 1, 1);
        let mut w = wrap_discretized_policy(&policy, 2.0);
        let mut raw_budget = 2.0;
        for r in [0.3, 0.7, 0.1, 0.9, 0.4] {
            assert_eq!(w.query_index(), grid.index_of(raw_budget));
            w.observe_reward(r);
            raw_budget -= r;
        }
    }

    #[test]
    fn reward_discretization_rounds_up() {
        let raw = RawRewardModel::new(1, 1, 1, vec![vec![(0.23, 0.5), (0.3, 0.25), (0.0, 0.25)]]).unwrap();
        let grid = BudgetGrid::new(0.1, 1).unwrap();
        let disc = raw.discretize(&grid);
        let pmf = disc.pmf(0, 0, 0);
        assert_eq!(pmf[0], 0.25);
        assert_eq!(pmf[3], 0.75);
        // Coarsening an on-grid model.
        let fine = RewardModel::deterministic(0.05, 1, 1, 1, &[3]).unwrap();
        let coarse = fine.discretize(&grid);
        assert_eq!(coarse.pmf(0, 0, 0)[2], 1.0);
        assert!(!fine.is_on_grid(&grid));
        assert!(RewardModel::deterministic(0.2, 1, 1, 1, &[2]).unwrap().is_on_grid(&grid));
    }

    #[test]
    fn instance_json_round_trip() {
        let (model, rewards) = make_tabular_lowrank(&TabularSpec::default(), &mut seeded(4)).unwrap();
        let inst = Instance::new(model, rewards).unwrap();
        let text = inst.to_json();
        let back = Instance::from_json(&text).unwrap();
        assert_eq!(inst, back);
        assert_eq!(text, back.to_json());
    }

    #[test]
    fn policy_json_round_trip() {
        let grid = BudgetGrid::new(0.25, 2).unwrap();
        let mut rng = seeded(8);
        let mut probs = Vec::new();
        for _ in 0..2 * 2 * grid.len() {
            probs.extend(dirichlet(3, 1.0, &mut rng));
        }
        let policy = AugmentedPolicy::new(grid, 2, 3, probs).unwrap();
        let text = serde_json::to_string(&policy).unwrap();
        let back: AugmentedPolicy = serde_json::from_str(&text).unwrap();
        assert_eq!(policy, back);
    }
}
