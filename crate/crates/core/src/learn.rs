//! Exploration datasets, the finite-class maximum-likelihood oracle and
//! total-variation diagnostics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{
    dirichlet, rollout_augmented, wrap_discretized_policy, AugmentedPolicy, BudgetedPolicy, LowRankModel, RewardSource,
    START_STATE,
};
use crate::error::{Error, Result};
use crate::rng::sample_index;

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Transition {
    pub s: usize,
    pub a: usize,
    pub s_next: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bag {
    D,
    Dtilde,
}

/// The two per-step bags of exploration transitions.
///
/// `main[h]` holds tuples whose action was drawn uniformly after rolling in
/// the current policy; `tilde[h]` holds tuples whose *previous* action was
/// uniform. Both are used when fitting step `h`.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionDataset {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    main: Vec<Vec<Transition>>,
    tilde: Vec<Vec<Transition>>,
    /// `[h][s][a][s']` counts over both bags.
    counts: Vec<u64>,
    rollouts: u64,
}

impl TransitionDataset {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self {
            horizon,
            num_states,
            num_actions,
            main: vec![Vec::new(); horizon],
            tilde: vec![Vec::new(); horizon],
            counts: vec![0; horizon * num_states * num_actions * num_states],
            rollouts: 0,
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn push(&mut self, bag: Bag, h: usize, t: Transition) -> Result<()> {
        if h >= self.horizon || t.s >= self.num_states || t.a >= self.num_actions || t.s_next >= self.num_states {
            return Err(Error::Parse(format!("transition {t:?} at step {h} out of range")));
        }
        match bag {
            Bag::D => self.main[h].push(t),
            Bag::Dtilde => self.tilde[h].push(t),
        }
        let idx = self.count_index(h, t.s, t.a, t.s_next);
        self.counts[idx] += 1;
        Ok(())
    }

    fn count_index(&self, h: usize, s: usize, a: usize, s_next: usize) -> usize {
        ((h * self.num_states + s) * self.num_actions + a) * self.num_states + s_next
    }

    pub fn bag(&self, bag: Bag, h: usize) -> &[Transition] {
        match bag {
            Bag::D => &self.main[h],
            Bag::Dtilde => &self.tilde[h],
        }
    }

    /// `|D_h ∪ D̃_h|` counted with multiplicity.
    pub fn len_at(&self, h: usize) -> usize {
        self.main[h].len() + self.tilde[h].len()
    }

    /// Number of `(s,a,s')` occurrences at step `h` over both bags.
    pub fn count(&self, h: usize, s: usize, a: usize, s_next: usize) -> u64 {
        self.counts[self.count_index(h, s, a, s_next)]
    }

    /// Environment episodes consumed so far.
    pub fn rollouts(&self) -> u64 {
        self.rollouts
    }

    /// One JSON object per line, steps 1-based.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for h in 0..self.horizon {
            for (bag, name) in [(Bag::D, "D"), (Bag::Dtilde, "Dtilde")] {
                for t in self.bag(bag, h) {
                    let rec = TupleRecord { h: h + 1, s: t.s, a: t.a, s_next: t.s_next, bag: name.to_string() };
                    out.push_str(&serde_json::to_string(&rec).expect("tuple serialization cannot fail"));
                    out.push('\n');
                }
            }
        }
        out
    }

    pub fn from_jsonl(text: &str, horizon: usize, num_states: usize, num_actions: usize) -> Result<Self> {
        let cells = horizon
            .checked_mul(num_states)
            .and_then(|x| x.checked_mul(num_actions))
            .and_then(|x| x.checked_mul(num_states))
            .filter(|&c| c <= 50_000_000)
            .ok_or_else(|| Error::Parse("dataset dimensions too large".into()))?;
        debug_assert!(cells <= 50_000_000);
        let mut ds = Self::new(horizon, num_states, num_actions);
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let rec: TupleRecord = serde_json::from_str(line)?;
            let bag = match rec.bag.as_str() {
                "D" => Bag::D,
                "Dtilde" => Bag::Dtilde,
                other => return Err(Error::Parse(format!("unknown bag {other:?}"))),
            };
            if rec.h == 0 {
                return Err(Error::Parse("steps are 1-based".into()));
            }
            ds.push(bag, rec.h - 1, Transition { s: rec.s, a: rec.a, s_next: rec.s_next })?;
        }
        Ok(ds)
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TupleRecord {
    h: usize,
    s: usize,
    a: usize,
    s_next: usize,
    bag: String,
}

fn uniform_action<R: Rng + ?Sized>(num_actions: usize, rng: &mut R) -> usize {
    rng.random_range(0..num_actions)
}

/// Gathers one iteration of exploration data using `H` environment episodes.
///
/// The first episode records a uniformly random first transition into
/// `D̃_1`. Episode `h + 1` rolls in with the wrapped previous policy from
/// budget `c_prev` up to step `h`, then acts uniformly at step `h` (into
/// `D_h`) and, if step `h + 1` still precedes the last step, uniformly
/// once more (into `D̃_{h+1}`).
pub fn collect_iteration_data<R: RewardSource, G: Rng + ?Sized>(
    env: &LowRankModel,
    rewards: &R,
    policy: &AugmentedPolicy,
    c_prev: f64,
    dataset: &mut TransitionDataset,
    rng: &mut G,
) -> Result<()> {
    let h_n = env.horizon();
    let a_n = env.num_actions();
    if dataset.horizon != h_n || dataset.num_states != env.num_states() || dataset.num_actions != a_n {
        return Err(Error::DimensionMismatch { expected: h_n, got: dataset.horizon });
    }
    policy.check_dims(env.num_states(), a_n, h_n)?;

    let a = uniform_action(a_n, rng);
    let s_next = sample_index(env.transition_row(0, START_STATE, a), rng);
    dataset.push(Bag::Dtilde, 0, Transition { s: START_STATE, a, s_next })?;
    dataset.rollouts += 1;

    for h in 0..h_n.saturating_sub(1) {
        let mut wrapped = wrap_discretized_policy(policy, c_prev);
        let mut s = START_STATE;
        for t in 0..h {
            let act = sample_index(wrapped.action_probs(t, s, 0.0), rng);
            let r = rewards.sample(t, s, act, rng);
            wrapped.observe_reward(r);
            s = sample_index(env.transition_row(t, s, act), rng);
        }
        let a = uniform_action(a_n, rng);
        let s_mid = sample_index(env.transition_row(h, s, a), rng);
        dataset.push(Bag::D, h, Transition { s, a, s_next: s_mid })?;
        if h + 1 < h_n - 1 {
            let a2 = uniform_action(a_n, rng);
            let s_end = sample_index(env.transition_row(h + 1, s_mid, a2), rng);
            dataset.push(Bag::Dtilde, h + 1, Transition { s: s_mid, a: a2, s_next: s_end })?;
        }
        dataset.rollouts += 1;
    }
    Ok(())
}

/// A finite set of candidate factorizations sharing `H`, `|S|`, `A` and `d`.
#[derive(Debug, Clone)]
pub struct ModelClass {
    candidates: Vec<LowRankModel>,
    truth_index: Option<usize>,
}

impl ModelClass {
    pub fn new(candidates: Vec<LowRankModel>, truth_index: Option<usize>) -> Result<Self> {
        let first = candidates.first().ok_or_else(|| Error::ConfigInvalid("model class is empty".into()))?;
        if candidates.iter().any(|m| {
            m.horizon() != first.horizon()
                || m.num_states() != first.num_states()
                || m.num_actions() != first.num_actions()
                || m.rank() != first.rank()
        }) {
            return Err(Error::InvalidModel("class candidates disagree on dimensions".into()));
        }
        if truth_index.is_some_and(|i| i >= candidates.len()) {
            return Err(Error::ConfigInvalid("truth index out of range".into()));
        }
        Ok(Self { candidates, truth_index })
    }

    /// `{truth} ∪` tabular candidates whose rows are
    /// `(1 − mix)·truth + mix·Dirichlet(alpha)`, truth placed at a random index.
    pub fn perturbed<G: Rng + ?Sized>(
        truth: &LowRankModel,
        size: usize,
        mix: f64,
        alpha: f64,
        rng: &mut G,
    ) -> Result<Self> {
        if size == 0 {
            return Err(Error::ConfigInvalid("class size must be positive".into()));
        }
        if !truth.is_tabular() {
            return Err(Error::ConfigInvalid("perturbed classes need a tabular (one-hot) truth".into()));
        }
        if !(0.0..=1.0).contains(&mix) || !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::ConfigInvalid("perturbation mix must lie in [0, 1] and alpha be positive".into()));
        }
        let (h_n, s_n, a_n) = (truth.horizon(), truth.num_states(), truth.num_actions());
        let truth_index = rng.random_range(0..size);
        let mut candidates = Vec::with_capacity(size);
        for idx in 0..size {
            if idx == truth_index {
                candidates.push(truth.clone());
                continue;
            }
            let mut kernel = Vec::with_capacity(truth.transition_tensor().len());
            for row in truth.transition_tensor().chunks(s_n) {
                let noise = dirichlet(s_n, alpha, rng);
                kernel.extend(row.iter().zip(noise).map(|(p, q)| (1.0 - mix) * p + mix * q));
            }
            candidates.push(LowRankModel::tabular(h_n, s_n, a_n, &kernel)?);
        }
        Self::new(candidates, Some(truth_index))
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    pub fn candidate(&self, i: usize) -> &LowRankModel {
        &self.candidates[i]
    }

    pub fn candidates(&self) -> &[LowRankModel] {
        &self.candidates
    }

    pub fn truth_index(&self) -> Option<usize> {
        self.truth_index
    }

    pub fn includes_truth(&self) -> bool {
        self.truth_index.is_some()
    }

    /// The model taking step `h` from candidate `choice[h]`.
    pub fn assemble(&self, choice: &[usize]) -> Result<LowRankModel> {
        let steps: Vec<&LowRankModel> = choice
            .iter()
            .map(|&i| self.candidates.get(i).ok_or(Error::DimensionMismatch { expected: self.len(), got: i }))
            .collect::<Result<_>>()?;
        LowRankModel::from_steps(&steps)
    }
}

/// `Σ_{(s,a,s') ∈ D_h ∪ D̃_h} log max(P(s'|s,a), ε)`.
pub fn log_likelihood(dataset: &TransitionDataset, candidate: &LowRankModel, h: usize) -> f64 {
    let s_n = dataset.num_states;
    let mut total = 0.0;
    for s in 0..s_n {
        for a in 0..dataset.num_actions {
            let row = candidate.transition_row(h, s, a);
            for (s2, &p) in row.iter().enumerate() {
                let n = dataset.count(h, s, a, s2);
                if n > 0 {
                    total += n as f64 * p.max(PROB_FLOOR).ln();
                }
            }
        }
    }
    total
}

/// Index of the maximum-likelihood candidate for step `h`, ties to the smallest index.
pub fn mle_fit(dataset: &TransitionDataset, class: &ModelClass, h: usize) -> Result<usize> {
    if h >= dataset.horizon || dataset.len_at(h) == 0 {
        return Err(Error::EmptyDataset(h));
    }
    let mut best = 0;
    let mut best_ll = f64::NEG_INFINITY;
    for (i, c) in class.candidates.iter().enumerate() {
        let ll = log_likelihood(dataset, c, h);
        if ll > best_ll {
            best_ll = ll;
            best = i;
        }
    }
    Ok(best)
}

/// `‖p − q‖₁`.
pub fn model_tv_error(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::DimensionMismatch { expected: p.len(), got: q.len() });
    }
    Ok(p.iter().zip(q).map(|(x, y)| (x - y).abs()).sum())
}

/// `E_{(s,a)~ρ}[‖P̂_h(·|s,a) − P_h(·|s,a)‖₁²]` for a weighting `ρ` over `(s,a)`.
pub fn weighted_squared_tv(fitted: &LowRankModel, truth: &LowRankModel, h: usize, weights: &[f64]) -> Result<f64> {
    let (s_n, a_n) = (truth.num_states(), truth.num_actions());
    if weights.len() != s_n * a_n {
        return Err(Error::DimensionMismatch { expected: s_n * a_n, got: weights.len() });
    }
    let mut total = 0.0;
    for s in 0..s_n {
        for a in 0..a_n {
            let f = model_tv_error(fitted.transition_row(h, s, a), truth.transition_row(h, s, a))?;
            total += weights[s * a_n + a] * f * f;
        }
    }
    Ok(total)
}

/// Rolls out the wrapped policy once, counting the episode against the dataset.
pub fn rollout_counted<R: RewardSource, G: Rng + ?Sized>(
    env: &LowRankModel,
    rewards: &R,
    policy: &AugmentedPolicy,
    c1: f64,
    dataset: &mut TransitionDataset,
    rng: &mut G,
) -> crate::env::Trajectory {
    dataset.rollouts += 1;
    rollout_augmented(env, rewards, &mut wrap_discretized_policy(policy, c1), c1, rng)
}
