//! Least-squares value iteration over the budget grid (CVaR-LSVI).
//!
//! Features are `φ̄_h(s,a) = φ̂_h(s,a) ⊗ r_h(·|s,a)`. Each iteration regresses
//! next-step values at every budget index onto `φ̄`, acts greedily on clipped
//! optimistic Q estimates, and simulates one episode in the learned model.
//! After `T1` iterations every greedy policy is scored by Monte Carlo and the
//! lowest estimate wins.
//!
//! The state space is finite, so only `m = |S|·A` distinct features exist per
//! step. Regression is carried out in that `m`-dimensional kernel space:
//! with `F` the `m × d̄` feature matrix, `n` the visit counts and `G = FFᵀ`,
//! `F Λ⁻¹ Fᵀ = λ⁻¹ (G − G N^{½} (λI + N^{½} G N^{½})⁻¹ N^{½} G)`, which gives
//! both the fitted values and the elliptical norms without forming `Λ`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::env::{AugmentedPolicy, LowRankModel, RewardModel, START_STATE};
use crate::error::{Error, Result};
use crate::explore::{spd_factor, BonusTable};
use crate::risk::BudgetGrid;
use crate::rng::{stream, Categorical};

/// Parameters of one planner call.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LsviConfig {
    pub lambda: f64,
    pub beta: f64,
    pub t1: usize,
    pub t2: usize,
    /// Record per-iteration optimistic values and weight norms.
    #[serde(default)]
    pub instrument: bool,
}

impl LsviConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::ConfigInvalid(format!("lambda must be positive, got {}", self.lambda)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::ConfigInvalid(format!("beta must be nonnegative, got {}", self.beta)));
        }
        if self.t1 == 0 || self.t2 == 0 {
            return Err(Error::ConfigInvalid("T1 and T2 must be at least 1".into()));
        }
        Ok(())
    }

    /// Parameters from the planning guarantee with every hidden constant made
    /// explicit: `λ = 1`, `β = c_β H^{3/2} d ι^{1/4} / υ`,
    /// `T1 = c_T1 H⁵ d³ ι / (υ³ ε²)`, `T2 = c_T2 H² log(T1/δ) / ε²`, with
    /// `ι = log²(H d T1 / (υ δ))` evaluated after one fixed-point refinement.
    pub fn from_theory(t: &TheoryInputs) -> Result<Self> {
        if !(t.delta > 0.0 && t.delta < 1.0) || !(t.epsilon > 0.0) || !(t.upsilon > 0.0) {
            return Err(Error::ConfigInvalid("theory inputs need δ ∈ (0,1), ε > 0, υ > 0".into()));
        }
        let (h, d, u) = (t.horizon as f64, t.rank as f64, t.upsilon);
        let iota = |t1: f64| (h * d * t1 / (u * t.delta)).ln().max(1.0).powi(2);
        let t1_of = |i: f64| t.c_t1 * h.powi(5) * d.powi(3) * i / (u.powi(3) * t.epsilon * t.epsilon);
        let t1 = t1_of(iota(t1_of(iota(1.0)))).ceil().clamp(1.0, u32::MAX as f64);
        let i = iota(t1);
        let beta = t.c_beta * h.powf(1.5) * d * i.powf(0.25) / u;
        let t2 = (t.c_t2 * h * h * (t1 / t.delta).ln() / (t.epsilon * t.epsilon)).ceil().clamp(1.0, u32::MAX as f64);
        Ok(Self { lambda: 1.0, beta, t1: t1 as usize, t2: t2 as usize, instrument: false })
    }
}

/// Inputs to [`LsviConfig::from_theory`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TheoryInputs {
    pub horizon: usize,
    pub rank: usize,
    pub upsilon: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub c_beta: f64,
    pub c_t1: f64,
    pub c_t2: f64,
}

/// `a ⊗ b` with index `j·len(b) + i`.
pub fn tensor_feature(phi_hat: &[f64], reward_pmf: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(phi_hat.len() * reward_pmf.len());
    for &x in phi_hat {
        out.extend(reward_pmf.iter().map(|&y| x * y));
    }
    out
}

/// One simulated transition `(s, a, r index, s')`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BufferStep {
    pub s: usize,
    pub a: usize,
    pub r: usize,
    pub s_next: usize,
}

/// Simulated trajectories plus the per-step counts regression needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ReplayBuffer {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    levels: usize,
    trajectories: Vec<Vec<BufferStep>>,
    /// `[h][sa]`
    visits: Vec<u64>,
    /// `[h][sa][r][s']`
    outcomes: Vec<u64>,
}

impl ReplayBuffer {
    pub fn new(horizon: usize, num_states: usize, num_actions: usize, levels: usize) -> Self {
        let m = num_states * num_actions;
        Self {
            horizon,
            num_states,
            num_actions,
            levels,
            trajectories: Vec::new(),
            visits: vec![0; horizon * m],
            outcomes: vec![0; horizon * m * levels * num_states],
        }
    }

    pub fn push(&mut self, trajectory: Vec<BufferStep>) -> Result<()> {
        if trajectory.len() != self.horizon {
            return Err(Error::DimensionMismatch { expected: self.horizon, got: trajectory.len() });
        }
        let m = self.num_states * self.num_actions;
        for (h, st) in trajectory.iter().enumerate() {
            if st.s >= self.num_states
                || st.a >= self.num_actions
                || st.r >= self.levels
                || st.s_next >= self.num_states
            {
                return Err(Error::DimensionMismatch { expected: self.num_states, got: st.s.max(st.s_next) });
            }
            let sa = st.s * self.num_actions + st.a;
            self.visits[h * m + sa] += 1;
            self.outcomes[((h * m + sa) * self.levels + st.r) * self.num_states + st.s_next] += 1;
        }
        self.trajectories.push(trajectory);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn trajectories(&self) -> &[Vec<BufferStep>] {
        &self.trajectories
    }
}

/// `φ̄_h(s,a)` for every `(h,s,a)`, with the per-step kernel `G_h = F_h F_hᵀ`.
#[derive(Debug, Clone)]
pub struct TensorFeatures {
    dim: usize,
    /// Per step, `m × d̄`.
    features: Vec<DMatrix<f64>>,
    kernels: Vec<DMatrix<f64>>,
}

impl TensorFeatures {
    pub fn new(model: &LowRankModel, rewards: &RewardModel) -> Self {
        let (h_n, s_n, a_n) = (model.horizon(), model.num_states(), model.num_actions());
        let dim = model.rank() * rewards.levels();
        let mut features = Vec::with_capacity(h_n);
        let mut kernels = Vec::with_capacity(h_n);
        for h in 0..h_n {
            let mut f = DMatrix::<f64>::zeros(s_n * a_n, dim);
            for s in 0..s_n {
                for a in 0..a_n {
                    let v = tensor_feature(model.phi(h, s, a), rewards.pmf(h, s, a));
                    f.row_mut(s * a_n + a).copy_from_slice(&v);
                }
            }
            kernels.push(&f * f.transpose());
            features.push(f);
        }
        Self { dim, features, kernels }
    }

    /// `d̄ = d·(⌈1/υ⌉ + 1)`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn feature(&self, h: usize, sa: usize) -> Vec<f64> {
        self.features[h].row(sa).iter().copied().collect()
    }
}

/// `Λ = λI + Σ_j φ̄_j φ̄_jᵀ` over the step-`h` entries of the buffer.
pub fn gram_matrix(buffer: &ReplayBuffer, features: &TensorFeatures, h: usize, lambda: f64) -> DMatrix<f64> {
    let mut gram = DMatrix::<f64>::identity(features.dim, features.dim) * lambda;
    for traj in &buffer.trajectories {
        let st = traj[h];
        let v = DVector::from_vec(features.feature(h, st.s * buffer.num_actions + st.a));
        gram.ger(1.0, &v, &v, 1.0);
    }
    gram
}

/// Ridge regression `Λ⁻¹ Σ_j φ̄_j · V_{h+1}(s'_j, max(i − r_j, 0))` solved in
/// feature space. `v_next` is `[s][i]` over the budget grid.
pub fn ridge_weights(
    buffer: &ReplayBuffer,
    features: &TensorFeatures,
    v_next: &[f64],
    h: usize,
    i: usize,
    lambda: f64,
) -> Result<DVector<f64>> {
    let g = v_next.len() / buffer.num_states.max(1);
    let mut rhs = DVector::<f64>::zeros(features.dim);
    for traj in &buffer.trajectories {
        let st = traj[h];
        let y = v_next[st.s_next * g + i.saturating_sub(st.r)];
        rhs += DVector::from_vec(features.feature(h, st.s * buffer.num_actions + st.a)) * y;
    }
    let chol = spd_factor(gram_matrix(buffer, features, h, lambda))?;
    Ok(chol.solve(&rhs))
}

/// `Clip_{[−H,H]}(−b + φ̄ᵀw − β‖φ̄‖_{Λ⁻¹})`.
pub fn q_estimate(phi_bar: &[f64], w: &[f64], bonus: f64, beta: f64, gram: &Cholesky<f64, Dyn>, horizon: usize) -> f64 {
    let lin: f64 = phi_bar.iter().zip(w).map(|(x, y)| x * y).sum();
    let width = crate::explore::quadratic_form(gram, phi_bar).max(0.0).sqrt();
    let h = horizon as f64;
    (-bonus + lin - beta * width).clamp(-h, h)
}

/// Value and greedy tables from one backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LsviTables {
    /// `[h][s][i]` for `h` in `0..=H`.
    pub values: Vec<f64>,
    /// `[h][s][i]`
    pub greedy: Vec<usize>,
    /// Largest `‖w_h(i)‖ / (H·√(n·d̄/λ))` over `h, i`, when requested.
    pub weight_ratio: Option<f64>,
}

struct Planner<'a> {
    model: &'a LowRankModel,
    bonus: &'a BonusTable,
    grid: BudgetGrid,
    features: TensorFeatures,
    config: LsviConfig,
}

impl Planner<'_> {
    fn dims(&self) -> (usize, usize, usize, usize) {
        (self.model.horizon(), self.model.num_states(), self.model.num_actions(), self.grid.len())
    }

    fn backward(&self, buffer: &ReplayBuffer, with_weights: bool) -> Result<LsviTables> {
        let (h_n, s_n, a_n, g) = self.dims();
        let m = s_n * a_n;
        let levels = buffer.levels;
        let lambda = self.config.lambda;
        let clip = h_n as f64;
        let mut values = vec![0.0; (h_n + 1) * s_n * g];
        let mut greedy = vec![0; h_n * s_n * g];
        for s in 0..s_n {
            for i in 0..g {
                values[(h_n * s_n + s) * g + i] = self.grid.value(i);
            }
        }
        let mut weight_ratio: Option<f64> = with_weights.then_some(0.0);
        for h in (0..h_n).rev() {
            let next = &values[(h + 1) * s_n * g..(h + 2) * s_n * g];
            let mut targets = DMatrix::<f64>::zeros(m, g);
            for sa in 0..m {
                if buffer.visits[h * m + sa] == 0 {
                    continue;
                }
                for r in 0..levels {
                    for s2 in 0..s_n {
                        let c = buffer.outcomes[((h * m + sa) * levels + r) * s_n + s2];
                        if c == 0 {
                            continue;
                        }
                        let c = c as f64;
                        for i in 0..g {
                            targets[(sa, i)] += c * next[s2 * g + i.saturating_sub(r)];
                        }
                    }
                }
            }
            let kernel = &self.features.kernels[h];
            let sqrt_n = DVector::<f64>::from_iterator(m, (0..m).map(|sa| (buffer.visits[h * m + sa] as f64).sqrt()));
            let mut inner = kernel.clone();
            for r in 0..m {
                for c in 0..m {
                    inner[(r, c)] *= sqrt_n[r] * sqrt_n[c];
                }
                inner[(r, r)] += lambda;
            }
            let chol = spd_factor(inner)?;
            // correction = N^{½} K⁻¹ N^{½} G
            let mut scaled = kernel.clone();
            for r in 0..m {
                scaled.row_mut(r).scale_mut(sqrt_n[r]);
            }
            let mut correction = chol.solve(&scaled);
            for r in 0..m {
                correction.row_mut(r).scale_mut(sqrt_n[r]);
            }
            // residual = (I − N^{½} K⁻¹ N^{½} G) Y, so that F Λ⁻¹ Fᵀ Y = λ⁻¹ G · residual.
            let residual = &targets - &correction * &targets;
            let fitted = (kernel * &residual) / lambda;
            let projection = (kernel - kernel * &correction) / lambda;

            if let Some(ratio) = weight_ratio.as_mut() {
                let w = self.features.features[h].transpose() * &residual / lambda;
                let samples = (buffer.len() + 1) as f64;
                let bound = h_n as f64 * (samples * self.features.dim as f64 / lambda).sqrt();
                for i in 0..g {
                    *ratio = ratio.max(w.column(i).norm() / bound);
                }
            }

            let cur = (h * s_n) * g;
            for s in 0..s_n {
                for i in 0..g {
                    let mut best = f64::INFINITY;
                    let mut best_a = 0;
                    for a in 0..a_n {
                        let sa = s * a_n + a;
                        let width = projection[(sa, sa)].max(0.0).sqrt();
                        let q =
                            (-self.bonus.get(h, s, a) + fitted[(sa, i)] - self.config.beta * width).clamp(-clip, clip);
                        if q < best {
                            best = q;
                            best_a = a;
                        }
                    }
                    values[cur + s * g + i] = best;
                    greedy[cur + s * g + i] = best_a;
                }
            }
        }
        Ok(LsviTables { values, greedy, weight_ratio })
    }
}

/// Precomputed samplers for simulating inside a learned model.
struct Simulator {
    num_states: usize,
    num_actions: usize,
    transitions: Vec<Categorical>,
    rewards: Vec<Categorical>,
}

impl Simulator {
    fn new(model: &LowRankModel, rewards: &RewardModel) -> Self {
        let (h_n, s_n, a_n) = (model.horizon(), model.num_states(), model.num_actions());
        let mut transitions = Vec::with_capacity(h_n * s_n * a_n);
        let mut reward_samplers = Vec::with_capacity(h_n * s_n * a_n);
        for h in 0..h_n {
            for s in 0..s_n {
                for a in 0..a_n {
                    transitions.push(Categorical::new(model.transition_row(h, s, a)));
                    reward_samplers.push(Categorical::new(rewards.pmf(h, s, a)));
                }
            }
        }
        Self { num_states: s_n, num_actions: a_n, transitions, rewards: reward_samplers }
    }

    /// One episode of a deterministic grid policy `[h][s][i]` from `(s₁, i1)`.
    fn episode<G: Rng + ?Sized>(
        &self,
        greedy: &[usize],
        grid_len: usize,
        horizon: usize,
        i1: usize,
        rng: &mut G,
    ) -> Vec<BufferStep> {
        let mut s = START_STATE;
        let mut i = i1;
        let mut steps = Vec::with_capacity(horizon);
        for h in 0..horizon {
            let a = greedy[(h * self.num_states + s) * grid_len + i];
            let k = (h * self.num_states + s) * self.num_actions + a;
            let r = self.rewards[k].sample(rng);
            let s_next = self.transitions[k].sample(rng);
            steps.push(BufferStep { s, a, r, s_next });
            i = i.saturating_sub(r);
            s = s_next;
        }
        steps
    }
}

/// Output of [`cvar_lsvi`].
#[derive(Debug, Clone, PartialEq)]
pub struct LsviOutput {
    /// `min_t V̂^{π̃^t}_1(s₁, i₁υ)`.
    pub value: f64,
    pub policy: AugmentedPolicy,
    /// 1-based iteration whose policy was returned.
    pub best_iteration: usize,
    /// Monte-Carlo estimate of every iterate.
    pub estimates: Vec<f64>,
    /// `V^t_1(s₁, i₁υ)` per iteration (instrumented runs only).
    pub optimistic: Vec<f64>,
    /// Largest weight-norm ratio seen (instrumented runs only); ≤ 1 by the norm bound.
    pub weight_ratio: Option<f64>,
}

fn check_inputs(
    model: &LowRankModel,
    rewards: &RewardModel,
    bonus: &BonusTable,
    grid: &BudgetGrid,
) -> Result<RewardModel> {
    if model.horizon() != grid.horizon() {
        return Err(Error::GridMismatch("grid horizon differs from the model".into()));
    }
    if rewards.pmf_table().len() != model.horizon() * model.num_states() * model.num_actions() * rewards.levels() {
        return Err(Error::InvalidModel("reward model does not match the transition model".into()));
    }
    bonus.check_dims(model)?;
    rewards.on_grid(grid)
}

/// Runs the planner from budget index `i1` inside the learned model.
pub fn cvar_lsvi<G: Rng + ?Sized>(
    model_hat: &LowRankModel,
    rewards_disc: &RewardModel,
    bonus: &BonusTable,
    i1: usize,
    grid: &BudgetGrid,
    config: &LsviConfig,
    rng: &mut G,
) -> Result<LsviOutput> {
    config.validate()?;
    let rewards = check_inputs(model_hat, rewards_disc, bonus, grid)?;
    if i1 >= grid.len() {
        return Err(Error::ConfigInvalid(format!("initial budget index {i1} outside the grid")));
    }
    let planner = Planner {
        model: model_hat,
        bonus,
        grid: *grid,
        features: TensorFeatures::new(model_hat, &rewards),
        config: *config,
    };
    let (h_n, s_n, _, g) = planner.dims();
    let sim = Simulator::new(model_hat, &rewards);
    let eval_root: u64 = rng.random();
    let mut buffer = ReplayBuffer::new(h_n, s_n, model_hat.num_actions(), rewards.levels());

    let mut estimates = Vec::with_capacity(config.t1);
    let mut optimistic = Vec::new();
    let mut weight_ratio = config.instrument.then_some(0.0f64);
    let mut best: Option<(f64, usize, Vec<usize>)> = None;
    for t in 0..config.t1 {
        let tables = planner.backward(&buffer, config.instrument)?;
        if config.instrument {
            optimistic.push(tables.values[START_STATE * g + i1]);
            if let (Some(r), Some(x)) = (weight_ratio.as_mut(), tables.weight_ratio) {
                *r = r.max(x);
            }
        }
        let trajectory = sim.episode(&tables.greedy, g, h_n, i1, rng);
        buffer.push(trajectory)?;

        let mut eval_rng = stream(eval_root, &[t as u64]);
        let estimate = evaluate_greedy(&sim, &tables.greedy, bonus, grid, h_n, i1, config.t2, &mut eval_rng);
        estimates.push(estimate);
        if best.as_ref().is_none_or(|(v, _, _)| estimate < *v) {
            best = Some((estimate, t, tables.greedy));
        }
    }
    let (value, t_best, greedy) = best.expect("T1 ≥ 1");
    let policy = AugmentedPolicy::from_actions(*grid, s_n, model_hat.num_actions(), &greedy)?;
    Ok(LsviOutput { value, policy, best_iteration: t_best + 1, estimates, optimistic, weight_ratio })
}

#[allow(clippy::too_many_arguments)]
fn evaluate_greedy<G: Rng + ?Sized>(
    sim: &Simulator,
    greedy: &[usize],
    bonus: &BonusTable,
    grid: &BudgetGrid,
    horizon: usize,
    i1: usize,
    episodes: usize,
    rng: &mut G,
) -> f64 {
    let g = grid.len();
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut spent = 0usize;
        let mut bonus_sum = 0.0;
        let mut s = START_STATE;
        for h in 0..horizon {
            let a = greedy[(h * sim.num_states + s) * g + i1.saturating_sub(spent)];
            let k = (h * sim.num_states + s) * sim.num_actions + a;
            spent += sim.rewards[k].sample(rng);
            bonus_sum += bonus.get(h, s, a);
            s = sim.transitions[k].sample(rng);
        }
        total += grid.value(i1.saturating_sub(spent)) - bonus_sum;
    }
    total / episodes as f64
}

/// `(1/T2) Σ_j [(i₁υ − Σ_h r_h)^+ − Σ_h b_h]` over simulated episodes of `policy`.
pub fn policy_eval_mc<G: Rng + ?Sized>(
    model_hat: &LowRankModel,
    rewards_disc: &RewardModel,
    bonus: &BonusTable,
    policy: &AugmentedPolicy,
    i1: usize,
    t2: usize,
    rng: &mut G,
) -> Result<f64> {
    if t2 == 0 {
        return Err(Error::ConfigInvalid("T2 must be at least 1".into()));
    }
    let grid = *policy.grid();
    let rewards = check_inputs(model_hat, rewards_disc, bonus, &grid)?;
    policy.check_dims(model_hat.num_states(), model_hat.num_actions(), model_hat.horizon())?;
    if i1 >= grid.len() {
        return Err(Error::ConfigInvalid(format!("initial budget index {i1} outside the grid")));
    }
    let sim = Simulator::new(model_hat, &rewards);
    let actions: Vec<Categorical> = policy.table().chunks(model_hat.num_actions()).map(Categorical::new).collect();
    let (h_n, s_n, g) = (model_hat.horizon(), model_hat.num_states(), grid.len());
    let mut total = 0.0;
    for _ in 0..t2 {
        let mut spent = 0usize;
        let mut bonus_sum = 0.0;
        let mut s = START_STATE;
        for h in 0..h_n {
            let a = actions[(h * s_n + s) * g + i1.saturating_sub(spent)].sample(rng);
            let k = (h * s_n + s) * sim.num_actions + a;
            spent += sim.rewards[k].sample(rng);
            bonus_sum += bonus.get(h, s, a);
            s = sim.transitions[k].sample(rng);
        }
        total += grid.value(i1.saturating_sub(spent)) - bonus_sum;
    }
    Ok(total / t2 as f64)
}

/// One backward pass over an explicit buffer, exposed for diagnostics.
pub fn lsvi_backward(
    model_hat: &LowRankModel,
    rewards_disc: &RewardModel,
    bonus: &BonusTable,
    grid: &BudgetGrid,
    config: &LsviConfig,
    buffer: &ReplayBuffer,
) -> Result<LsviTables> {
    config.validate()?;
    let rewards = check_inputs(model_hat, rewards_disc, bonus, grid)?;
    let planner = Planner {
        model: model_hat,
        bonus,
        grid: *grid,
        features: TensorFeatures::new(model_hat, &rewards),
        config: *config,
    };
    planner.backward(buffer, true)
}
