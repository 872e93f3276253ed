//! Parameter schedules, regularized feature covariances and exploration bonuses.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::env::LowRankModel;
use crate::error::{Error, Result};
use crate::learn::{Bag, TransitionDataset};

/// Largest bonus value; bonuses are capped here.
pub const BONUS_CAP: f64 = 2.0;

/// Inputs of the bonus schedule beyond the iteration count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScheduleInputs {
    pub horizon: usize,
    pub num_actions: usize,
    pub rank: usize,
    pub class_size: usize,
    pub delta: f64,
    pub c_alpha: f64,
    pub c_lambda: f64,
}

/// `(α^k, λ^k)` with `α = c_α·√(H²(A+d²)·log(|F|Hk/δ))` and `λ = c_λ·d·log(|F|Hk/δ)`.
pub fn schedule_params(k: usize, p: &ScheduleInputs) -> Result<(f64, f64)> {
    if k == 0 {
        return Err(Error::ConfigInvalid("iteration count starts at 1".into()));
    }
    if !(p.delta > 0.0 && p.delta < 1.0) {
        return Err(Error::ConfigInvalid(format!("delta {} outside (0, 1)", p.delta)));
    }
    if !(p.c_alpha >= 0.0 && p.c_lambda > 0.0) {
        return Err(Error::ConfigInvalid("c_alpha must be ≥ 0 and c_lambda > 0".into()));
    }
    let log_term = (p.class_size as f64 * p.horizon as f64 * k as f64 / p.delta).ln();
    let h = p.horizon as f64;
    let d = p.rank as f64;
    let alpha = p.c_alpha * (h * h * (p.num_actions as f64 + d * d) * log_term).sqrt();
    let lambda = p.c_lambda * d * log_term;
    Ok((alpha, lambda))
}

/// `Σ φφᵀ + λI` over the given features.
pub fn update_covariance<'a>(features: impl IntoIterator<Item = &'a [f64]>, dim: usize, lambda: f64) -> DMatrix<f64> {
    let mut sigma = DMatrix::<f64>::identity(dim, dim) * lambda;
    for phi in features {
        let v = DVector::from_column_slice(phi);
        sigma.ger(1.0, &v, &v, 1.0);
    }
    sigma
}

/// Cholesky factor of an SPD matrix, or [`Error::SingularMatrix`].
pub fn spd_factor(m: DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    Cholesky::new(m).ok_or(Error::SingularMatrix)
}

/// `φᵀ M⁻¹ φ` through a Cholesky factor `M = LLᵀ`.
pub fn quadratic_form(chol: &Cholesky<f64, Dyn>, phi: &[f64]) -> f64 {
    let mut v = DVector::from_column_slice(phi);
    chol.l_dirty().solve_lower_triangular_mut(&mut v);
    v.norm_squared()
}

/// `min(α·‖φ‖_{Σ̂⁻¹}, 2)` for steps with a following transition to explore,
/// zero for the last two steps. `h` is 0-based.
pub fn bonus(phi: &[f64], sigma: &Cholesky<f64, Dyn>, alpha: f64, h: usize, horizon: usize) -> f64 {
    if h + 2 >= horizon || alpha == 0.0 {
        return 0.0;
    }
    (alpha * quadratic_form(sigma, phi).sqrt()).min(BONUS_CAP)
}

/// Bonus values tabulated over `(h, s, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BonusTable {
    horizon: usize,
    num_states: usize,
    num_actions: usize,
    values: Vec<f64>,
}

impl BonusTable {
    pub fn zero(horizon: usize, num_states: usize, num_actions: usize) -> Self {
        Self { horizon, num_states, num_actions, values: vec![0.0; horizon * num_states * num_actions] }
    }

    pub fn from_values(horizon: usize, num_states: usize, num_actions: usize, values: Vec<f64>) -> Result<Self> {
        let expected = horizon * num_states * num_actions;
        if values.len() != expected {
            return Err(Error::DimensionMismatch { expected, got: values.len() });
        }
        if values.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidModel("non-finite bonus".into()));
        }
        Ok(Self { horizon, num_states, num_actions, values })
    }

    #[inline]
    pub fn get(&self, h: usize, s: usize, a: usize) -> f64 {
        self.values[(h * self.num_states + s) * self.num_actions + a]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&b| b == 0.0)
    }

    pub(crate) fn check_dims(&self, model: &LowRankModel) -> Result<()> {
        if self.horizon != model.horizon()
            || self.num_states != model.num_states()
            || self.num_actions != model.num_actions()
        {
            return Err(Error::DimensionMismatch { expected: model.horizon(), got: self.horizon });
        }
        Ok(())
    }
}

/// Per-step covariances of the learned features and the schedule that produced them.
#[derive(Debug, Clone)]
pub struct BonusState {
    pub alpha: f64,
    pub lambda: f64,
    pub k: usize,
    sigma: Vec<DMatrix<f64>>,
    factors: Vec<Cholesky<f64, Dyn>>,
}

impl BonusState {
    /// Builds `Σ̂_h = Σ_{(s,a)∈D_h} φ̂_h(s,a)φ̂_h(s,a)ᵀ + λI` for every step.
    pub fn build(
        learned: &LowRankModel,
        dataset: &TransitionDataset,
        alpha: f64,
        lambda: f64,
        k: usize,
    ) -> Result<Self> {
        if dataset.horizon() != learned.horizon() {
            return Err(Error::DimensionMismatch { expected: learned.horizon(), got: dataset.horizon() });
        }
        if !(lambda > 0.0) {
            return Err(Error::SingularMatrix);
        }
        let d = learned.rank();
        let mut sigma = Vec::with_capacity(learned.horizon());
        let mut factors = Vec::with_capacity(learned.horizon());
        for h in 0..learned.horizon() {
            let feats = dataset.bag(Bag::D, h).iter().map(|t| learned.phi(h, t.s, t.a));
            let m = update_covariance(feats, d, lambda);
            factors.push(spd_factor(m.clone())?);
            sigma.push(m);
        }
        Ok(Self { alpha, lambda, k, sigma, factors })
    }

    pub fn sigma(&self, h: usize) -> &DMatrix<f64> {
        &self.sigma[h]
    }

    pub fn value(&self, learned: &LowRankModel, h: usize, s: usize, a: usize) -> f64 {
        bonus(learned.phi(h, s, a), &self.factors[h], self.alpha, h, learned.horizon())
    }

    pub fn table(&self, learned: &LowRankModel) -> BonusTable {
        let (h_n, s_n, a_n) = (learned.horizon(), learned.num_states(), learned.num_actions());
        let mut values = Vec::with_capacity(h_n * s_n * a_n);
        for h in 0..h_n {
            for s in 0..s_n {
                for a in 0..a_n {
                    values.push(self.value(learned, h, s, a));
                }
            }
        }
        BonusTable { horizon: h_n, num_states: s_n, num_actions: a_n, values }
    }
}

fn check_stream(stream: &[Vec<f64>], dim: usize) -> Result<()> {
    match stream.iter().find(|v| v.len() != dim) {
        Some(v) => Err(Error::DimensionMismatch { expected: dim, got: v.len() }),
        None => Ok(()),
    }
}

/// `Σ_{j≤t} φ_jᵀ Λ_t⁻¹ φ_j` with `Λ_t = λI + Σ_{j≤t} φ_jφ_jᵀ`.
pub fn eigen_sum(stream: &[Vec<f64>], dim: usize, lambda: f64) -> Result<f64> {
    check_stream(stream, dim)?;
    let chol = spd_factor(update_covariance(stream.iter().map(|v| v.as_slice()), dim, lambda))?;
    Ok(stream.iter().map(|phi| quadratic_form(&chol, phi)).sum())
}

/// Returns `(Σ_j φ_jᵀ Λ_{j−1}⁻¹ φ_j, 2·log(det Λ_t / det Λ_0))` with `Λ_0 = λI`.
pub fn elliptical_potential(stream: &[Vec<f64>], dim: usize, lambda: f64) -> Result<(f64, f64)> {
    check_stream(stream, dim)?;
    let mut gram = DMatrix::<f64>::identity(dim, dim) * lambda;
    let mut total = 0.0;
    for phi in stream {
        let chol = spd_factor(gram.clone())?;
        total += quadratic_form(&chol, phi);
        let v = DVector::from_column_slice(phi);
        gram.ger(1.0, &v, &v, 1.0);
    }
    let chol = spd_factor(gram)?;
    let log_det: f64 = chol.l_dirty().diagonal().iter().map(|x| 2.0 * x.ln()).sum();
    let log_det0 = dim as f64 * lambda.ln();
    Ok((total, 2.0 * (log_det - log_det0)))
}
