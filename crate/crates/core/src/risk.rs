//! The CVaR functional and the budget grid shared by every planner.
//!
//! Budgets and rewards are handled as integer grid indices wherever possible:
//! a value `c` maps to index `i` with `c ≈ i·υ`, and all comparisons happen
//! on `i`. Conversions from floats go through a `1e-9` snap tolerance so that
//! values sitting on the grid are fixed points.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Snap tolerance for float → grid index conversions.
pub const SNAP: f64 = 1e-9;

/// Largest grid we agree to build; keeps malformed configs from allocating.
const MAX_GRID_INDEX: usize = 1 << 20;

/// Budget grid `{iυ : 0 ≤ i ≤ ⌈H/υ⌉}` plus the reward grid `{iυ : 0 ≤ i ≤ ⌈1/υ⌉}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GridRepr")]
pub struct BudgetGrid {
    upsilon: f64,
    horizon: usize,
    max_index: usize,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GridRepr {
    upsilon: f64,
    horizon: usize,
    max_index: usize,
}

impl TryFrom<GridRepr> for BudgetGrid {
    type Error = Error;

    fn try_from(r: GridRepr) -> Result<Self> {
        let grid = BudgetGrid::new(r.upsilon, r.horizon)?;
        if grid.max_index != r.max_index {
            return Err(Error::Parse(format!("max_index {} does not match upsilon and horizon", r.max_index)));
        }
        Ok(grid)
    }
}

impl BudgetGrid {
    pub fn new(upsilon: f64, horizon: usize) -> Result<Self> {
        if !(upsilon.is_finite() && upsilon > 0.0) {
            return Err(Error::ConfigInvalid(format!("precision must be positive, got {upsilon}")));
        }
        if horizon == 0 {
            return Err(Error::ConfigInvalid("horizon must be positive".into()));
        }
        let raw = (horizon as f64 / upsilon - SNAP).ceil();
        if !(raw.is_finite() && raw <= MAX_GRID_INDEX as f64) {
            return Err(Error::ConfigInvalid(format!(
                "precision {upsilon} gives a budget grid larger than {MAX_GRID_INDEX}"
            )));
        }
        Ok(Self { upsilon, horizon, max_index: raw.max(0.0) as usize })
    }

    pub fn upsilon(&self) -> f64 {
        self.upsilon
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    /// `⌈H/υ⌉`.
    pub fn max_index(&self) -> usize {
        self.max_index
    }

    /// Number of budget grid points, `⌈H/υ⌉ + 1`.
    pub fn len(&self) -> usize {
        self.max_index + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Number of reward levels, `⌈1/υ⌉ + 1`.
    pub fn reward_levels(&self) -> usize {
        reward_levels(self.upsilon)
    }

    pub fn value(&self, i: usize) -> f64 {
        i as f64 * self.upsilon
    }

    pub fn max_value(&self) -> f64 {
        self.value(self.max_index)
    }

    pub fn values(&self) -> Vec<f64> {
        (0..=self.max_index).map(|i| self.value(i)).collect()
    }

    /// Grid index for a raw budget: round half up, then clamp to `[0, ⌈H/υ⌉]`.
    pub fn index_of(&self, budget: f64) -> usize {
        let x = (budget / self.upsilon + 0.5 + SNAP).floor();
        if x.is_nan() || x <= 0.0 {
            0
        } else if x >= self.max_index as f64 {
            self.max_index
        } else {
            x as usize
        }
    }

    /// Exact grid index if `value` lies on the grid (within the snap tolerance).
    pub fn on_grid_index(&self, value: f64) -> Option<usize> {
        let x = value / self.upsilon;
        let r = x.round();
        if r >= 0.0 && (x - r).abs() <= 1e-6 && r.is_finite() {
            Some(r as usize)
        } else {
            None
        }
    }

    /// Reward grid index of `U(r) = ⌈r/υ⌉υ`.
    pub fn reward_index(&self, r: f64) -> usize {
        reward_index(r, self.upsilon)
    }

    /// `U(r) = ⌈r/υ⌉υ`, the reward rounded up to the grid.
    pub fn discretize_reward(&self, r: f64) -> f64 {
        self.value(self.reward_index(r))
    }
}

pub(crate) fn reward_levels(upsilon: f64) -> usize {
    (1.0 / upsilon - SNAP).ceil().max(0.0) as usize + 1
}

pub(crate) fn reward_index(r: f64, upsilon: f64) -> usize {
    let i = (r / upsilon - SNAP).ceil();
    if i.is_nan() || i <= 0.0 {
        0
    } else {
        i as usize
    }
}

/// `U(r) = ⌈r/υ − 1e-9⌉·υ`. On-grid rewards are fixed points.
pub fn discretize_reward(r: f64, grid: &BudgetGrid) -> f64 {
    grid.discretize_reward(r)
}

/// A finitely supported return distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReturnDistribution {
    support: Vec<f64>,
    probs: Vec<f64>,
}

impl ReturnDistribution {
    /// Builds a distribution from `(value, probability)` atoms. Atoms closer
    /// than `1e-9` are merged and the support is sorted ascending.
    pub fn from_atoms(atoms: impl IntoIterator<Item = (f64, f64)>) -> Result<Self> {
        let mut atoms: Vec<(f64, f64)> = atoms.into_iter().filter(|&(_, p)| p > 0.0).collect();
        if atoms.iter().any(|&(v, p)| !v.is_finite() || !p.is_finite()) {
            return Err(Error::InvalidModel("non-finite return atom".into()));
        }
        atoms.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut support: Vec<f64> = Vec::with_capacity(atoms.len());
        let mut probs: Vec<f64> = Vec::with_capacity(atoms.len());
        for (v, p) in atoms {
            match support.last() {
                Some(&last) if (v - last).abs() < SNAP => *probs.last_mut().unwrap() += p,
                _ => {
                    support.push(v);
                    probs.push(p);
                }
            }
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidModel(format!("return probabilities sum to {total}")));
        }
        Ok(Self { support, probs })
    }

    pub fn point_mass(v: f64) -> Self {
        Self { support: vec![v], probs: vec![1.0] }
    }

    pub fn support(&self) -> &[f64] {
        &self.support
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn mean(&self) -> f64 {
        self.support.iter().zip(&self.probs).map(|(v, p)| v * p).sum()
    }

    /// `E[(c − X)^+]`.
    pub fn expected_shortfall(&self, c: f64) -> f64 {
        self.support.iter().zip(&self.probs).map(|(&v, &p)| p * (c - v).max(0.0)).sum()
    }

    /// Same distribution shifted by a constant.
    pub fn shifted(&self, a: f64) -> Self {
        Self { support: self.support.iter().map(|v| v + a).collect(), probs: self.probs.clone() }
    }
}

pub(crate) fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidTau(tau))
    }
}

/// `sup_c { c − τ⁻¹ E[(c − X)^+] }`.
///
/// The objective is concave and piecewise linear in `c` with kinks only at
/// support points, so scanning the support is exact. Ties keep the smallest `c`.
pub fn cvar_of_distribution(dist: &ReturnDistribution, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(cvar_with_var(dist, tau).1)
}

/// Returns `(VaR, CVaR)`: the maximizing support point and the objective there.
///
/// At `τ = 1` the supremum sits at the largest support point and equals the
/// mean; that case returns the mean directly so the identity holds bit-for-bit.
pub fn cvar_with_var(dist: &ReturnDistribution, tau: f64) -> (f64, f64) {
    if tau == 1.0 {
        return (*dist.support.last().expect("distributions are nonempty"), dist.mean());
    }
    let mut best = (f64::NAN, f64::NEG_INFINITY);
    for &c in &dist.support {
        let value = c - dist.expected_shortfall(c) / tau;
        if value > best.1 {
            best = (c, value);
        }
    }
    best
}

/// Plug-in CVaR estimate: `ĉ = x_(⌈τn⌉)` and `ĉ − (nτ)⁻¹ Σ (ĉ − xᵢ)^+`.
pub fn empirical_cvar(samples: &[f64], tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    let n = samples.len();
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let m = ((tau * n as f64 - SNAP).ceil() as usize).clamp(1, n);
    let c_hat = sorted[m - 1];
    let shortfall: f64 = sorted.iter().map(|&x| (c_hat - x).max(0.0)).sum();
    Ok(c_hat - shortfall / (n as f64 * tau))
}

/// `argmax_i { iυ − v1(i)/τ }` over the budget grid, smallest index on ties.
pub fn cvar_objective_from_values(v1: &[f64], tau: f64, grid: &BudgetGrid) -> Result<(usize, f64)> {
    check_tau(tau)?;
    if v1.len() != grid.len() {
        return Err(Error::DimensionMismatch { expected: grid.len(), got: v1.len() });
    }
    let mut best = (0, f64::NEG_INFINITY);
    for (i, &v) in v1.iter().enumerate() {
        let obj = grid.value(i) - v / tau;
        if obj > best.1 {
            best = (i, obj);
        }
    }
    Ok(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_point() -> ReturnDistribution {
        ReturnDistribution::from_atoms([(0.0, 0.5), (1.0, 0.5)]).unwrap()
    }

    #[test]
    fn grid_shape() {
        let g = BudgetGrid::new(0.1, 3).unwrap();
        assert_eq!(g.max_index(), 30);
        assert_eq!(g.reward_levels(), 11);
        assert!(g.max_value() >= 3.0);
        let g = BudgetGrid::new(0.4, 3).unwrap();
        assert_eq!(g.max_index(), 8);
        assert_eq!(g.reward_levels(), 4);
        assert!(BudgetGrid::new(0.0, 3).is_err());
        assert!(BudgetGrid::new(f64::NAN, 3).is_err());
        assert!(BudgetGrid::new(1e-12, 3).is_err());
    }

    #[test]
    fn index_rounding_and_clamping() {
        let g = BudgetGrid::new(0.1, 1).unwrap();
        assert_eq!(g.index_of(0.3), 3);
        assert_eq!(g.index_of(0.7), 7);
        assert_eq!(g.index_of(0.25), 3);
        assert_eq!(g.index_of(0.24), 2);
        assert_eq!(g.index_of(-0.4), 0);
        assert_eq!(g.index_of(5.0), 10);
    }

    #[test]
    fn discretize_reward_examples() {
        let g = BudgetGrid::new(0.1, 1).unwrap();
        assert_eq!(discretize_reward(0.0, &g), 0.0);
        assert_eq!(g.reward_index(0.3), 3);
        assert!((discretize_reward(0.3, &g) - 0.3).abs() < 1e-12);
        assert!((discretize_reward(0.23, &g) - 0.3).abs() < 1e-12);
        assert_eq!(g.reward_index(1.0), 10);
    }

    #[test]
    fn cvar_examples() {
        let d = two_point();
        assert_eq!(cvar_of_distribution(&d, 1.0).unwrap(), 0.5);
        assert_eq!(cvar_of_distribution(&d, 0.5).unwrap(), 0.0);
        let p = ReturnDistribution::point_mass(0.7);
        for tau in [0.05, 0.3, 1.0] {
            assert!((cvar_of_distribution(&p, tau).unwrap() - 0.7).abs() < 1e-15);
        }
        assert!(matches!(cvar_of_distribution(&d, 0.0), Err(Error::InvalidTau(_))));
        assert!(matches!(cvar_of_distribution(&d, 1.5), Err(Error::InvalidTau(_))));
    }

    #[test]
    fn cvar_matches_sweep_over_dense_c() {
        // Independent check: brute-force sweep of c on a fine grid.
        let d = ReturnDistribution::from_atoms([(0.2, 0.3), (1.1, 0.5), (2.4, 0.2)]).unwrap();
        for tau in [0.1, 0.25, 0.5, 0.8] {
            let mut best = f64::NEG_INFINITY;
            for k in 0..=30_000 {
                let c = k as f64 * 1e-4;
                best = best.max(c - d.expected_shortfall(c) / tau);
            }
            let exact = cvar_of_distribution(&d, tau).unwrap();
            assert!((exact - best).abs() < 1e-9, "tau={tau}: {exact} vs {best}");
        }
    }

    #[test]
    fn empirical_examples() {
        assert_eq!(empirical_cvar(&[0.4; 7], 0.3).unwrap(), 0.4);
        assert_eq!(empirical_cvar(&[0.0, 1.0], 0.5).unwrap(), 0.0);
        let xs = [0.3, 0.9, 0.1, 0.5];
        let mean = xs.iter().sum::<f64>() / 4.0;
        assert!((empirical_cvar(&xs, 1.0).unwrap() - mean).abs() < 1e-15);
        assert!(matches!(empirical_cvar(&[], 0.5), Err(Error::EmptySamples)));
    }

    #[test]
    fn objective_from_values() {
        let g = BudgetGrid::new(0.1, 1).unwrap();
        let zeros = vec![0.0; g.len()];
        let (i, v) = cvar_objective_from_values(&zeros, 0.5, &g).unwrap();
        assert_eq!(i, 10);
        assert!((v - 1.0).abs() < 1e-12);

        let v1: Vec<f64> = g.values().iter().map(|c| (c - 0.5).max(0.0)).collect();
        let (i, v) = cvar_objective_from_values(&v1, 0.5, &g).unwrap();
        assert_eq!(i, 5);
        assert!((v - 0.5).abs() < 1e-12);

        let v1 = vec![0.0, 0.1, 0.2];
        let g2 = BudgetGrid::new(0.5, 1).unwrap();
        let (i, _) = cvar_objective_from_values(&v1, 1.0, &g2).unwrap();
        assert_eq!(i, 2);
        let tied = vec![0.0, 0.5, 1.0];
        let (i, v) = cvar_objective_from_values(&tied, 1.0, &g2).unwrap();
        assert_eq!((i, v), (0, 0.0));
    }

    #[test]
    fn distribution_merges_close_atoms() {
        let d = ReturnDistribution::from_atoms([(0.3, 0.25), (0.1 + 0.2, 0.25), (1.0, 0.5)]).unwrap();
        assert_eq!(d.support().len(), 2);
        assert!(ReturnDistribution::from_atoms([(0.3, 0.4)]).is_err());
    }
}
