//! Per-class logit margins.
//!
//! The spread-proportional schedule sets `γ_y ∝ α_y^{1/3}` where `α_y` is the
//! class's average squared feature norm, rescaled so that `mean(γ) = c̄`. This
//! is the minimizer of `Σ_k α_k / γ_k²` subject to `Σ_k γ_k = c̄·K`.
//!
//! The prior-based Δ-margin family (LDAM, EQL, Balanced Softmax, Logit
//! Adjustment) lives here as well, for baseline comparisons.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, input_err, Error, Result};
use crate::feature_stats::ClassStats;
use crate::linalg::Matrix;

/// Added to every `α_k` when some, but not all, are zero so that each `γ_k > 0`.
pub const ALPHA_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MarginVector {
    gamma: Vec<f64>,
    budget: f64,
    p: f64,
}

impl MarginVector {
    /// Every class gets `γ_k = c̄`.
    pub fn uniform(num_classes: usize, budget: f64) -> Result<Self> {
        validate_budget(budget)?;
        ensure_input!(num_classes >= 1, "need at least one class");
        Ok(Self { gamma: vec![budget; num_classes], budget, p: 2.0 })
    }

    /// Wraps an explicit vector; the budget becomes its mean.
    pub fn from_values(gamma: Vec<f64>) -> Result<Self> {
        ensure_input!(!gamma.is_empty(), "empty margin vector");
        ensure_input!(gamma.iter().all(|g| g.is_finite() && *g > 0.0), "margins must be positive and finite");
        let budget = gamma.iter().sum::<f64>() / gamma.len() as f64;
        Ok(Self { gamma, budget, p: 2.0 })
    }

    pub fn gamma(&self) -> &[f64] {
        &self.gamma
    }
    pub fn budget(&self) -> f64 {
        self.budget
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn len(&self) -> usize {
        self.gamma.len()
    }
    pub fn is_empty(&self) -> bool {
        self.gamma.is_empty()
    }
}

impl std::ops::Index<usize> for MarginVector {
    type Output = f64;
    fn index(&self, k: usize) -> &f64 {
        &self.gamma[k]
    }
}

fn validate_budget(budget: f64) -> Result<()> {
    ensure_input!(budget.is_finite() && budget > 0.0, "margin budget c_bar must be positive, got {budget}");
    Ok(())
}

fn cube_root_schedule(spread: &[f64], budget: f64, p: f64) -> Result<MarginVector> {
    validate_budget(budget)?;
    ensure_input!(!spread.is_empty(), "need at least one class");
    if let Some(bad) = spread.iter().find(|a| !(a.is_finite() && **a >= 0.0)) {
        return Err(input_err!("class spread values must be finite and non-negative, got {bad}"));
    }
    let k = spread.len();
    if spread.iter().all(|&a| a == 0.0) {
        return Ok(MarginVector { gamma: vec![budget; k], budget, p });
    }
    let floor = if spread.contains(&0.0) { ALPHA_FLOOR } else { 0.0 };
    let roots: Vec<f64> = spread.iter().map(|&a| (a + floor).cbrt()).collect();
    let total: f64 = roots.iter().sum();
    let scale = budget * k as f64 / total;
    let gamma = roots.iter().map(|r| r * scale).collect();
    Ok(MarginVector { gamma, budget, p })
}

/// `γ_y = c̄·K·α_y^{1/3} / Σ_k α_k^{1/3}` with `α_k = ‖μ̂_k‖² + ‖ŝ_k‖²`.
pub fn compute_gamma(alpha: &[f64], budget: f64) -> Result<MarginVector> {
    cube_root_schedule(alpha, budget, 2.0)
}

/// Same schedule driven by the average squared L_p feature norms `r²_{k,p}`.
pub fn compute_gamma_lp(r_sq_p: &[f64], budget: f64, p: f64) -> Result<MarginVector> {
    crate::feature_stats::validate_p(p)?;
    cube_root_schedule(r_sq_p, budget, p)
}

/// Margins from tracked statistics. Uses `α` for `p = 2` and `r²_{k,p}` otherwise.
///
/// Classes not yet observed receive `c̄`; the observed ones share the remaining
/// budget through the cube-root rule, so the overall mean stays `c̄`.
pub fn gamma_from_stats(stats: &ClassStats, budget: f64) -> Result<MarginVector> {
    validate_budget(budget)?;
    let p = stats.p();
    let spread = if p == 2.0 { stats.alpha() } else { stats.r_sq_p().to_vec() };
    let seen: Vec<usize> = (0..stats.num_classes()).filter(|&k| stats.initialized()[k]).collect();
    if seen.len() == stats.num_classes() {
        return cube_root_schedule(&spread, budget, p);
    }
    let mut gamma = vec![budget; stats.num_classes()];
    if !seen.is_empty() {
        let sub: Vec<f64> = seen.iter().map(|&k| spread[k]).collect();
        let partial = cube_root_schedule(&sub, budget, p)?;
        for (&k, &g) in seen.iter().zip(partial.gamma()) {
            gamma[k] = g;
        }
    }
    Ok(MarginVector { gamma, budget, p })
}

/// `Σ_k α_k / γ_k²`, the quantity the schedule minimizes.
pub fn complexity_value(alpha: &[f64], gamma: &[f64]) -> f64 {
    alpha.iter().zip(gamma).map(|(a, g)| a / (g * g)).sum()
}

/// Prior-based additive margin families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeltaKind {
    /// `Δ_{yy'} = P(y)^{-1/4}`
    Ldam,
    /// `Δ_{yy'} = P(y')`
    Eql,
    /// `Δ_{yy'} = ln(P(y')/P(y))`
    BalancedSoftmax,
    /// `Δ_{yy'} = τ·ln(P(y')/P(y))`
    LogitAdjustment,
}

impl DeltaKind {
    pub const ALL: [DeltaKind; 4] = [DeltaKind::Ldam, DeltaKind::Eql, DeltaKind::BalancedSoftmax, DeltaKind::LogitAdjustment];

    pub fn name(self) -> &'static str {
        match self {
            DeltaKind::Ldam => "ldam",
            DeltaKind::Eql => "eql",
            DeltaKind::BalancedSoftmax => "balanced_softmax",
            DeltaKind::LogitAdjustment => "logit_adjustment",
        }
    }
}

impl std::str::FromStr for DeltaKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        DeltaKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| input_err!("unknown delta-margin kind {s:?}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DeltaMargins {
    pub kind: DeltaKind,
    pub priors: Vec<f64>,
    /// Only read by [`DeltaKind::LogitAdjustment`].
    pub tau: f64,
}

impl DeltaMargins {
    pub fn new(kind: DeltaKind, priors: Vec<f64>, tau: f64) -> Result<Self> {
        ensure_input!(!priors.is_empty(), "empty prior vector");
        ensure_input!(priors.iter().all(|p| p.is_finite() && *p >= 0.0), "priors must be non-negative");
        let total: f64 = priors.iter().sum();
        ensure_input!((total - 1.0).abs() <= 1e-12, "priors must sum to 1, got {total}");
        ensure_input!(tau.is_finite(), "tau must be finite");
        Ok(Self { kind, priors, tau })
    }

    /// Uniform priors `1/K`.
    pub fn uniform(kind: DeltaKind, num_classes: usize, tau: f64) -> Result<Self> {
        Self::new(kind, vec![1.0 / num_classes as f64; num_classes], tau)
    }

    /// Priors from label frequencies, renormalized so they sum to 1 exactly up to rounding.
    pub fn from_labels(kind: DeltaKind, labels: &[usize], num_classes: usize, tau: f64) -> Result<Self> {
        ensure_input!(!labels.is_empty(), "no labels");
        let mut counts = vec![0.0; num_classes];
        for &y in labels {
            ensure_input!(y < num_classes, "label {y} out of range");
            counts[y] += 1.0;
        }
        let n = labels.len() as f64;
        Self::new(kind, counts.into_iter().map(|c| c / n).collect(), tau)
    }
}

/// The `K × K` matrix `Δ_{yy'}` (row = true class).
pub fn delta_margins(spec: &DeltaMargins) -> Result<Matrix> {
    let k = spec.priors.len();
    let pr = &spec.priors;
    let logarithmic = matches!(spec.kind, DeltaKind::BalancedSoftmax | DeltaKind::LogitAdjustment);
    if (logarithmic || spec.kind == DeltaKind::Ldam) && pr.contains(&0.0) {
        return Err(input_err!("{} margins are undefined for a zero class prior", spec.kind.name()));
    }
    let mut m = Matrix::zeros(k, k);
    for y in 0..k {
        for yp in 0..k {
            m[(y, yp)] = match spec.kind {
                DeltaKind::Ldam => pr[y].powf(-0.25),
                DeltaKind::Eql => pr[yp],
                DeltaKind::BalancedSoftmax => (pr[yp] / pr[y]).ln(),
                DeltaKind::LogitAdjustment => spec.tau * (pr[yp] / pr[y]).ln(),
            };
        }
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feature_stats::{ClassBatchStat, BatchStats};
    use proptest::prelude::*;

    #[test]
    fn symmetric_alpha_gives_uniform_gamma() {
        let g = compute_gamma(&[3.0; 4], 2.0).unwrap();
        for &v in g.gamma() {
            assert!((v - 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn two_class_example_matches_grid_search() {
        let g = compute_gamma(&[1.0, 8.0], 1.0).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-12);
        assert!((g[1] - 4.0 / 3.0).abs() < 1e-12);

        // brute force over γ_0 on a fine grid, γ_1 = 2 − γ_0
        let (mut best, mut best_val) = (0.0, f64::INFINITY);
        let steps = 200_000;
        for i in 1..steps {
            let g0 = 2.0 * i as f64 / steps as f64;
            let v = complexity_value(&[1.0, 8.0], &[g0, 2.0 - g0]);
            if v < best_val {
                best_val = v;
                best = g0;
            }
        }
        assert!((best - 2.0 / 3.0).abs() < 1e-4);
    }

    #[test]
    fn degenerate_and_single_class() {
        assert_eq!(compute_gamma(&[0.0, 0.0, 0.0], 1.5).unwrap().gamma(), &[1.5, 1.5, 1.5]);
        assert_eq!(compute_gamma_lp(&[7.0], 3.0, 3.0).unwrap().gamma(), &[3.0]);
        let g = compute_gamma(&[0.0, 1.0], 1.0).unwrap();
        assert!(g[0] > 0.0);
    }

    #[test]
    fn unit_normalized_features_are_class_agnostic() {
        let g = compute_gamma_lp(&[1.0; 5], 2.0, 2.0).unwrap();
        assert!(g.gamma().iter().all(|&v| (v - 2.0).abs() < 1e-12));
        let g = compute_gamma_lp(&[1.0, 8.0], 1.0, 3.0).unwrap();
        assert!((g[1] - 4.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn budget_errors() {
        assert!(matches!(compute_gamma(&[1.0], 0.0), Err(Error::Input(_))));
        assert!(matches!(compute_gamma(&[1.0], -1.0), Err(Error::Input(_))));
        assert!(matches!(compute_gamma(&[-1.0], 1.0), Err(Error::Input(_))));
    }

    #[test]
    fn unobserved_classes_get_budget() {
        let mut stats = ClassStats::new(3, 1, 2.0, 0.9).unwrap();
        let g = gamma_from_stats(&stats, 2.0).unwrap();
        assert_eq!(g.gamma(), &[2.0, 2.0, 2.0]);
        stats
            .ema_update(&BatchStats {
                num_classes: 3,
                feature_dim: 1,
                p: 2.0,
                classes: vec![
                    ClassBatchStat { class: 0, count: 1, mu_sq: 1.0, s_sq: 0.0, r_sq_p: 1.0 },
                    ClassBatchStat { class: 2, count: 1, mu_sq: 8.0, s_sq: 0.0, r_sq_p: 8.0 },
                ],
            })
            .unwrap();
        let g = gamma_from_stats(&stats, 1.0).unwrap();
        assert!((g[0] - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(g[1], 1.0);
        assert!((g[2] - 4.0 / 3.0).abs() < 1e-12);
        let mean = g.gamma().iter().sum::<f64>() / 3.0;
        assert!((mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_examples() {
        let bs = delta_margins(&DeltaMargins::uniform(DeltaKind::BalancedSoftmax, 4, 1.0).unwrap()).unwrap();
        assert!(bs.as_slice().iter().all(|&v| v == 0.0));

        let ldam = delta_margins(&DeltaMargins::uniform(DeltaKind::Ldam, 4, 1.0).unwrap()).unwrap();
        assert!(ldam.as_slice().iter().all(|&v| (v - 4f64.powf(0.25)).abs() < 1e-12));

        let la = delta_margins(&DeltaMargins::new(DeltaKind::LogitAdjustment, vec![0.75, 0.25], 1.0).unwrap()).unwrap();
        assert!((la[(0, 1)] - (1.0f64 / 3.0).ln()).abs() < 1e-15);
        assert!((la[(1, 0)] - 3f64.ln()).abs() < 1e-15);

        let eql = delta_margins(&DeltaMargins::new(DeltaKind::Eql, vec![0.75, 0.25], 1.0).unwrap()).unwrap();
        assert_eq!(eql[(0, 1)], 0.25);
    }

    #[test]
    fn delta_errors() {
        assert!(DeltaMargins::new(DeltaKind::Eql, vec![0.5, 0.6], 1.0).is_err());
        let zero = DeltaMargins::new(DeltaKind::BalancedSoftmax, vec![1.0, 0.0], 1.0).unwrap();
        assert!(matches!(delta_margins(&zero), Err(Error::Input(_))));
        let zero_eql = DeltaMargins::new(DeltaKind::Eql, vec![1.0, 0.0], 1.0).unwrap();
        assert!(delta_margins(&zero_eql).is_ok());
        assert_eq!("logit_adjustment".parse::<DeltaKind>().unwrap(), DeltaKind::LogitAdjustment);
    }

    proptest! {
        #[test]
        fn budget_is_preserved(alpha in prop::collection::vec(0.0f64..50.0, 1..12), budget in 0.1f64..5.0) {
            let g = compute_gamma(&alpha, budget).unwrap();
            let mean = g.gamma().iter().sum::<f64>() / alpha.len() as f64;
            prop_assert!((mean - budget).abs() < 1e-12);
            prop_assert!(g.gamma().iter().all(|&v| v > 0.0));
        }

        #[test]
        fn scale_equivariant(alpha in prop::collection::vec(0.01f64..50.0, 1..10), t in 0.001f64..1000.0) {
            let a = compute_gamma(&alpha, 2.0).unwrap();
            let scaled: Vec<f64> = alpha.iter().map(|v| v * t).collect();
            let b = compute_gamma(&scaled, 2.0).unwrap();
            for (x, y) in a.gamma().iter().zip(b.gamma()) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn monotone_in_alpha(alpha in prop::collection::vec(0.0f64..50.0, 2..10)) {
            let g = compute_gamma(&alpha, 1.0).unwrap();
            for i in 0..alpha.len() {
                for j in 0..alpha.len() {
                    if alpha[i] > alpha[j] {
                        prop_assert!(g[i] > g[j]);
                    }
                }
            }
        }
    }
}
