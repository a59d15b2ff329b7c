//! Numerical evaluation of the margin-based generalization bounds.
//!
//! Everything here works on a fixed feature matrix `φ(x_i)` (rows), class
//! labels, a margin vector `γ`, and a bound `Λ` on the head-weight norms. The
//! complexity term has two routes: the closed-form upper bounds and a direct
//! Monte-Carlo (or exhaustive) estimate of the empirical γ-margin Rademacher
//! complexity
//!
//! ```text
//! R = (1/N) E_ε sup_{‖w_y‖_q ≤ Λ} Σ_i Σ_y ε_iy w_yᵀφ(x_i) / γ_{y_i}
//!   = (Λ/N) E_ε Σ_y ‖v_y‖_p,   v_y = Σ_i ε_iy φ(x_i) / γ_{y_i}
//! ```
//!
//! where `p` is the dual exponent of `q`. The supremum is attained by Hölder,
//! so no inner optimization is needed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{ensure_input, input_err, Result};
use crate::feature_stats::{validate_p, ClassStats};
use crate::linalg::{lp_norm, pairwise_sum, Matrix};
use crate::losses::{gamma_ramp_loss, logit_margin_ce, zero_one_loss};
use crate::margin_schedule::MarginVector;

pub const DEFAULT_DELTA: f64 = 0.05;
pub const DEFAULT_DRAWS: usize = 4096;
/// `N·K` above which exhaustive enumeration is refused.
pub const MAX_EXACT_SIGNS: usize = 24;

fn check_gamma(gamma: &[f64]) -> Result<()> {
    ensure_input!(!gamma.is_empty(), "empty margin vector");
    if let Some(g) = gamma.iter().find(|g| !(g.is_finite() && **g > 0.0)) {
        return Err(input_err!("margins must be positive, got {g}"));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    ensure_input!(delta > 0.0 && delta < 1.0, "confidence delta must lie in (0, 1), got {delta}");
    Ok(())
}

fn check_logits(logits: &Matrix, labels: &[usize], k: usize) -> Result<()> {
    ensure_input!(logits.rows() >= 1, "empty dataset");
    ensure_input!(logits.rows() == labels.len(), "{} logit rows but {} labels", logits.rows(), labels.len());
    ensure_input!(logits.cols() == k, "logits have {} columns but gamma has {k} entries", logits.cols());
    Ok(())
}

/// Mean γ-margin (ramp) loss.
pub fn empirical_margin_risk(logits: &Matrix, labels: &[usize], gamma: &MarginVector) -> Result<f64> {
    check_logits(logits, labels, gamma.len())?;
    let mut s = 0.0;
    for (z, &y) in logits.iter_rows().zip(labels) {
        s += gamma_ramp_loss(z, y, gamma[y])?;
    }
    Ok(s / labels.len() as f64)
}

/// Mean γ-margin cross-entropy.
pub fn surrogate_risk(logits: &Matrix, labels: &[usize], gamma: &MarginVector) -> Result<f64> {
    check_logits(logits, labels, gamma.len())?;
    let mut s = 0.0;
    for (z, &y) in logits.iter_rows().zip(labels) {
        s += logit_margin_ce(z, y, gamma[y], false)?.value;
    }
    Ok(s / labels.len() as f64)
}

/// Fraction misclassified, ties counted as errors.
pub fn zero_one_risk(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    ensure_input!(logits.rows() >= 1 && logits.rows() == labels.len(), "logits and labels must be non-empty and aligned");
    Ok(logits.iter_rows().zip(labels).map(|(z, &y)| zero_one_loss(z, y)).sum::<f64>() / labels.len() as f64)
}

/// `C(p)`: 1 on `[1, 2]`, `2^{p/2} Γ((p+1)/2)/√π` on `(2, ∞)`, `√(2 ln d)` at `p = ∞`.
pub fn c_p_constant(p: f64, d: usize) -> Result<f64> {
    validate_p(p)?;
    if p <= 2.0 {
        Ok(1.0)
    } else if p.is_infinite() {
        ensure_input!(d >= 1, "feature dimension must be positive");
        Ok((2.0 * (d as f64).ln()).sqrt())
    } else {
        Ok(2f64.powf(p / 2.0) * libm::tgamma((p + 1.0) / 2.0) / std::f64::consts::PI.sqrt())
    }
}

/// `Λ·√(K/N)·√(Σ_k (‖μ̂_k‖² + ‖ŝ_k‖²)/γ_k²)`.
pub fn rademacher_bound_l2(mu_sq: &[f64], s_sq: &[f64], gamma: &[f64], lambda: f64, n: usize, k: usize) -> Result<f64> {
    ensure_input!(mu_sq.len() == s_sq.len(), "mu_sq and s_sq lengths differ");
    let alpha: Vec<f64> = mu_sq.iter().zip(s_sq).map(|(m, s)| m + s).collect();
    complexity_bound(&alpha, gamma, lambda, n, k, 1.0)
}

/// `C(p)·Λ_q·√(K/N)·√(Σ_k r²_{k,p}/γ_k²)`.
pub fn rademacher_bound_lp(r_sq_p: &[f64], gamma: &[f64], lambda_q: f64, n: usize, k: usize, p: f64, d: usize) -> Result<f64> {
    let c = c_p_constant(p, d)?;
    complexity_bound(r_sq_p, gamma, lambda_q, n, k, c)
}

fn complexity_bound(spread: &[f64], gamma: &[f64], lambda: f64, n: usize, k: usize, c: f64) -> Result<f64> {
    check_gamma(gamma)?;
    ensure_input!(spread.len() == gamma.len(), "{} spread values for {} margins", spread.len(), gamma.len());
    ensure_input!(n >= 1 && k >= 1, "N and K must be positive");
    ensure_input!(lambda.is_finite() && lambda >= 0.0, "Lambda must be non-negative");
    let sum: f64 = spread.iter().zip(gamma).map(|(a, g)| a / (g * g)).sum();
    Ok(c * lambda * (k as f64 / n as f64).sqrt() * sum.sqrt())
}

/// Monte-Carlo estimate with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub stderr: f64,
}

fn check_mc_inputs(features: &Matrix, labels: &[usize], gamma: &[f64], lambda: f64) -> Result<()> {
    check_gamma(gamma)?;
    ensure_input!(features.rows() >= 1, "empty feature set");
    ensure_input!(features.rows() == labels.len(), "{} feature rows but {} labels", features.rows(), labels.len());
    if let Some(y) = labels.iter().find(|&&y| y >= gamma.len()) {
        return Err(input_err!("label {y} out of range for {} classes", gamma.len()));
    }
    ensure_input!(lambda.is_finite() && lambda >= 0.0, "Lambda must be non-negative");
    Ok(())
}

/// `(Λ/N) Σ_y ‖v_y‖_p` for one sign matrix, `signs[i*K + y] ∈ {−1, +1}`.
fn sup_value(scaled: &Matrix, signs: &[f64], k: usize, lambda: f64, p: f64, v: &mut [f64]) -> f64 {
    let n = scaled.rows();
    let mut total = 0.0;
    for y in 0..k {
        v.iter_mut().for_each(|x| *x = 0.0);
        for i in 0..n {
            let s = signs[i * k + y];
            for (vj, fj) in v.iter_mut().zip(scaled.row(i)) {
                *vj += s * fj;
            }
        }
        total += lp_norm(v, p);
    }
    lambda * total / n as f64
}

fn scaled_features(features: &Matrix, labels: &[usize], gamma: &[f64]) -> Matrix {
    let mut scaled = features.clone();
    for (i, &y) in labels.iter().enumerate() {
        scaled.row_mut(i).iter_mut().for_each(|v| *v /= gamma[y]);
    }
    scaled
}

/// Monte-Carlo estimate of the empirical γ-margin Rademacher complexity over
/// the class `{‖w_y‖_q ≤ Λ}`; `p` is the dual exponent (2 for the L2 ball).
///
/// Draw `t` uses its own ChaCha stream, and the draws are summed pairwise, so
/// the result is identical for any thread count.
pub fn rademacher_mc(
    features: &Matrix,
    labels: &[usize],
    gamma: &[f64],
    lambda: f64,
    p: f64,
    num_draws: usize,
    seed: u64,
) -> Result<McEstimate> {
    check_mc_inputs(features, labels, gamma, lambda)?;
    validate_p(p)?;
    ensure_input!(num_draws >= 2, "need at least two Monte-Carlo draws, got {num_draws}");
    let k = gamma.len();
    let scaled = scaled_features(features, labels, gamma);
    let n = scaled.rows();
    let d = scaled.cols();
    let values: Vec<f64> = (0..num_draws)
        .into_par_iter()
        .map_init(
            || (vec![0.0; n * k], vec![0.0; d]),
            |(signs, v), t| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                signs.iter_mut().for_each(|s| *s = if rng.random::<bool>() { 1.0 } else { -1.0 });
                sup_value(&scaled, signs, k, lambda, p, v)
            },
        )
        .collect();
    let m = num_draws as f64;
    let mean = pairwise_sum(&values) / m;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean) * (v - mean)).collect();
    let var = pairwise_sum(&sq) / (m - 1.0);
    Ok(McEstimate { mean, stderr: (var / m).sqrt() })
}

/// Exact expectation by enumerating all `2^{N·K}` sign matrices.
pub fn rademacher_exact(features: &Matrix, labels: &[usize], gamma: &[f64], lambda: f64, p: f64) -> Result<f64> {
    check_mc_inputs(features, labels, gamma, lambda)?;
    validate_p(p)?;
    let k = gamma.len();
    let n = features.rows();
    let bits = n * k;
    ensure_input!(bits <= MAX_EXACT_SIGNS, "exhaustive enumeration needs N*K <= {MAX_EXACT_SIGNS}, got {bits}");
    let scaled = scaled_features(features, labels, gamma);
    let total = 1usize << bits;
    let values: Vec<f64> = (0..total)
        .into_par_iter()
        .map_init(
            || (vec![0.0; bits], vec![0.0; scaled.cols()]),
            |(signs, v), mask| {
                for (b, s) in signs.iter_mut().enumerate() {
                    *s = if mask >> b & 1 == 1 { 1.0 } else { -1.0 };
                }
                sup_value(&scaled, signs, k, lambda, p, v)
            },
        )
        .collect();
    Ok(pairwise_sum(&values) / total as f64)
}

/// `3√(ln(2/δ)/(2N))`.
pub fn confidence_term(delta: f64, n: usize) -> Result<f64> {
    check_delta(delta)?;
    ensure_input!(n >= 1, "sample count must be positive");
    Ok(3.0 * ((2.0 / delta).ln() / (2.0 * n as f64)).sqrt())
}

/// `R̂^γ + 4√(2K)·ℜ + 3√(ln(2/δ)/2N)`.
pub fn lemma1_rhs(margin_risk: f64, rademacher: f64, k: usize, n: usize, delta: f64) -> Result<f64> {
    Ok(margin_risk + 4.0 * (2.0 * k as f64).sqrt() * rademacher + confidence_term(delta, n)?)
}

/// `(1/ln 2)·R̂^{γ,ce} + (4√2·Λ·K/√N)·√(Σ_k α_k/γ_k²) + 3√(ln(2/δ)/2N)`.
#[allow(clippy::too_many_arguments)]
pub fn prop1_rhs(
    surrogate_risk: f64,
    mu_sq: &[f64],
    s_sq: &[f64],
    gamma: &[f64],
    lambda: f64,
    n: usize,
    k: usize,
    delta: f64,
) -> Result<f64> {
    check_gamma(gamma)?;
    ensure_input!(mu_sq.len() == gamma.len() && s_sq.len() == gamma.len(), "per-class inputs must have {} entries", gamma.len());
    let sum: f64 = mu_sq.iter().zip(s_sq).zip(gamma).map(|((m, s), g)| (m + s) / (g * g)).sum();
    let complexity = 4.0 * std::f64::consts::SQRT_2 * lambda * k as f64 / (n as f64).sqrt() * sum.sqrt();
    Ok(surrogate_risk / std::f64::consts::LN_2 + complexity + confidence_term(delta, n)?)
}

/// Terms of the per-class bound for one class.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PerClassBound {
    pub surrogate_term: f64,
    /// `(4/γ_k)·(Λ/√N_k)·√α_k`
    pub complexity_term: f64,
    pub confidence_term: f64,
}

impl PerClassBound {
    pub fn total(&self) -> f64 {
        self.surrogate_term + self.complexity_term + self.confidence_term
    }
}

/// Per-class bound with class-restricted complexity `ℜ̂_k = (Λ/√N_k)√(‖μ̂_k‖²+‖ŝ_k‖²)`.
pub fn per_class_rhs(class_surrogate_risk: f64, alpha_k: f64, gamma_k: f64, lambda: f64, n_k: usize, delta: f64) -> Result<PerClassBound> {
    ensure_input!(n_k >= 1, "class has no samples");
    check_gamma(&[gamma_k])?;
    ensure_input!(alpha_k >= 0.0, "alpha must be non-negative");
    let r_k = lambda / (n_k as f64).sqrt() * alpha_k.sqrt();
    Ok(PerClassBound {
        surrogate_term: class_surrogate_risk / std::f64::consts::LN_2,
        complexity_term: 4.0 / gamma_k * r_k,
        confidence_term: confidence_term(delta, n_k)?,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoundConfig {
    pub delta: f64,
    pub p: f64,
    pub draws: usize,
    pub seed: u64,
}

impl Default for BoundConfig {
    fn default() -> Self {
        Self { delta: DEFAULT_DELTA, p: 2.0, draws: DEFAULT_DRAWS, seed: 0 }
    }
}

/// All bound terms for one dataset–model pair.
#[derive(Clone, Debug, PartialEq)]
pub struct BoundReport {
    pub num_samples: usize,
    pub num_classes: usize,
    pub lambda: f64,
    pub zero_one_risk: f64,
    pub empirical_margin_risk: f64,
    pub surrogate_risk: f64,
    pub rademacher_bound: f64,
    pub rademacher_mc: f64,
    pub rademacher_mc_stderr: f64,
    pub lemma1_rhs: f64,
    pub prop1_rhs: f64,
    pub per_class_rhs: Vec<f64>,
    pub delta: f64,
    pub p: f64,
    pub c_p: f64,
}

impl BoundReport {
    /// Two-column `quantity,value` CSV.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("quantity,value\n");
        let mut row = |k: &str, v: f64| s.push_str(&format!("{k},{v}\n"));
        row("num_samples", self.num_samples as f64);
        row("num_classes", self.num_classes as f64);
        row("delta", self.delta);
        row("p", self.p);
        row("c_p", self.c_p);
        row("lambda", self.lambda);
        row("zero_one_risk", self.zero_one_risk);
        row("empirical_margin_risk", self.empirical_margin_risk);
        row("surrogate_risk", self.surrogate_risk);
        row("rademacher_bound", self.rademacher_bound);
        row("rademacher_mc", self.rademacher_mc);
        row("rademacher_mc_stderr", self.rademacher_mc_stderr);
        row("lemma1_rhs", self.lemma1_rhs);
        row("prop1_rhs", self.prop1_rhs);
        for (k, v) in self.per_class_rhs.iter().enumerate() {
            row(&format!("per_class_rhs_{k}"), *v);
        }
        s
    }
}

/// Evaluates every bound on precomputed features and logits.
///
/// `lambda` must bound the head weights in the norm dual to `config.p`. The L2
/// bounds (`prop1_rhs`, per-class) always use `Λ` as given.
pub fn evaluate_bounds(features: &Matrix, logits: &Matrix, labels: &[usize], gamma: &MarginVector, lambda: f64, config: &BoundConfig) -> Result<BoundReport> {
    let k = gamma.len();
    check_logits(logits, labels, k)?;
    check_delta(config.delta)?;
    let n = labels.len();
    let d = features.cols();
    let l2 = ClassStats::from_features(features, labels, k, 2.0)?;
    let lp = ClassStats::from_features(features, labels, k, config.p)?;

    let margin_risk = empirical_margin_risk(logits, labels, gamma)?;
    let surrogate = surrogate_risk(logits, labels, gamma)?;
    let rademacher_bound = if config.p == 2.0 {
        rademacher_bound_l2(l2.mu_sq(), l2.s_sq(), gamma.gamma(), lambda, n, k)?
    } else {
        rademacher_bound_lp(lp.r_sq_p(), gamma.gamma(), lambda, n, k, config.p, d)?
    };
    let mc = rademacher_mc(features, labels, gamma.gamma(), lambda, config.p, config.draws, config.seed)?;

    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let idx: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        ensure_input!(!idx.is_empty(), "class {c} has no samples");
        let mut s = 0.0;
        for &i in &idx {
            s += logit_margin_ce(logits.row(i), c, gamma[c], false)?.value;
        }
        let b = per_class_rhs(s / idx.len() as f64, l2.alpha()[c], gamma[c], lambda, idx.len(), config.delta)?;
        per_class.push(b.total());
    }

    Ok(BoundReport {
        num_samples: n,
        num_classes: k,
        lambda,
        zero_one_risk: zero_one_risk(logits, labels)?,
        empirical_margin_risk: margin_risk,
        surrogate_risk: surrogate,
        rademacher_bound,
        rademacher_mc: mc.mean,
        rademacher_mc_stderr: mc.stderr,
        lemma1_rhs: lemma1_rhs(margin_risk, rademacher_bound, k, n, config.delta)?,
        prop1_rhs: prop1_rhs(surrogate, l2.mu_sq(), l2.s_sq(), gamma.gamma(), lambda, n, k, config.delta)?,
        per_class_rhs: per_class,
        delta: config.delta,
        p: config.p,
        c_p: c_p_constant(config.p, d)?,
    })
}
