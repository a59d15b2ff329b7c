//! Per-sample losses with analytic gradients.
//!
//! All exponentials go through a max-shifted log-sum-exp; squared feature
//! distances inside `exp` overflow quickly otherwise.

use crate::error::{ensure_finite, ensure_input, Result};
use crate::linalg::{sq_dist, Matrix};

/// A loss value together with whichever gradients were requested.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad_logits: Option<Vec<f64>>,
    pub grad_anchor: Option<Vec<f64>>,
    pub grad_positives: Option<Vec<Vec<f64>>>,
}

impl LossGrad {
    fn value_only(value: f64) -> Self {
        Self { value, ..Self::default() }
    }
}

/// `ln Σ exp(x_i)`; `-inf` for an empty slice.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn check_logits(z: &[f64], y: usize) -> Result<()> {
    ensure_input!(!z.is_empty(), "empty logit vector");
    ensure_input!(y < z.len(), "label {y} out of range for {} logits", z.len());
    ensure_finite(z, "logits")
}

/// Cross-entropy of the tempered logits `z / γ_y`.
///
/// `γ_y = 1` is ordinary softmax cross-entropy; the gradient with respect to the
/// raw logits is `(softmax(z/γ_y) − 1_y) / γ_y`.
pub fn logit_margin_ce(z: &[f64], y: usize, gamma_y: f64, want_grad: bool) -> Result<LossGrad> {
    check_logits(z, y)?;
    ensure_input!(gamma_y.is_finite() && gamma_y > 0.0, "gamma_y must be positive, got {gamma_y}");
    let scaled: Vec<f64> = z.iter().map(|v| v / gamma_y).collect();
    let m = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = scaled.iter().map(|v| (v - m).exp()).sum();
    let value = (m - scaled[y]) + sum.ln();
    if !want_grad {
        return Ok(LossGrad::value_only(value));
    }
    let mut g: Vec<f64> = scaled.iter().map(|v| (v - m).exp() / sum).collect();
    g[y] -= 1.0;
    g.iter_mut().for_each(|v| *v /= gamma_y);
    Ok(LossGrad { value, grad_logits: Some(g), ..LossGrad::default() })
}

fn check_rep_inputs(anchor: &[f64], positives: &[&[f64]], s_bar: f64) -> Result<()> {
    ensure_input!(s_bar.is_finite() && s_bar >= 0.0, "s_bar must be non-negative, got {s_bar}");
    ensure_finite(anchor, "anchor")?;
    for (j, p) in positives.iter().enumerate() {
        ensure_input!(p.len() == anchor.len(), "positive {j} has dimension {} but anchor has {}", p.len(), anchor.len());
        ensure_finite(p, "positive")?;
    }
    Ok(())
}

/// `ln(1 + Σ_j exp(‖a − x_j‖² − 2s̄))` over the same-class positives `x_j`.
pub fn rep_margin_loss(anchor: &[f64], positives: &[&[f64]], s_bar: f64, want_grad: bool) -> Result<LossGrad> {
    check_rep_inputs(anchor, positives, s_bar)?;
    // augmented set {0} ∪ {d²_j − 2s̄}
    let mut exps = Vec::with_capacity(positives.len() + 1);
    exps.push(0.0);
    exps.extend(positives.iter().map(|p| sq_dist(anchor, p) - 2.0 * s_bar));
    let value = log_sum_exp(&exps);
    if !want_grad {
        return Ok(LossGrad::value_only(value));
    }
    let mut grad_anchor = vec![0.0; anchor.len()];
    let mut grad_positives = Vec::with_capacity(positives.len());
    for (p, e) in positives.iter().zip(&exps[1..]) {
        let w = 2.0 * (e - value).exp();
        let g: Vec<f64> = anchor.iter().zip(*p).map(|(a, x)| w * (a - x)).collect();
        for (ga, gv) in grad_anchor.iter_mut().zip(&g) {
            *ga += gv;
        }
        grad_positives.push(g.into_iter().map(|v| -v).collect());
    }
    Ok(LossGrad { value, grad_logits: None, grad_anchor: Some(grad_anchor), grad_positives: Some(grad_positives) })
}

/// Hinge form: `max(0, max_j (‖a − x_j‖² − 2s̄))`.
pub fn rep_margin_loss_hard(anchor: &[f64], positives: &[&[f64]], s_bar: f64) -> Result<f64> {
    check_rep_inputs(anchor, positives, s_bar)?;
    Ok(positives.iter().map(|p| sq_dist(anchor, p) - 2.0 * s_bar).fold(0.0, f64::max))
}

/// `z_y − max_{y'≠y} z_{y'}`; `+inf` when there is no competing class.
pub fn logit_margin(z: &[f64], y: usize) -> f64 {
    let runner_up = z.iter().enumerate().filter(|&(k, _)| k != y).map(|(_, &v)| v).fold(f64::NEG_INFINITY, f64::max);
    z[y] - runner_up
}

/// `Φ_γ(u) = min(1, max(0, 1 − u/γ))`.
pub fn ramp(u: f64, gamma: f64) -> f64 {
    (1.0 - u / gamma).clamp(0.0, 1.0)
}

/// The γ-margin (ramp) loss of a logit vector. Ties with the runner-up give margin 0, loss 1.
pub fn gamma_ramp_loss(z: &[f64], y: usize, gamma_y: f64) -> Result<f64> {
    check_logits(z, y)?;
    ensure_input!(gamma_y.is_finite() && gamma_y > 0.0, "gamma_y must be positive, got {gamma_y}");
    Ok(ramp(logit_margin(z, y), gamma_y))
}

/// 0-1 loss with argmax ties counted as errors.
pub fn zero_one_loss(z: &[f64], y: usize) -> f64 {
    if logit_margin(z, y) > 0.0 {
        0.0
    } else {
        1.0
    }
}

/// `ln(1 + Σ_{y'≠y} exp(Δ_{yy'} + z_{y'} − z_y))`.
pub fn delta_margin_ce(z: &[f64], y: usize, delta: &Matrix, want_grad: bool) -> Result<LossGrad> {
    check_logits(z, y)?;
    let k = z.len();
    ensure_input!(delta.rows() == k && delta.cols() == k, "delta must be {k}x{k}, got {}x{}", delta.rows(), delta.cols());
    ensure_finite(delta.row(y), "delta row")?;
    let mut terms = Vec::with_capacity(k);
    terms.push(0.0);
    for yp in (0..k).filter(|&c| c != y) {
        terms.push(delta[(y, yp)] + z[yp] - z[y]);
    }
    let value = log_sum_exp(&terms);
    if !want_grad {
        return Ok(LossGrad::value_only(value));
    }
    let mut g = vec![0.0; k];
    let mut t = terms[1..].iter();
    for yp in (0..k).filter(|&c| c != y) {
        let q = (t.next().unwrap() - value).exp();
        g[yp] = q;
        g[y] -= q;
    }
    Ok(LossGrad { value, grad_logits: Some(g), ..LossGrad::default() })
}
