//! Batch objective: mean over samples of a logit loss plus `λ·` representation margin loss.

use crate::error::{ensure_input, Error, Result};
use crate::linalg::Matrix;
use crate::losses::{delta_margin_ce, logit_margin_ce, rep_margin_loss};
use crate::margin_schedule::MarginVector;
use crate::model::{ForwardCache, ModelParams};

#[derive(Clone, Copy, Debug)]
pub enum LogitTerm<'a> {
    /// Tempered cross-entropy with the true class's margin `γ_y`.
    Margin(&'a MarginVector),
    /// Additive Δ-margin cross-entropy.
    Delta(&'a Matrix),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RepTerm {
    pub lambda: f64,
    pub s_bar: f64,
}

#[derive(Clone, Copy, Debug)]
pub struct ObjectiveSpec<'a> {
    pub logit: LogitTerm<'a>,
    pub rep: Option<RepTerm>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BatchLoss {
    /// `logit_term + λ·rep_term`.
    pub value: f64,
    /// Mean logit loss.
    pub logit_term: f64,
    /// Mean representation loss (before `λ`).
    pub rep_term: f64,
    /// `∂value/∂θ` in the model's flat layout, when requested.
    pub grad: Option<Vec<f64>>,
}

pub fn combined_objective(
    model: &ModelParams,
    inputs: &Matrix,
    labels: &[usize],
    spec: &ObjectiveSpec<'_>,
    want_grad: bool,
) -> Result<BatchLoss> {
    ensure_input!(inputs.rows() == labels.len(), "{} inputs but {} labels", inputs.rows(), labels.len());
    let caches = inputs.iter_rows().map(|x| model.forward(x)).collect::<Result<Vec<_>>>()?;
    objective_from_caches(model, &caches, labels, spec, want_grad)
}

/// Same as [`combined_objective`] but reuses forward passes already computed by the caller.
pub fn objective_from_caches(
    model: &ModelParams,
    caches: &[ForwardCache],
    labels: &[usize],
    spec: &ObjectiveSpec<'_>,
    want_grad: bool,
) -> Result<BatchLoss> {
    let n = caches.len();
    ensure_input!(n >= 1, "empty batch");
    ensure_input!(n == labels.len(), "{n} samples but {} labels", labels.len());
    let k = model.arch().num_classes;
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
    }
    if let LogitTerm::Margin(g) = spec.logit {
        ensure_input!(g.len() == k, "margin vector has {} entries for {k} classes", g.len());
    }
    if let Some(r) = spec.rep {
        ensure_input!(r.lambda.is_finite() && r.lambda >= 0.0, "lambda must be non-negative, got {}", r.lambda);
    }
    let inv_n = 1.0 / n as f64;
    let d = model.arch().feature_dim;

    let mut logit_sum = 0.0;
    let mut grad_logits: Vec<Vec<f64>> = Vec::with_capacity(if want_grad { n } else { 0 });
    for (c, &y) in caches.iter().zip(labels) {
        let lg = match spec.logit {
            LogitTerm::Margin(g) => logit_margin_ce(&c.logits, y, g[y], want_grad)?,
            LogitTerm::Delta(delta) => delta_margin_ce(&c.logits, y, delta, want_grad)?,
        };
        logit_sum += lg.value;
        if let Some(mut g) = lg.grad_logits {
            g.iter_mut().for_each(|v| *v *= inv_n);
            grad_logits.push(g);
        }
    }

    let mut rep_sum = 0.0;
    let mut grad_feats = vec![vec![0.0; d]; if want_grad { n } else { 0 }];
    if let Some(rep) = spec.rep {
        let scale = rep.lambda * inv_n;
        for i in 0..n {
            let pos_idx: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
            let positives: Vec<&[f64]> = pos_idx.iter().map(|&j| caches[j].features.as_slice()).collect();
            let lg = rep_margin_loss(&caches[i].features, &positives, rep.s_bar, want_grad && rep.lambda != 0.0)?;
            rep_sum += lg.value;
            if let (Some(ga), Some(gp)) = (lg.grad_anchor, lg.grad_positives) {
                for (t, v) in grad_feats[i].iter_mut().zip(&ga) {
                    *t += scale * v;
                }
                for (&j, g) in pos_idx.iter().zip(&gp) {
                    for (t, v) in grad_feats[j].iter_mut().zip(g) {
                        *t += scale * v;
                    }
                }
            }
        }
    }

    let logit_term = logit_sum * inv_n;
    let rep_term = rep_sum * inv_n;
    let lambda = spec.rep.map_or(0.0, |r| r.lambda);
    let value = logit_term + lambda * rep_term;
    if !value.is_finite() {
        return Err(Error::Numeric(format!("objective is not finite (logit {logit_term}, rep {rep_term})")));
    }

    let grad = if want_grad {
        let mut g = vec![0.0; model.num_params()];
        for i in 0..n {
            model.backward(&caches[i], Some(&grad_logits[i]), Some(&grad_feats[i]), &mut g)?;
        }
        Some(g)
    } else {
        None
    };
    Ok(BatchLoss { value, logit_term, rep_term, grad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::softmax;
    use crate::model::{Activation, Architecture, EncoderKind, HeadKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(seed: u64) -> (ModelParams, Matrix, Vec<usize>) {
        let arch = Architecture {
            input_dim: 4,
            hidden_dim: 6,
            feature_dim: 3,
            num_classes: 3,
            encoder: EncoderKind::Mlp,
            head: HeadKind::Linear,
            activation: Activation::Tanh,
        };
        let m = ModelParams::init(arch, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_vec(32, 4, (0..128).map(|_| rng.random_range(-1.0..1.0)).collect());
        let y = (0..32).map(|_| rng.random_range(0..3)).collect();
        (m, x, y)
    }

    #[test]
    fn reduces_to_mean_cross_entropy() {
        let (m, x, y) = setup(1);
        let g = MarginVector::uniform(3, 1.0).unwrap();
        let spec = ObjectiveSpec { logit: LogitTerm::Margin(&g), rep: Some(RepTerm { lambda: 0.0, s_bar: 1.0 }) };
        let l = combined_objective(&m, &x, &y, &spec, false).unwrap();
        let mut oracle = 0.0;
        for (row, &yi) in x.iter_rows().zip(&y) {
            let z = m.forward(row).unwrap().logits;
            oracle -= softmax(&z)[yi].ln();
        }
        oracle /= 32.0;
        assert!((l.value - oracle).abs() < 1e-12);
    }

    #[test]
    fn singleton_classes_have_no_rep_term() {
        let (m, x, _) = setup(2);
        let x = x.select_rows(&[0, 1, 2]);
        let g = MarginVector::uniform(3, 1.0).unwrap();
        let spec = ObjectiveSpec { logit: LogitTerm::Margin(&g), rep: Some(RepTerm { lambda: 0.9, s_bar: 0.0 }) };
        let l = combined_objective(&m, &x, &[0, 1, 2], &spec, true).unwrap();
        assert_eq!(l.rep_term, 0.0);
        assert!((l.value - l.logit_term).abs() < 1e-15);
    }

    #[test]
    fn matches_per_sample_sum() {
        let (m, x, y) = setup(3);
        let g = MarginVector::from_values(vec![0.7, 1.9, 1.4]).unwrap();
        let spec = ObjectiveSpec { logit: LogitTerm::Margin(&g), rep: Some(RepTerm { lambda: 0.5, s_bar: 0.3 }) };
        let l = combined_objective(&m, &x, &y, &spec, false).unwrap();

        let feats: Vec<Vec<f64>> = x.iter_rows().map(|r| m.forward(r).unwrap().features).collect();
        let mut total = 0.0;
        for i in 0..32 {
            let z = m.forward(x.row(i)).unwrap().logits;
            let zs: Vec<f64> = z.iter().map(|v| v / g[y[i]]).collect();
            total -= softmax(&zs)[y[i]].ln();
            let mut inner = 1.0;
            for j in 0..32 {
                if j != i && y[j] == y[i] {
                    let d2: f64 = feats[i].iter().zip(&feats[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                    inner += (d2 - 0.6).exp();
                }
            }
            total += 0.5 * inner.ln();
        }
        assert!((l.value - total / 32.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (m, x, mut y) = setup(4);
        let g = MarginVector::uniform(2, 1.0).unwrap();
        let spec = ObjectiveSpec { logit: LogitTerm::Margin(&g), rep: None };
        assert!(matches!(combined_objective(&m, &x, &y, &spec, false), Err(Error::Input(_))));
        y[0] = 7;
        let g = MarginVector::uniform(3, 1.0).unwrap();
        let spec = ObjectiveSpec { logit: LogitTerm::Margin(&g), rep: Some(RepTerm { lambda: -1.0, s_bar: 0.0 }) };
        assert!(combined_objective(&m, &x, &y, &spec, false).is_err());
    }
}
