//! Accuracy, easy/medium/hard partition, margins and feature variability.

use rayon::prelude::*;

use crate::datagen::Dataset;
use crate::error::{ensure_input, input_err, Result};
use crate::feature_stats::batch_stats;
use crate::linalg::{dot, sq_norm, Matrix};
use crate::losses::softmax;
use crate::model::ModelParams;

/// Index of the largest entry, lowest index on ties.
pub fn argmax(z: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in z.iter().enumerate().skip(1) {
        if v > z[best] {
            best = i;
        }
    }
    best
}

fn check_aligned(logits: &Matrix, labels: &[usize]) -> Result<usize> {
    ensure_input!(logits.rows() == labels.len(), "{} logit rows but {} labels", logits.rows(), labels.len());
    let k = logits.cols();
    if let Some(y) = labels.iter().find(|&&y| y >= k) {
        return Err(input_err!("label {y} out of range for {k} classes"));
    }
    Ok(k)
}

/// Per-class top-1 accuracy; `None` for classes without samples.
pub fn per_class_accuracy(logits: &Matrix, labels: &[usize]) -> Result<Vec<Option<f64>>> {
    let k = check_aligned(logits, labels)?;
    let mut hit = vec![0usize; k];
    let mut tot = vec![0usize; k];
    for (z, &y) in logits.iter_rows().zip(labels) {
        tot[y] += 1;
        if argmax(z) == y {
            hit[y] += 1;
        }
    }
    Ok(hit.iter().zip(&tot).map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64)).collect())
}

#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Partition {
    pub easy: Vec<usize>,
    pub medium: Vec<usize>,
    pub hard: Vec<usize>,
}

impl Partition {
    /// Subset name of class `k`, if it was partitioned.
    pub fn subset_of(&self, k: usize) -> Option<&'static str> {
        if self.easy.contains(&k) {
            Some("easy")
        } else if self.medium.contains(&k) {
            Some("medium")
        } else if self.hard.contains(&k) {
            Some("hard")
        } else {
            None
        }
    }
}

/// Descending accuracy, ties by class index; `⌈K/3⌉` easy, `⌊K/3⌋` hard.
pub fn partition_classes(acc: &[f64]) -> Result<Partition> {
    let idx: Vec<usize> = (0..acc.len()).collect();
    partition_subset(&idx, acc)
}

fn partition_subset(classes: &[usize], acc: &[f64]) -> Result<Partition> {
    let k = classes.len();
    ensure_input!(k >= 3, "partitioning needs at least 3 classes, got {k}");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| acc[b].total_cmp(&acc[a]).then(a.cmp(&b)));
    let order: Vec<usize> = order.into_iter().map(|i| classes[i]).collect();
    let easy = k.div_ceil(3);
    let hard = k / 3;
    Ok(Partition {
        easy: order[..easy].to_vec(),
        medium: order[easy..k - hard].to_vec(),
        hard: order[k - hard..].to_vec(),
    })
}

/// Per-sample `P(y|x) − max_{y'≠y} P(y'|x)` from untempered softmax.
pub fn output_margins(logits: &Matrix, labels: &[usize]) -> Result<Vec<f64>> {
    let k = check_aligned(logits, labels)?;
    ensure_input!(k >= 2, "output margin needs at least 2 classes");
    Ok(logits
        .iter_rows()
        .zip(labels)
        .map(|(z, &y)| {
            let p = softmax(z);
            let runner = p.iter().enumerate().filter(|&(j, _)| j != y).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
            p[y] - runner
        })
        .collect())
}

pub fn output_margin(logits: &Matrix, labels: &[usize]) -> Result<f64> {
    let m = output_margins(logits, labels)?;
    ensure_input!(!m.is_empty(), "empty dataset");
    Ok(m.iter().sum::<f64>() / m.len() as f64)
}

/// Minimal pairwise angle between head rows, in degrees.
pub fn classifier_margin(head: &Matrix) -> Result<f64> {
    ensure_input!(head.rows() >= 2, "classifier margin needs at least 2 classes");
    let norms: Vec<f64> = head.iter_rows().map(|w| sq_norm(w).sqrt()).collect();
    if let Some(k) = norms.iter().position(|&n| n == 0.0) {
        return Err(input_err!("head weight for class {k} is zero"));
    }
    let mut max_cos = f64::NEG_INFINITY;
    for i in 0..head.rows() {
        for j in i + 1..head.rows() {
            max_cos = max_cos.max(dot(head.row(i), head.row(j)) / (norms[i] * norms[j]));
        }
    }
    Ok(max_cos.clamp(-1.0, 1.0).acos().to_degrees())
}

/// Per-class `‖μ̂_k‖₂` and `‖ŝ_k‖₂` of full-dataset features (`NaN` for absent classes).
pub fn class_norms(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let b = batch_stats(features, labels, num_classes, 2.0)?;
    let mut mu = vec![f64::NAN; num_classes];
    let mut s = vec![f64::NAN; num_classes];
    for c in &b.classes {
        mu[c.class] = c.mu_sq.sqrt();
        s[c.class] = c.s_sq.sqrt();
    }
    Ok((mu, s))
}

#[derive(Clone, Debug, PartialEq)]
pub struct Variability {
    pub ratio: f64,
    /// Classes left out for a zero mean or no samples.
    pub excluded: Vec<usize>,
}

/// `mean_y ‖ŝ_y‖₂ / ‖μ̂_y‖₂`.
pub fn variability_ratio(features: &Matrix, labels: &[usize], num_classes: usize) -> Result<Variability> {
    let (mu, s) = class_norms(features, labels, num_classes)?;
    let mut excluded = Vec::new();
    let mut sum = 0.0;
    let mut n = 0;
    for k in 0..num_classes {
        if mu[k].is_nan() || mu[k] == 0.0 {
            excluded.push(k);
        } else {
            sum += s[k] / mu[k];
            n += 1;
        }
    }
    Ok(Variability { ratio: if n > 0 { sum / n as f64 } else { f64::NAN }, excluded })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub num_samples: usize,
    pub overall_acc: f64,
    pub per_class_acc: Vec<Option<f64>>,
    pub partition: Partition,
    pub easy_acc: f64,
    pub medium_acc: f64,
    pub hard_acc: f64,
    pub m_o_avg: f64,
    pub m_o_easy: f64,
    pub m_o_medium: f64,
    pub m_o_hard: f64,
    pub m_c: f64,
    pub variability_ratio: f64,
    pub mu_norm: Vec<f64>,
    pub s_norm: Vec<f64>,
}

fn mean_over(values: &[f64], idx: &[usize]) -> f64 {
    idx.iter().map(|&i| values[i]).sum::<f64>() / idx.len() as f64
}

impl EvalReport {
    pub fn num_classes(&self) -> usize {
        self.per_class_acc.len()
    }

    /// Mean `‖ŝ‖₂` over hard classes minus the mean over easy classes.
    pub fn spread_gap(&self) -> f64 {
        mean_over(&self.s_norm, &self.partition.hard) - mean_over(&self.s_norm, &self.partition.easy)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        let rows = [
            ("num_samples", self.num_samples as f64),
            ("overall_acc", self.overall_acc),
            ("easy_acc", self.easy_acc),
            ("medium_acc", self.medium_acc),
            ("hard_acc", self.hard_acc),
            ("m_o_avg", self.m_o_avg),
            ("m_o_easy", self.m_o_easy),
            ("m_o_medium", self.m_o_medium),
            ("m_o_hard", self.m_o_hard),
            ("m_c", self.m_c),
            ("variability_ratio", self.variability_ratio),
            ("spread_gap", self.spread_gap()),
        ];
        for (k, v) in rows {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }

    /// `class_id,acc,mu_norm,s_norm,subset`; classes without samples have an empty accuracy.
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class_id,acc,mu_norm,s_norm,subset\n");
        for k in 0..self.num_classes() {
            let acc = self.per_class_acc[k].map(|a| a.to_string()).unwrap_or_default();
            let subset = self.partition.subset_of(k).unwrap_or("none");
            s.push_str(&format!("{k},{acc},{},{},{subset}\n", self.mu_norm[k], self.s_norm[k]));
        }
        s
    }
}

/// Evaluates from precomputed features and logits.
pub fn evaluate_outputs(features: &Matrix, logits: &Matrix, labels: &[usize], head: &Matrix) -> Result<EvalReport> {
    let k = check_aligned(logits, labels)?;
    ensure_input!(!labels.is_empty(), "empty dataset");
    ensure_input!(features.rows() == labels.len(), "feature rows do not match labels");
    let per_class = per_class_accuracy(logits, labels)?;
    let present: Vec<usize> = (0..k).filter(|&c| per_class[c].is_some()).collect();
    let acc_present: Vec<f64> = present.iter().map(|&c| per_class[c].expect("present")).collect();
    let partition = partition_subset(&present, &acc_present)?;
    let acc_full: Vec<f64> = per_class.iter().map(|a| a.unwrap_or(f64::NAN)).collect();

    let correct = logits.iter_rows().zip(labels).filter(|(z, &y)| argmax(z) == y).count();
    let margins = output_margins(logits, labels)?;
    let mut m_sum = vec![0.0; k];
    let mut m_cnt = vec![0usize; k];
    for (&m, &y) in margins.iter().zip(labels) {
        m_sum[y] += m;
        m_cnt[y] += 1;
    }
    let subset_margin = |idx: &[usize]| {
        let n: usize = idx.iter().map(|&c| m_cnt[c]).sum();
        idx.iter().map(|&c| m_sum[c]).sum::<f64>() / n as f64
    };
    let (mu_norm, s_norm) = class_norms(features, labels, k)?;

    Ok(EvalReport {
        num_samples: labels.len(),
        overall_acc: correct as f64 / labels.len() as f64,
        easy_acc: mean_over(&acc_full, &partition.easy),
        medium_acc: mean_over(&acc_full, &partition.medium),
        hard_acc: mean_over(&acc_full, &partition.hard),
        m_o_avg: margins.iter().sum::<f64>() / margins.len() as f64,
        m_o_easy: subset_margin(&partition.easy),
        m_o_medium: subset_margin(&partition.medium),
        m_o_hard: subset_margin(&partition.hard),
        m_c: classifier_margin(head)?,
        variability_ratio: variability_ratio(features, labels, k)?.ratio,
        per_class_acc: per_class,
        partition,
        mu_norm,
        s_norm,
    })
}

/// Features and logits of every sample, computed in parallel.
pub fn forward_dataset(model: &ModelParams, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
    let outs: Vec<(Vec<f64>, Vec<f64>)> = (0..inputs.rows())
        .into_par_iter()
        .map(|i| model.forward(inputs.row(i)).map(|c| (c.features, c.logits)))
        .collect::<Result<_>>()?;
    let d = model.arch().feature_dim;
    let k = model.arch().num_classes;
    let mut f = Vec::with_capacity(outs.len() * d);
    let mut z = Vec::with_capacity(outs.len() * k);
    for (a, b) in &outs {
        f.extend_from_slice(a);
        z.extend_from_slice(b);
    }
    Ok((Matrix::from_vec(outs.len(), d, f), Matrix::from_vec(outs.len(), k, z)))
}

pub fn evaluate(model: &ModelParams, data: &Dataset) -> Result<EvalReport> {
    ensure_input!(data.input_dim() == model.arch().input_dim, "dataset has d_in = {}, model expects {}", data.input_dim(), model.arch().input_dim);
    ensure_input!(data.num_classes == model.arch().num_classes, "dataset has K = {}, model has {}", data.num_classes, model.arch().num_classes);
    let (features, logits) = forward_dataset(model, &data.features)?;
    evaluate_outputs(&features, &logits, &data.labels, &model.head())
}
