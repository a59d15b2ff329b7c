//! Mini-batch SGD under the margin-regularized objective and its ablations.
//!
//! One step (for `mr2`):
//!
//! 1. forward the batch and compute per-class batch statistics of `φ(x)`;
//! 2. fold them into the EMA [`ClassStats`];
//! 3. derive `γ` from the EMA and `s̄` as the mean spread;
//! 4. evaluate the combined objective and take an SGD step.
//!
//! With `stats_update_order = after_loss`, steps 3 and 4 use the EMA from the
//! previous step and the fold happens afterwards. The very first step has no
//! previous EMA, so it seeds the statistics from the batch before the loss.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::Dataset;
use crate::error::{ensure_input, input_err, Error, Result};
use crate::eval_metrics::{evaluate, EvalReport};
use crate::feature_stats::{batch_stats, validate_p, ClassStats, DEFAULT_EMA_DECAY};
use crate::linalg::Matrix;
use crate::margin_schedule::{delta_margins, gamma_from_stats, DeltaKind, DeltaMargins, MarginVector};
use crate::model::{Activation, Architecture, EncoderKind, ForwardCache, HeadKind, ModelParams};
use crate::objective::{objective_from_caches, BatchLoss, LogitTerm, ObjectiveSpec, RepTerm};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    /// Plain cross-entropy, `γ ≡ 1`.
    Ce,
    /// Cross-entropy at uniform temperature `γ ≡ c̄`.
    UniformGamma,
    /// Statistics-driven `γ`, no representation term.
    GammaOnly,
    /// Cross-entropy plus the representation term with `s̄ = 0`.
    RepZeroMargin,
    /// Cross-entropy plus the representation term with the tracked `s̄`.
    RepOnly,
    /// Statistics-driven `γ` plus the representation term.
    Mr2,
    DeltaMargin(DeltaKind),
}

/// The six arms of the component analysis, baseline first.
pub const ABLATION_ARMS: [Objective; 6] =
    [Objective::Ce, Objective::UniformGamma, Objective::GammaOnly, Objective::RepZeroMargin, Objective::RepOnly, Objective::Mr2];

impl Objective {
    pub fn uses_rep(self) -> bool {
        matches!(self, Objective::RepZeroMargin | Objective::RepOnly | Objective::Mr2)
    }

    pub fn adaptive_gamma(self) -> bool {
        matches!(self, Objective::GammaOnly | Objective::Mr2)
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Objective::Ce => f.write_str("ce"),
            Objective::UniformGamma => f.write_str("uniform_gamma"),
            Objective::GammaOnly => f.write_str("gamma_only"),
            Objective::RepZeroMargin => f.write_str("rep_zero_margin"),
            Objective::RepOnly => f.write_str("rep_only"),
            Objective::Mr2 => f.write_str("mr2"),
            Objective::DeltaMargin(k) => write!(f, "delta_margin({})", k.name()),
        }
    }
}

impl FromStr for Objective {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "ce" => Objective::Ce,
            "uniform_gamma" => Objective::UniformGamma,
            "gamma_only" => Objective::GammaOnly,
            "rep_zero_margin" => Objective::RepZeroMargin,
            "rep_only" => Objective::RepOnly,
            "mr2" => Objective::Mr2,
            _ => {
                let kind = s
                    .strip_prefix("delta_margin(")
                    .and_then(|r| r.strip_suffix(')'))
                    .ok_or_else(|| input_err!("unknown objective {s:?}"))?;
                Objective::DeltaMargin(kind.parse()?)
            }
        })
    }
}

impl Serialize for Objective {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Objective {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsUpdateOrder {
    BeforeLoss,
    AfterLoss,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub objective: Objective,
    pub c_bar: f64,
    pub lambda: f64,
    pub ema_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub seed: u64,
    pub p: f64,
    pub stats_update_order: StatsUpdateOrder,
    /// Temperature of the logit-adjustment family.
    pub delta_tau: f64,
    pub encoder: EncoderKind,
    pub head: HeadKind,
    pub activation: Activation,
    pub hidden_dim: usize,
    pub feature_dim: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::Mr2,
            c_bar: 2.0,
            lambda: 0.5,
            ema_decay: DEFAULT_EMA_DECAY,
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_schedule: LrSchedule::Cosine,
            seed: 0,
            p: 2.0,
            stats_update_order: StatsUpdateOrder::BeforeLoss,
            delta_tau: 1.0,
            encoder: EncoderKind::Mlp,
            head: HeadKind::Linear,
            activation: Activation::Tanh,
            hidden_dim: 64,
            feature_dim: 32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.c_bar.is_finite() && self.c_bar > 0.0, "c_bar must be positive, got {}", self.c_bar);
        ensure_input!(self.lambda.is_finite() && self.lambda >= 0.0, "lambda must be non-negative, got {}", self.lambda);
        ensure_input!((0.0..1.0).contains(&self.ema_decay), "ema_decay must lie in [0, 1), got {}", self.ema_decay);
        ensure_input!(self.epochs >= 1, "epochs must be positive");
        ensure_input!(self.batch_size >= 1, "batch_size must be positive");
        if self.objective.uses_rep() {
            ensure_input!(self.batch_size >= 2, "objective {} needs batch_size >= 2 to form positive pairs", self.objective);
        }
        ensure_input!(self.lr.is_finite() && self.lr >= 0.0, "lr must be non-negative, got {}", self.lr);
        ensure_input!((0.0..1.0).contains(&self.momentum), "momentum must lie in [0, 1), got {}", self.momentum);
        ensure_input!(self.weight_decay.is_finite() && self.weight_decay >= 0.0, "weight_decay must be non-negative");
        ensure_input!(self.delta_tau.is_finite(), "delta_tau must be finite");
        validate_p(self.p)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let c: Self = toml::from_str(text).map_err(|e| Error::Format(format!("config: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable")
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        let feature_dim = if self.encoder == EncoderKind::Identity { input_dim } else { self.feature_dim };
        Architecture { input_dim, hidden_dim: self.hidden_dim, feature_dim, num_classes, encoder: self.encoder, head: self.head, activation: self.activation }
    }

    pub fn learning_rate(&self, step: usize, total_steps: usize) -> f64 {
        match self.lr_schedule {
            LrSchedule::Constant => self.lr,
            LrSchedule::Cosine => 0.5 * self.lr * (1.0 + (std::f64::consts::PI * step as f64 / total_steps.max(1) as f64).cos()),
        }
    }
}

/// Loss pieces and margins used for one batch.
#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub loss: BatchLoss,
    pub gamma: MarginVector,
    pub s_bar: f64,
}

/// Objective and gradient for one batch, updating `stats` in the configured order.
pub fn batch_objective(
    config: &TrainConfig,
    model: &ModelParams,
    stats: &mut ClassStats,
    delta: Option<&Matrix>,
    inputs: &Matrix,
    labels: &[usize],
) -> Result<StepOutcome> {
    let caches = inputs.iter_rows().map(|x| model.forward(x)).collect::<Result<Vec<ForwardCache>>>()?;
    let k = model.arch().num_classes;
    let feats = Matrix::from_rows(&caches.iter().map(|c| c.features.clone()).collect::<Vec<_>>());
    let batch = batch_stats(&feats, labels, k, config.p)?;
    let before = config.stats_update_order == StatsUpdateOrder::BeforeLoss || !stats.any_initialized();
    if before {
        stats.ema_update(&batch)?;
    }

    let gamma = match config.objective {
        Objective::Ce | Objective::RepZeroMargin | Objective::RepOnly | Objective::DeltaMargin(_) => MarginVector::uniform(k, 1.0)?,
        Objective::UniformGamma => MarginVector::uniform(k, config.c_bar)?,
        Objective::GammaOnly | Objective::Mr2 => gamma_from_stats(stats, config.c_bar)?,
    };
    let s_bar = stats.mean_deviation()?;
    let rep = match config.objective {
        Objective::RepZeroMargin => Some(RepTerm { lambda: config.lambda, s_bar: 0.0 }),
        Objective::RepOnly | Objective::Mr2 => Some(RepTerm { lambda: config.lambda, s_bar }),
        _ => None,
    };
    let logit = match (config.objective, delta) {
        (Objective::DeltaMargin(_), Some(d)) => LogitTerm::Delta(d),
        (Objective::DeltaMargin(_), None) => return Err(input_err!("delta-margin objective needs a margin matrix")),
        _ => LogitTerm::Margin(&gamma),
    };
    let loss = objective_from_caches(model, &caches, labels, &ObjectiveSpec { logit, rep }, true)?;

    if !before {
        stats.ema_update(&batch)?;
    }
    Ok(StepOutcome { loss, gamma, s_bar })
}

/// Class-stratified batches: each class's samples are shuffled and paired, the
/// pairs are shuffled globally, and consecutive pairs fill the batches.
pub fn stratified_batches(labels: &[usize], num_classes: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); num_classes];
    for (i, &y) in labels.iter().enumerate() {
        by_class[y].push(i);
    }
    let mut pairs: Vec<Vec<usize>> = Vec::new();
    for mut idx in by_class {
        idx.shuffle(rng);
        pairs.extend(idx.chunks(2).map(<[usize]>::to_vec));
    }
    pairs.shuffle(rng);
    let flat: Vec<usize> = pairs.into_iter().flatten().collect();
    flat.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub logit_term: f64,
    pub rep_term: f64,
    pub s_bar: f64,
    /// EMA `‖ŝ_k‖₂` at the end of the epoch.
    pub s_norm: Vec<f64>,
    pub gamma: Vec<f64>,
    pub test_acc: f64,
    pub test_easy_acc: f64,
    pub test_hard_acc: f64,
    pub test_m_o: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let k = self.records.first().map_or(0, |r| r.gamma.len());
        let mut s = String::from("epoch,lr,loss,logit_term,rep_term,s_bar,test_acc,test_easy_acc,test_hard_acc,test_m_o");
        for c in 0..k {
            s.push_str(&format!(",s_norm_{c}"));
        }
        for c in 0..k {
            s.push_str(&format!(",gamma_{c}"));
        }
        s.push('\n');
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}",
                r.epoch, r.lr, r.loss, r.logit_term, r.rep_term, r.s_bar, r.test_acc, r.test_easy_acc, r.test_hard_acc, r.test_m_o
            ));
            for v in r.s_norm.iter().chain(&r.gamma) {
                s.push_str(&format!(",{v}"));
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: ModelParams,
    pub stats: ClassStats,
    /// Margins in effect at the last step.
    pub gamma: MarginVector,
    pub log: TrainLog,
}

fn check_datasets(train_set: &Dataset, test_set: &Dataset) -> Result<()> {
    ensure_input!(!train_set.is_empty() && !test_set.is_empty(), "train and test sets must be non-empty");
    ensure_input!(
        train_set.input_dim() == test_set.input_dim() && train_set.num_classes == test_set.num_classes,
        "train (d_in = {}, K = {}) and test (d_in = {}, K = {}) sets disagree",
        train_set.input_dim(),
        train_set.num_classes,
        test_set.input_dim(),
        test_set.num_classes
    );
    Ok(())
}

pub fn train(config: &TrainConfig, train_set: &Dataset, test_set: &Dataset) -> Result<TrainOutcome> {
    config.validate()?;
    check_datasets(train_set, test_set)?;
    let k = train_set.num_classes;
    let arch = config.architecture(train_set.input_dim(), k);
    let mut model = ModelParams::init(arch, config.seed)?;
    let mut stats = ClassStats::new(k, arch.feature_dim, config.p, config.ema_decay)?;
    let delta = match config.objective {
        Objective::DeltaMargin(kind) => Some(delta_margins(&DeltaMargins::from_labels(kind, &train_set.labels, k, config.delta_tau)?)?),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(1);

    let n_params = model.num_params();
    let decay_mask: Vec<f64> = {
        let mut m = vec![config.weight_decay; n_params];
        if arch.head == HeadKind::Cosine {
            m[model.head_range()].iter_mut().for_each(|v| *v = 0.0);
        }
        m
    };
    let mut velocity = vec![0.0; n_params];
    let batches_per_epoch = train_set.len().div_ceil(config.batch_size);
    let total_steps = config.epochs * batches_per_epoch;
    let mut step = 0;
    let mut gamma = MarginVector::uniform(k, 1.0)?;
    let mut log = TrainLog::default();

    for epoch in 0..config.epochs {
        let batches = stratified_batches(&train_set.labels, k, config.batch_size, &mut rng);
        let (mut loss, mut logit_term, mut rep_term, mut s_bar) = (0.0, 0.0, 0.0, 0.0);
        let mut lr = config.lr;
        for idx in &batches {
            lr = config.learning_rate(step, total_steps);
            let inputs = train_set.features.select_rows(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train_set.labels[i]).collect();
            let out = batch_objective(config, &model, &mut stats, delta.as_ref(), &inputs, &labels).map_err(|e| match e {
                Error::Numeric(m) => Error::Numeric(format!("epoch {epoch}, step {step}: {m}")),
                other => other,
            })?;
            let grad = out.loss.grad.as_ref().expect("gradient requested");
            let theta = model.as_flat_mut();
            for i in 0..n_params {
                velocity[i] = config.momentum * velocity[i] + grad[i] + decay_mask[i] * theta[i];
                theta[i] -= lr * velocity[i];
            }
            if theta.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("epoch {epoch}, step {step}: parameters diverged (loss {})", out.loss.value)));
            }
            loss += out.loss.value;
            logit_term += out.loss.logit_term;
            rep_term += out.loss.rep_term;
            s_bar = out.s_bar;
            gamma = out.gamma;
            step += 1;
        }
        let nb = batches.len() as f64;
        let report = evaluate(&model, test_set)?;
        log.records.push(EpochRecord {
            epoch,
            lr,
            loss: loss / nb,
            logit_term: logit_term / nb,
            rep_term: rep_term / nb,
            s_bar,
            s_norm: stats.s_sq().iter().map(|v| v.sqrt()).collect(),
            gamma: gamma.gamma().to_vec(),
            test_acc: report.overall_acc,
            test_easy_acc: report.easy_acc,
            test_hard_acc: report.hard_acc,
            test_m_o: report.m_o_avg,
        });
    }
    Ok(TrainOutcome { model, stats, gamma, log })
}

#[derive(Clone, Debug)]
pub struct ArmResult {
    pub objective: Objective,
    pub seed: u64,
    pub report: EvalReport,
}

/// Trains every arm for every seed, in parallel, and evaluates on `test_set`.
/// Results come back ordered by arm, then seed.
pub fn ablation_suite(base: &TrainConfig, arms: &[Objective], seeds: &[u64], train_set: &Dataset, test_set: &Dataset) -> Result<Vec<ArmResult>> {
    base.validate()?;
    check_datasets(train_set, test_set)?;
    let jobs: Vec<(Objective, u64)> = arms.iter().flat_map(|&a| seeds.iter().map(move |&s| (a, s))).collect();
    jobs.into_par_iter()
        .map(|(objective, seed)| {
            let config = TrainConfig { objective, seed, ..base.clone() };
            let out = train(&config, train_set, test_set)?;
            Ok(ArmResult { objective, seed, report: evaluate(&out.model, test_set)? })
        })
        .collect()
}

/// Seed-averaged summary row per arm.
#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub objective: Objective,
    pub runs: usize,
    pub overall_acc: f64,
    pub easy_acc: f64,
    pub medium_acc: f64,
    pub hard_acc: f64,
    pub m_o_avg: f64,
    pub m_c: f64,
    pub spread_gap: f64,
}

pub fn summarize(results: &[ArmResult]) -> Vec<ArmSummary> {
    let mut arms: Vec<Objective> = Vec::new();
    for r in results {
        if !arms.contains(&r.objective) {
            arms.push(r.objective);
        }
    }
    arms.into_iter()
        .map(|objective| {
            let rs: Vec<&EvalReport> = results.iter().filter(|r| r.objective == objective).map(|r| &r.report).collect();
            let n = rs.len() as f64;
            let mean = |f: &dyn Fn(&EvalReport) -> f64| rs.iter().map(|r| f(r)).sum::<f64>() / n;
            ArmSummary {
                objective,
                runs: rs.len(),
                overall_acc: mean(&|r| r.overall_acc),
                easy_acc: mean(&|r| r.easy_acc),
                medium_acc: mean(&|r| r.medium_acc),
                hard_acc: mean(&|r| r.hard_acc),
                m_o_avg: mean(&|r| r.m_o_avg),
                m_c: mean(&|r| r.m_c),
                spread_gap: mean(&|r| r.spread_gap()),
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[ArmSummary]) -> String {
    let mut s = String::from("objective,runs,overall_acc,easy_acc,medium_acc,hard_acc,m_o_avg,m_c,spread_gap\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.objective, r.runs, r.overall_acc, r.easy_acc, r.medium_acc, r.hard_acc, r.m_o_avg, r.m_c, r.spread_gap
        ));
    }
    s
}
