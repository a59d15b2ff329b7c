//! Per-class feature statistics: batch estimates and their exponential moving averages.
//!
//! For each class `k` we track three scalars computed from the encoder features
//! of that class:
//!
//! * `mu_sq[k]`  squared L2 norm of the class mean, `‖μ̂_k‖²`
//! * `s_sq[k]`   mean squared deviation from the class mean, `‖ŝ_k‖²`
//! * `r_sq_p[k]` average squared L_p norm of the features, `r²_{k,p}`
//!
//! A class that has never been observed is flagged uninitialized and is ignored
//! by [`ClassStats::mean_deviation`] and by the margin scheduler.

use crate::binio::{Reader, Writer};
use crate::error::{ensure_input, Error, Result};
use crate::linalg::{lp_norm, sq_dist, sq_norm, Matrix};

/// Decay used for every run unless overridden.
pub const DEFAULT_EMA_DECAY: f64 = 0.9;

const SECTION_MAGIC: &[u8; 4] = b"MR2S";
const SECTION_VERSION: u32 = 1;

/// Statistics of one class within one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassBatchStat {
    pub class: usize,
    pub count: usize,
    pub mu_sq: f64,
    pub s_sq: f64,
    pub r_sq_p: f64,
}

/// Output of [`batch_stats`]: one entry per class present in the batch, ascending by class.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub p: f64,
    pub classes: Vec<ClassBatchStat>,
}

impl BatchStats {
    pub fn get(&self, class: usize) -> Option<&ClassBatchStat> {
        self.classes.iter().find(|c| c.class == class)
    }
}

pub(crate) fn validate_p(p: f64) -> Result<()> {
    ensure_input!(p >= 1.0 && !p.is_nan(), "norm exponent p must lie in [1, inf], got {p}");
    Ok(())
}

/// Batch-local per-class statistics.
///
/// `features` is `N_b × d`; `labels[i]` is the class of row `i`. Means and
/// deviations are two-pass, so the result is exact up to rounding even for
/// features far from the origin.
pub fn batch_stats(features: &Matrix, labels: &[usize], num_classes: usize, p: f64) -> Result<BatchStats> {
    validate_p(p)?;
    ensure_input!(features.rows() >= 1, "empty batch");
    ensure_input!(
        features.rows() == labels.len(),
        "batch has {} feature rows but {} labels",
        features.rows(),
        labels.len()
    );
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::Input(format!("label {bad} out of range for {num_classes} classes")));
    }
    let d = features.cols();

    let mut counts = vec![0usize; num_classes];
    let mut sums = vec![vec![0.0; d]; num_classes];
    let mut r_acc = vec![0.0; num_classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        counts[y] += 1;
        for (s, v) in sums[y].iter_mut().zip(row) {
            *s += v;
        }
        let n = lp_norm(row, p);
        r_acc[y] += n * n;
    }
    let means: Vec<Vec<f64>> = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &c)| if c == 0 { s } else { s.into_iter().map(|v| v / c as f64).collect() })
        .collect();

    let mut dev = vec![0.0; num_classes];
    for (row, &y) in features.iter_rows().zip(labels) {
        dev[y] += sq_dist(row, &means[y]);
    }

    let classes = (0..num_classes)
        .filter(|&k| counts[k] > 0)
        .map(|k| {
            let n = counts[k] as f64;
            ClassBatchStat { class: k, count: counts[k], mu_sq: sq_norm(&means[k]), s_sq: dev[k] / n, r_sq_p: r_acc[k] / n }
        })
        .collect();
    Ok(BatchStats { num_classes, feature_dim: d, p, classes })
}

/// EMA state for `K` classes of `d`-dimensional features.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassStats {
    num_classes: usize,
    feature_dim: usize,
    p: f64,
    decay: f64,
    mu_sq: Vec<f64>,
    s_sq: Vec<f64>,
    r_sq_p: Vec<f64>,
    initialized: Vec<bool>,
}

impl ClassStats {
    pub fn new(num_classes: usize, feature_dim: usize, p: f64, decay: f64) -> Result<Self> {
        ensure_input!(num_classes >= 1, "need at least one class");
        ensure_input!(feature_dim >= 1, "feature dimension must be positive");
        validate_p(p)?;
        ensure_input!((0.0..1.0).contains(&decay), "EMA decay must lie in [0, 1), got {decay}");
        Ok(Self {
            num_classes,
            feature_dim,
            p,
            decay,
            mu_sq: vec![0.0; num_classes],
            s_sq: vec![0.0; num_classes],
            r_sq_p: vec![0.0; num_classes],
            initialized: vec![false; num_classes],
        })
    }

    /// Statistics computed in one shot from a full feature set (no averaging over time).
    pub fn from_features(features: &Matrix, labels: &[usize], num_classes: usize, p: f64) -> Result<Self> {
        let batch = batch_stats(features, labels, num_classes, p)?;
        let mut stats = Self::new(num_classes, features.cols(), p, 0.0)?;
        stats.ema_update(&batch)?;
        Ok(stats)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }
    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }
    pub fn p(&self) -> f64 {
        self.p
    }
    pub fn decay(&self) -> f64 {
        self.decay
    }
    pub fn mu_sq(&self) -> &[f64] {
        &self.mu_sq
    }
    pub fn s_sq(&self) -> &[f64] {
        &self.s_sq
    }
    pub fn r_sq_p(&self) -> &[f64] {
        &self.r_sq_p
    }
    pub fn initialized(&self) -> &[bool] {
        &self.initialized
    }
    pub fn any_initialized(&self) -> bool {
        self.initialized.iter().any(|&b| b)
    }

    /// `‖μ̂_k‖² + ‖ŝ_k‖²` per class: the L2 spread driving the margin schedule.
    pub fn alpha(&self) -> Vec<f64> {
        self.mu_sq.iter().zip(&self.s_sq).map(|(m, s)| m + s).collect()
    }

    /// Folds one batch into the averages. A class seen for the first time takes
    /// the batch value directly; classes absent from the batch are left alone.
    pub fn ema_update(&mut self, batch: &BatchStats) -> Result<()> {
        ensure_input!(
            batch.num_classes == self.num_classes && batch.feature_dim == self.feature_dim,
            "batch stats shape (K={}, d={}) does not match tracker (K={}, d={})",
            batch.num_classes,
            batch.feature_dim,
            self.num_classes,
            self.feature_dim
        );
        ensure_input!(
            batch.p == self.p || (batch.p.is_infinite() && self.p.is_infinite()),
            "batch stats use p={} but tracker uses p={}",
            batch.p,
            self.p
        );
        let a = self.decay;
        for c in &batch.classes {
            let k = c.class;
            if self.initialized[k] {
                self.mu_sq[k] = a * self.mu_sq[k] + (1.0 - a) * c.mu_sq;
                self.s_sq[k] = a * self.s_sq[k] + (1.0 - a) * c.s_sq;
                self.r_sq_p[k] = a * self.r_sq_p[k] + (1.0 - a) * c.r_sq_p;
            } else {
                self.mu_sq[k] = c.mu_sq;
                self.s_sq[k] = c.s_sq;
                self.r_sq_p[k] = c.r_sq_p;
                self.initialized[k] = true;
            }
        }
        Ok(())
    }

    /// `s̄`: average of `‖ŝ_k‖²` over initialized classes.
    pub fn mean_deviation(&self) -> Result<f64> {
        let (sum, n) = self
            .s_sq
            .iter()
            .zip(&self.initialized)
            .filter(|(_, &init)| init)
            .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
        if n == 0 {
            return Err(Error::State("no class has been observed yet".into()));
        }
        Ok(sum / n as f64)
    }

    pub(crate) fn write_section(&self, w: &mut Writer) {
        w.bytes(SECTION_MAGIC);
        w.u32(SECTION_VERSION);
        w.u32(self.num_classes as u32);
        w.u32(self.feature_dim as u32);
        w.f64(self.p);
        w.f64(self.decay);
        w.f64s(&self.mu_sq);
        w.f64s(&self.s_sq);
        w.f64s(&self.r_sq_p);
        for &b in &self.initialized {
            w.u8(b as u8);
        }
    }

    pub(crate) fn read_section(r: &mut Reader<'_>) -> Result<Self> {
        r.expect_magic(SECTION_MAGIC)?;
        let version = r.u32()?;
        if version != SECTION_VERSION {
            return Err(Error::Format(format!("unsupported stats section version {version}")));
        }
        let k = r.u32()? as usize;
        let d = r.u32()? as usize;
        let p = r.f64()?;
        let decay = r.f64()?;
        let mut stats = Self::new(k, d, p, decay).map_err(|e| Error::Format(format!("stats header: {e}")))?;
        stats.mu_sq = r.f64s(k)?;
        stats.s_sq = r.f64s(k)?;
        stats.r_sq_p = r.f64s(k)?;
        for i in 0..k {
            stats.initialized[i] = match r.u8()? {
                0 => false,
                1 => true,
                b => return Err(Error::Format(format!("bad initialized flag {b}"))),
            };
        }
        if stats.mu_sq.iter().chain(&stats.s_sq).chain(&stats.r_sq_p).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Format("stats section holds negative or non-finite values".into()));
        }
        Ok(stats)
    }

    /// Standalone encoding of the stats section.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        self.write_section(&mut w);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        let s = Self::read_section(&mut r)?;
        r.finish()?;
        Ok(s)
    }
}

/// Mean squared deviation of a point set from its own mean.
pub fn mean_sq_deviation(points: &Matrix) -> f64 {
    let n = points.rows();
    if n == 0 {
        return 0.0;
    }
    let mut mean = vec![0.0; points.cols()];
    for row in points.iter_rows() {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    points.iter_rows().map(|r| sq_dist(r, &mean)).sum::<f64>() / n as f64
}

/// `(1/n²) Σ_{i,j} ‖x_i − x_j‖²`, self-pairs included.
pub fn mean_pairwise_sq_distance(points: &Matrix) -> f64 {
    let n = points.rows();
    if n == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n {
            total += sq_dist(points.row(i), points.row(j));
        }
    }
    total / (n * n) as f64
}
