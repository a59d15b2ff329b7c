//! Synthetic class-balanced Gaussian mixtures with a per-class spread ramp,
//! and the `MR2D` dataset file format.
//!
//! Class `k` is drawn from `N(μ_k, σ_k² I)` with `σ_k` linearly spaced from
//! `sigma_min` (class 0) to `sigma_max` (class K−1). The means are orthonormal
//! directions scaled by `mean_scale`, so every class has the same mean norm and
//! spread is the only source of difficulty.
//!
//! File layout (little-endian):
//!
//! ```text
//! "MR2D" | version u32 | N u64 | d_in u32 | K u32 | labels [u16; N] | features [f32; N*d_in]
//! ```

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::{ensure_input, input_err, Error, Result};
use crate::linalg::{dot, sq_norm, Matrix};

const MAGIC: &[u8; 4] = b"MR2D";
const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub input_dim: usize,
    pub samples_per_class: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub mean_scale: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.num_classes >= 1 && self.num_classes <= u16::MAX as usize + 1, "num_classes must be in [1, 65536]");
        ensure_input!(self.samples_per_class >= 1, "samples_per_class must be positive");
        ensure_input!(
            self.input_dim >= self.num_classes,
            "orthonormal class means need input_dim >= num_classes ({} < {})",
            self.input_dim,
            self.num_classes
        );
        for (name, v) in [("sigma_min", self.sigma_min), ("sigma_max", self.sigma_max), ("mean_scale", self.mean_scale)] {
            ensure_input!(v.is_finite() && v > 0.0, "{name} must be positive, got {v}");
        }
        ensure_input!(self.sigma_min <= self.sigma_max, "sigma_min exceeds sigma_max");
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let s: Self = toml::from_str(text).map_err(|e| Error::Format(format!("synth spec: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    /// `σ_k` for every class.
    pub fn sigmas(&self) -> Vec<f64> {
        let k = self.num_classes;
        if k == 1 {
            return vec![self.sigma_min];
        }
        (0..k).map(|c| self.sigma_min + (self.sigma_max - self.sigma_min) * c as f64 / (k - 1) as f64).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Vec<usize>, num_classes: usize, split: Split) -> Result<Self> {
        ensure_input!(features.rows() == labels.len(), "{} feature rows but {} labels", features.rows(), labels.len());
        ensure_input!(num_classes >= 1, "num_classes must be positive");
        if let Some(y) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(input_err!("label {y} out of range for {num_classes} classes"));
        }
        Ok(Self { features, labels, num_classes, split })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.features.cols()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &y in &self.labels {
            c[y] += 1;
        }
        c
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        ensure_input!(!self.is_empty(), "refusing to write an empty dataset");
        ensure_input!(self.num_classes <= u16::MAX as usize + 1, "too many classes for the u16 label field");
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        w.u64(self.len() as u64);
        w.u32(self.input_dim() as u32);
        w.u32(self.num_classes as u32);
        for &y in &self.labels {
            w.u16(y as u16);
        }
        for &v in self.features.as_slice() {
            w.f32(v as f32);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8], split: Split) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.expect_magic(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported dataset version {version}")));
        }
        let n = usize::try_from(r.u64()?).map_err(|_| Error::Format("sample count overflows".into()))?;
        let d = r.u32()? as usize;
        let k = r.u32()? as usize;
        if n == 0 || d == 0 || k == 0 {
            return Err(Error::Format(format!("degenerate header: N = {n}, d_in = {d}, K = {k}")));
        }
        let need = n.checked_mul(2 + 4 * d).ok_or_else(|| Error::Format("header sizes overflow".into()))?;
        if need != r.remaining() {
            return Err(Error::Format(format!("header declares {need} payload bytes, file has {}", r.remaining())));
        }
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let y = r.u16()? as usize;
            if y >= k {
                return Err(Error::Format(format!("label {y} at row {i} out of range for {k} classes")));
            }
            labels.push(y);
        }
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            let v = r.f32()?;
            if !v.is_finite() {
                return Err(Error::Format("non-finite feature value".into()));
            }
            data.push(v as f64);
        }
        r.finish()?;
        Ok(Self { features: Matrix::from_vec(n, d, data), labels, num_classes: k, split })
    }

    pub fn read(path: &Path, split: Split) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, split)
    }
}

fn gaussian_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| StandardNormal.sample(rng)).collect()
}

/// Gram-Schmidt on Gaussian draws, rows scaled to norm `scale`.
fn orthonormal_means(k: usize, d: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(k);
    while basis.len() < k {
        let mut v = gaussian_row(rng, d);
        for b in &basis {
            let c = dot(&v, b);
            v.iter_mut().zip(b).for_each(|(x, bi)| *x -= c * bi);
        }
        let n = sq_norm(&v).sqrt();
        // a draw almost inside the current span is redrawn
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    let mut m = Matrix::from_rows(&basis);
    m.as_mut_slice().iter_mut().for_each(|x| *x *= scale);
    m
}

fn sample_split(spec: &SynthSpec, means: &Matrix, sigmas: &[f64], stream_base: u64, split: Split) -> Dataset {
    let (k, d, m) = (spec.num_classes, spec.input_dim, spec.samples_per_class);
    let mut data = Vec::with_capacity(k * m * d);
    let mut labels = Vec::with_capacity(k * m);
    for (c, &sigma) in sigmas.iter().enumerate().take(k) {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(stream_base + c as u64);
        for _ in 0..m {
            for mu in means.row(c) {
                let z: f64 = StandardNormal.sample(&mut rng);
                // stored as f32 on disk, so generate values that survive the round trip
                data.push((mu + sigma * z) as f32 as f64);
            }
            labels.push(c);
        }
    }
    Dataset { features: Matrix::from_vec(k * m, d, data), labels, num_classes: k, split }
}

/// Train and test sets drawn i.i.d. from the same class conditionals.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, Dataset)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let means = orthonormal_means(spec.num_classes, spec.input_dim, spec.mean_scale, &mut rng);
    let sigmas = spec.sigmas();
    let k = spec.num_classes as u64;
    let train = sample_split(spec, &means, &sigmas, 1, Split::Train);
    let test = sample_split(spec, &means, &sigmas, 1 + k, Split::Test);
    Ok((train, test))
}
