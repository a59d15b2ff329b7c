//! A small differentiable classifier with hand-written backpropagation.
//!
//! The encoder `φ` is the identity, an affine map, or a one-hidden-layer MLP
//! `φ(x) = W₂ σ(W₁x + b₁) + b₂` with a smooth activation `σ`. The head is either
//! linear (`z_k = w_kᵀφ`) or cosine (`z_k = ŵ_kᵀφ̂` with both vectors normalized).
//!
//! Parameters live in one flat `Vec<f64>`; gradients use the same layout so the
//! optimizer and the finite-difference checker can treat the model as a vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_input, input_err, Error, Result};
use crate::linalg::{dot, lp_norm, sq_norm, Matrix};

/// Denominator guard for the cosine head normalization.
pub const COSINE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Identity,
    Linear,
    Mlp,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    Linear,
    Cosine,
}

/// Smooth activations only, so finite differences are clean everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Softplus,
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Softplus => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

macro_rules! code_enum {
    ($t:ty { $($v:path = $c:expr),* $(,)? }) => {
        impl $t {
            pub(crate) fn code(self) -> u8 {
                match self { $($v => $c),* }
            }
            pub(crate) fn from_code(c: u8) -> Result<Self> {
                match c {
                    $($c => Ok($v),)*
                    _ => Err(Error::Format(format!(concat!("unknown ", stringify!($t), " code {}"), c))),
                }
            }
        }
    };
}

code_enum!(EncoderKind { EncoderKind::Identity = 0, EncoderKind::Linear = 1, EncoderKind::Mlp = 2 });
code_enum!(HeadKind { HeadKind::Linear = 0, HeadKind::Cosine = 1 });
code_enum!(Activation { Activation::Softplus = 0, Activation::Tanh = 1 });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    /// Width of the hidden layer; ignored unless the encoder is an MLP.
    pub hidden_dim: usize,
    /// Dimension of `φ(x)`; must equal `input_dim` for the identity encoder.
    pub feature_dim: usize,
    pub num_classes: usize,
    pub encoder: EncoderKind,
    pub head: HeadKind,
    pub activation: Activation,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        ensure_input!(self.input_dim >= 1 && self.feature_dim >= 1, "dimensions must be positive");
        ensure_input!(self.num_classes >= 1, "need at least one class");
        if self.encoder == EncoderKind::Identity {
            ensure_input!(
                self.feature_dim == self.input_dim,
                "identity encoder needs feature_dim == input_dim ({} != {})",
                self.feature_dim,
                self.input_dim
            );
        }
        if self.encoder == EncoderKind::Mlp {
            ensure_input!(self.hidden_dim >= 1, "MLP encoder needs a positive hidden_dim");
        }
        Ok(())
    }

    fn layout(&self) -> Layout {
        let (d_in, h, d, k) = (self.input_dim, self.hidden_dim, self.feature_dim, self.num_classes);
        let mut off = 0;
        let mut take = |n: usize| {
            let r = off..off + n;
            off += n;
            r
        };
        let (w1, b1, w2, b2) = match self.encoder {
            EncoderKind::Identity => (0..0, 0..0, 0..0, 0..0),
            EncoderKind::Linear => (take(d * d_in), take(d), 0..0, 0..0),
            EncoderKind::Mlp => (take(h * d_in), take(h), take(d * h), take(d)),
        };
        let head = take(k * d);
        Layout { w1, b1, w2, b2, head, len: off }
    }

    pub fn num_params(&self) -> usize {
        self.layout().len
    }
}

#[derive(Clone, Debug)]
struct Layout {
    w1: std::ops::Range<usize>,
    b1: std::ops::Range<usize>,
    w2: std::ops::Range<usize>,
    b2: std::ops::Range<usize>,
    head: std::ops::Range<usize>,
    len: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: Architecture,
    data: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    pub input: Vec<f64>,
    /// Hidden pre-activations (MLP only).
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub features: Vec<f64>,
    pub logits: Vec<f64>,
}

impl ModelParams {
    /// Uniform `[-a, a]` with `a = 1/√fan_in` for every weight and bias.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let lay = arch.layout();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; lay.len];
        let hidden_fan = arch.hidden_dim.max(1) as f64;
        let fans = [
            (&lay.w1, arch.input_dim as f64),
            (&lay.b1, arch.input_dim as f64),
            (&lay.w2, hidden_fan),
            (&lay.b2, hidden_fan),
            (&lay.head, arch.feature_dim as f64),
        ];
        for (range, fan_in) in fans {
            let a = 1.0 / fan_in.sqrt();
            for v in &mut data[range.clone()] {
                *v = rng.random_range(-a..=a);
            }
        }
        Ok(Self { arch, data })
    }

    pub fn from_flat(arch: Architecture, data: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        ensure_input!(data.len() == arch.num_params(), "expected {} parameters, got {}", arch.num_params(), data.len());
        ensure_input!(data.iter().all(|v| v.is_finite()), "parameters must be finite");
        Ok(Self { arch, data })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }
    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
    pub fn as_flat_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn num_params(&self) -> usize {
        self.data.len()
    }

    /// Head weights as a `K × d` matrix (raw, not normalized).
    pub fn head(&self) -> Matrix {
        Matrix::from_vec(self.arch.num_classes, self.arch.feature_dim, self.data[self.arch.layout().head].to_vec())
    }

    /// Replaces the head weights; used by tests and by callers building fixed models.
    pub fn set_head(&mut self, head: &Matrix) -> Result<()> {
        ensure_input!(
            head.rows() == self.arch.num_classes && head.cols() == self.arch.feature_dim,
            "head must be {}x{}",
            self.arch.num_classes,
            self.arch.feature_dim
        );
        let r = self.arch.layout().head;
        self.data[r].copy_from_slice(head.as_slice());
        Ok(())
    }

    /// Flat-index range of the head weights.
    pub fn head_range(&self) -> std::ops::Range<usize> {
        self.arch.layout().head
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardCache> {
        let a = &self.arch;
        ensure_input!(x.len() == a.input_dim, "input has dimension {} but model expects {}", x.len(), a.input_dim);
        if x.iter().any(|v| !v.is_finite()) {
            return Err(input_err!("non-finite input"));
        }
        let lay = a.layout();
        let p = &self.data;
        let mut hidden_pre = Vec::new();
        let mut hidden = Vec::new();
        let features = match a.encoder {
            EncoderKind::Identity => x.to_vec(),
            EncoderKind::Linear => affine(&p[lay.w1], &p[lay.b1], x),
            EncoderKind::Mlp => {
                hidden_pre = affine(&p[lay.w1.clone()], &p[lay.b1.clone()], x);
                hidden = hidden_pre.iter().map(|&v| a.activation.apply(v)).collect();
                affine(&p[lay.w2], &p[lay.b2], &hidden)
            }
        };
        let head = &p[lay.head];
        let logits = match a.head {
            HeadKind::Linear => head.chunks_exact(a.feature_dim).map(|w| dot(w, &features)).collect(),
            HeadKind::Cosine => {
                let fn_ = sq_norm(&features).sqrt() + COSINE_EPS;
                head.chunks_exact(a.feature_dim)
                    .map(|w| dot(w, &features) / ((sq_norm(w).sqrt() + COSINE_EPS) * fn_))
                    .collect()
            }
        };
        let cache = ForwardCache { input: x.to_vec(), hidden_pre, hidden, features, logits };
        if cache.features.iter().chain(&cache.logits).any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite activation in forward pass".into()));
        }
        Ok(cache)
    }

    /// Features and logits for every row of `inputs`.
    pub fn forward_batch(&self, inputs: &Matrix) -> Result<(Matrix, Matrix)> {
        let mut feats = Vec::with_capacity(inputs.rows() * self.arch.feature_dim);
        let mut logits = Vec::with_capacity(inputs.rows() * self.arch.num_classes);
        for row in inputs.iter_rows() {
            let c = self.forward(row)?;
            feats.extend(c.features);
            logits.extend(c.logits);
        }
        Ok((
            Matrix::from_vec(inputs.rows(), self.arch.feature_dim, feats),
            Matrix::from_vec(inputs.rows(), self.arch.num_classes, logits),
        ))
    }

    /// Accumulates `∂L/∂θ` into `grad` given the upstream gradients with respect
    /// to this sample's logits and features (either may be absent).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_logits: Option<&[f64]>,
        grad_features: Option<&[f64]>,
        grad: &mut [f64],
    ) -> Result<()> {
        let a = &self.arch;
        ensure_input!(grad.len() == self.data.len(), "gradient buffer has length {} but model has {} parameters", grad.len(), self.data.len());
        if let Some(g) = grad_logits {
            ensure_input!(g.len() == a.num_classes, "logit gradient has length {}, expected {}", g.len(), a.num_classes);
        }
        if let Some(g) = grad_features {
            ensure_input!(g.len() == a.feature_dim, "feature gradient has length {}, expected {}", g.len(), a.feature_dim);
        }
        let lay = a.layout();
        let d = a.feature_dim;
        let phi = &cache.features;
        let mut g_phi = grad_features.map_or_else(|| vec![0.0; d], <[f64]>::to_vec);

        if let Some(gz) = grad_logits {
            let head = &self.data[lay.head.clone()];
            match a.head {
                HeadKind::Linear => {
                    let gh = &mut grad[lay.head.clone()];
                    for (k, &g) in gz.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let w = &head[k * d..(k + 1) * d];
                        for i in 0..d {
                            gh[k * d + i] += g * phi[i];
                            g_phi[i] += g * w[i];
                        }
                    }
                }
                HeadKind::Cosine => {
                    let phi_hat = normalize(phi);
                    let mut g_phi_hat = vec![0.0; d];
                    for (k, &g) in gz.iter().enumerate() {
                        if g == 0.0 {
                            continue;
                        }
                        let w = &head[k * d..(k + 1) * d];
                        let w_hat = normalize(w);
                        for i in 0..d {
                            g_phi_hat[i] += g * w_hat[i];
                        }
                        let g_w_hat: Vec<f64> = phi_hat.iter().map(|v| g * v).collect();
                        let g_w = normalize_backward(w, &g_w_hat);
                        for i in 0..d {
                            grad[lay.head.start + k * d + i] += g_w[i];
                        }
                    }
                    let back = normalize_backward(phi, &g_phi_hat);
                    for i in 0..d {
                        g_phi[i] += back[i];
                    }
                }
            }
        }

        match a.encoder {
            EncoderKind::Identity => {}
            EncoderKind::Linear => affine_backward(&cache.input, &g_phi, &lay.w1, &lay.b1, grad),
            EncoderKind::Mlp => {
                let h = a.hidden_dim;
                let w2 = &self.data[lay.w2.clone()];
                affine_backward(&cache.hidden, &g_phi, &lay.w2, &lay.b2, grad);
                let mut g_pre = vec![0.0; h];
                for (r, &gp) in g_phi.iter().enumerate() {
                    if gp == 0.0 {
                        continue;
                    }
                    let row = &w2[r * h..(r + 1) * h];
                    for j in 0..h {
                        g_pre[j] += gp * row[j];
                    }
                }
                for (g, &pre) in g_pre.iter_mut().zip(&cache.hidden_pre) {
                    *g *= a.activation.derivative(pre);
                }
                affine_backward(&cache.input, &g_pre, &lay.w1, &lay.b1, grad);
            }
        }
        Ok(())
    }
}

fn affine(w: &[f64], b: &[f64], x: &[f64]) -> Vec<f64> {
    let n_in = x.len();
    w.chunks_exact(n_in).zip(b).map(|(row, bi)| dot(row, x) + bi).collect()
}

fn affine_backward(
    x: &[f64],
    g_out: &[f64],
    w_range: &std::ops::Range<usize>,
    b_range: &std::ops::Range<usize>,
    grad: &mut [f64],
) {
    let n_in = x.len();
    for (r, &g) in g_out.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut grad[w_range.start + r * n_in..w_range.start + (r + 1) * n_in];
        for (gw, xi) in row.iter_mut().zip(x) {
            *gw += g * xi;
        }
        grad[b_range.start + r] += g;
    }
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = sq_norm(v).sqrt() + COSINE_EPS;
    v.iter().map(|x| x / n).collect()
}

/// Pulls a gradient through `u = v / (‖v‖ + ε)`.
fn normalize_backward(v: &[f64], g_u: &[f64]) -> Vec<f64> {
    let n = sq_norm(v).sqrt();
    let denom = n + COSINE_EPS;
    let mut out: Vec<f64> = g_u.iter().map(|g| g / denom).collect();
    if n > 0.0 {
        let proj = dot(v, g_u) / (n * denom * denom);
        for (o, vi) in out.iter_mut().zip(v) {
            *o -= proj * vi;
        }
    }
    out
}

/// `Λ = max_k ‖w_k‖₂`, or `max_k ‖w_k‖_q` when `q` is given. A cosine head
/// acts through `w_k / ‖w_k‖₂`, so the norms are taken of the unit rows and
/// the L2 bound is 1.
pub fn head_norm_bound(params: &ModelParams, q: Option<f64>) -> f64 {
    let q = q.unwrap_or(2.0);
    let cosine = params.arch.head == HeadKind::Cosine;
    if cosine && q == 2.0 {
        return 1.0;
    }
    params
        .head()
        .iter_rows()
        .map(|w| {
            let n = lp_norm(w, q);
            if cosine { n / (sq_norm(w).sqrt() + COSINE_EPS) } else { n }
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn arch(encoder: EncoderKind, head: HeadKind) -> Architecture {
        let feature_dim = if encoder == EncoderKind::Identity { 3 } else { 4 };
        Architecture { input_dim: 3, hidden_dim: 5, feature_dim, num_classes: 3, encoder, head, activation: Activation::Softplus }
    }

    #[test]
    fn identity_encoder_identity_head() {
        let mut m = ModelParams::init(arch(EncoderKind::Identity, HeadKind::Linear), 0).unwrap();
        m.set_head(&Matrix::identity(3)).unwrap();
        let c = m.forward(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(c.logits, vec![0.5, -1.0, 2.0]);
        assert_eq!(c.features, vec![0.5, -1.0, 2.0]);
    }

    #[test]
    fn cosine_head_aligned_input() {
        let mut m = ModelParams::init(arch(EncoderKind::Identity, HeadKind::Cosine), 0).unwrap();
        m.set_head(&Matrix::from_rows(&[vec![2.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]])).unwrap();
        let c = m.forward(&[3.0, 0.0, 0.0]).unwrap();
        assert!((c.logits[0] - 1.0).abs() < 1e-12);
        assert!(c.logits[1].abs() < 1e-12);
    }

    #[test]
    fn mlp_forward_matches_manual_recomputation() {
        let m = ModelParams::init(arch(EncoderKind::Mlp, HeadKind::Linear), 42).unwrap();
        let x = [0.3, -0.7, 1.1];
        let c = m.forward(&x).unwrap();
        // duplicate arithmetic straight from the flat layout: w1 (5x3), b1 (5), w2 (4x5), b2 (4), head (3x4)
        let p = m.as_flat();
        let (w1, rest) = p.split_at(15);
        let (b1, rest) = rest.split_at(5);
        let (w2, rest) = rest.split_at(20);
        let (b2, head) = rest.split_at(4);
        let mut h = [0.0; 5];
        for j in 0..5 {
            let mut s = b1[j];
            for i in 0..3 {
                s += w1[j * 3 + i] * x[i];
            }
            h[j] = (1.0 + s.exp()).ln();
        }
        let mut phi = [0.0; 4];
        for r in 0..4 {
            let mut s = b2[r];
            for j in 0..5 {
                s += w2[r * 5 + j] * h[j];
            }
            phi[r] = s;
        }
        for k in 0..3 {
            let z: f64 = (0..4).map(|r| head[k * 4 + r] * phi[r]).sum();
            assert!((z - c.logits[k]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_gradient() {
        for enc in [EncoderKind::Identity, EncoderKind::Linear, EncoderKind::Mlp] {
            for head in [HeadKind::Linear, HeadKind::Cosine] {
                let m = ModelParams::init(arch(enc, head), 1).unwrap();
                let c = m.forward(&[1.0, 2.0, 3.0]).unwrap();
                let mut g = vec![0.0; m.num_params()];
                let d = m.arch().feature_dim;
                m.backward(&c, Some(&[0.0; 3]), Some(&vec![0.0; d]), &mut g).unwrap();
                assert!(g.iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn logistic_regression_closed_form() {
        // identity encoder + linear head, softmax CE: ∂L/∂W = (p − 1_y) xᵀ
        let m = ModelParams::init(arch(EncoderKind::Identity, HeadKind::Linear), 9).unwrap();
        let x = [0.2, -0.4, 0.9];
        let c = m.forward(&x).unwrap();
        let lg = crate::losses::logit_margin_ce(&c.logits, 1, 1.0, true).unwrap();
        let mut g = vec![0.0; m.num_params()];
        m.backward(&c, lg.grad_logits.as_deref(), None, &mut g).unwrap();
        let p = crate::losses::softmax(&c.logits);
        for k in 0..3 {
            let r = p[k] - if k == 1 { 1.0 } else { 0.0 };
            for i in 0..3 {
                assert!((g[k * 3 + i] - r * x[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn head_norms() {
        let mut m = ModelParams::init(arch(EncoderKind::Identity, HeadKind::Linear), 0).unwrap();
        m.set_head(&Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 2.0, 0.0], vec![0.0, 0.0, -3.0]])).unwrap();
        assert_eq!(head_norm_bound(&m, None), 3.0);
        m.set_head(&Matrix::from_rows(&[vec![1.0, -1.0, 0.0], vec![0.0; 3], vec![0.0; 3]])).unwrap();
        assert_eq!(head_norm_bound(&m, Some(1.0)), 2.0);
        let c = ModelParams::init(arch(EncoderKind::Identity, HeadKind::Cosine), 0).unwrap();
        assert_eq!(head_norm_bound(&c, None), 1.0);
    }

    #[test]
    fn shape_errors() {
        let m = ModelParams::init(arch(EncoderKind::Mlp, HeadKind::Linear), 0).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::Input(_))));
        let c = m.forward(&[1.0, 2.0, 3.0]).unwrap();
        let mut g = vec![0.0; 3];
        assert!(matches!(m.backward(&c, None, None, &mut g), Err(Error::Input(_))));
        let bad = Architecture { feature_dim: 2, ..arch(EncoderKind::Identity, HeadKind::Linear) };
        assert!(ModelParams::init(bad, 0).is_err());
    }

    #[test]
    fn cosine_head_forces_unit_feature_norms() {
        // logits of a cosine model only see φ̂, so r²_{k,2} of the normalized features is 1
        let f = Matrix::from_rows(&[vec![3.0, 4.0], vec![-1.0, 0.5], vec![0.1, 0.0]]);
        let normalized = Matrix::from_rows(&f.iter_rows().map(normalize).collect::<Vec<_>>());
        let s = crate::feature_stats::ClassStats::from_features(&normalized, &[0, 1, 1], 2, 2.0).unwrap();
        for k in 0..2 {
            assert!((s.r_sq_p()[k] - 1.0).abs() < 1e-10);
        }
    }
}
