//! Central finite-difference checks of every analytic gradient in the crate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::linalg::Matrix;
use crate::losses::{logit_margin_ce, rep_margin_loss};
use crate::margin_schedule::MarginVector;
use crate::model::{Activation, Architecture, EncoderKind, HeadKind, ModelParams};
use crate::objective::{combined_objective, LogitTerm, ObjectiveSpec, RepTerm};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;
pub const DEFAULT_INSTANCES: usize = 200;

/// `(f(x + h e_i) − f(x − h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> Result<f64>, x: &[f64], h: f64) -> Result<Vec<f64>> {
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let up = f(&probe)?;
        probe[i] = orig - h;
        let down = f(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    Ok(out)
}

/// `max_i |a_i − n_i| / max(‖a‖_∞, ‖n‖_∞)`, floored at 1e-8 in the denominator.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = analytic.iter().chain(numeric).fold(0.0_f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic.iter().zip(numeric).map(|(a, n)| (a - n).abs()).fold(0.0, f64::max) / scale
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRecord {
    pub loss_name: &'static str,
    pub instance_id: usize,
    pub rel_error: f64,
}

pub fn check_logit_margin_ce(rng: &mut impl Rng, h: f64) -> Result<f64> {
    let k = rng.random_range(2..=8);
    let z: Vec<f64> = (0..k).map(|_| rng.random_range(-4.0..4.0)).collect();
    let y = rng.random_range(0..k);
    let gamma = rng.random_range(0.3..3.0);
    let analytic = logit_margin_ce(&z, y, gamma, true)?.grad_logits.expect("requested");
    let numeric = central_difference(|zz| Ok(logit_margin_ce(zz, y, gamma, false)?.value), &z, h)?;
    Ok(relative_error(&analytic, &numeric))
}

pub fn check_rep_margin_loss(rng: &mut impl Rng, h: f64) -> Result<f64> {
    let d = rng.random_range(1..=6);
    let m = rng.random_range(1..=5);
    let flat: Vec<f64> = (0..(m + 1) * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let s_bar = rng.random_range(0.0..1.5);
    let eval = |v: &[f64], grad: bool| {
        let pos: Vec<&[f64]> = v[d..].chunks_exact(d).collect();
        rep_margin_loss(&v[..d], &pos, s_bar, grad)
    };
    let lg = eval(&flat, true)?;
    let mut analytic = lg.grad_anchor.expect("requested");
    for g in lg.grad_positives.expect("requested") {
        analytic.extend(g);
    }
    let numeric = central_difference(|v| Ok(eval(v, false)?.value), &flat, h)?;
    Ok(relative_error(&analytic, &numeric))
}

/// One encoder/head combination per instance, cycling through all six.
pub fn check_combined_objective(rng: &mut impl Rng, instance: usize, h: f64) -> Result<f64> {
    const ENCODERS: [EncoderKind; 3] = [EncoderKind::Identity, EncoderKind::Linear, EncoderKind::Mlp];
    const HEADS: [HeadKind; 2] = [HeadKind::Linear, HeadKind::Cosine];
    let encoder = ENCODERS[instance % 3];
    let head = HEADS[(instance / 3) % 2];
    let input_dim = rng.random_range(2..=4);
    let k = rng.random_range(2..=4);
    let arch = Architecture {
        input_dim,
        hidden_dim: rng.random_range(2..=5),
        feature_dim: if encoder == EncoderKind::Identity { input_dim } else { rng.random_range(2..=4) },
        num_classes: k,
        encoder,
        head,
        activation: if rng.random_bool(0.5) { Activation::Softplus } else { Activation::Tanh },
    };
    let model = ModelParams::init(arch, rng.random())?;
    let n = rng.random_range(4..=8);
    let inputs = Matrix::from_vec(n, input_dim, (0..n * input_dim).map(|_| rng.random_range(-1.0..1.0)).collect());
    // at least one repeated class so the representation term is active
    let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
    labels[1] = labels[0];
    let gamma = MarginVector::from_values((0..k).map(|_| rng.random_range(0.5..3.0)).collect())?;
    let rep = RepTerm { lambda: rng.random_range(0.1..0.9), s_bar: rng.random_range(0.0..1.0) };
    let spec = ObjectiveSpec { logit: LogitTerm::Margin(&gamma), rep: Some(rep) };

    let analytic = combined_objective(&model, &inputs, &labels, &spec, true)?.grad.expect("requested");
    let numeric = central_difference(
        |theta| {
            let m = ModelParams::from_flat(arch, theta.to_vec())?;
            Ok(combined_objective(&m, &inputs, &labels, &spec, false)?.value)
        },
        model.as_flat(),
        h,
    )?;
    Ok(relative_error(&analytic, &numeric))
}

/// The full suite: `instances` random cases for each of the three checked losses.
pub fn run_suite(instances: usize, seed: u64) -> Result<Vec<GradCheckRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(3 * instances);
    for i in 0..instances {
        out.push(GradCheckRecord { loss_name: "logit_margin_ce", instance_id: i, rel_error: check_logit_margin_ce(&mut rng, DEFAULT_STEP)? });
    }
    for i in 0..instances {
        out.push(GradCheckRecord { loss_name: "rep_margin_loss", instance_id: i, rel_error: check_rep_margin_loss(&mut rng, DEFAULT_STEP)? });
    }
    for i in 0..instances {
        out.push(GradCheckRecord {
            loss_name: "combined_objective",
            instance_id: i,
            rel_error: check_combined_objective(&mut rng, i, DEFAULT_STEP)?,
        });
    }
    Ok(out)
}
