use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use super::{Activation, GradAt, MlpParams};
use crate::error::{config, Error, Result};
use crate::math::ln;

/// Probabilities are clamped to `[PROB_FLOOR, 1]` inside the log.
pub const PROB_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Target {
    Class(usize),
    Dist(Vec<f64>),
}

impl Target {
    fn weight(&self, k: usize) -> f64 {
        match self {
            Target::Class(c) => f64::from(u8::from(*c == k)),
            Target::Dist(d) => d[k],
        }
    }

    fn check(&self, classes: usize) -> Result<()> {
        match self {
            Target::Class(c) if *c < classes => Ok(()),
            Target::Class(c) => Err(config(alloc::format!("class {c} out of range {classes}"))),
            Target::Dist(d) if d.len() == classes && d.iter().all(|v| v.is_finite()) => Ok(()),
            Target::Dist(_) => Err(Error::Numerical("invalid target distribution".into())),
        }
    }
}

/// Cross-entropy of `probs = softmax(logits + c)` against `target`.
///
/// Returns the clamped loss and adds `scale * dloss/dlogits` into
/// `grad_logits`. Entries with `probs[y] <= PROB_FLOOR` sit on the flat part
/// of the clamp and contribute no gradient.
pub fn cross_entropy_grad(probs: &[f64], target: &Target, scale: f64, grad_logits: &mut [f64]) -> f64 {
    let mut loss = 0.0;
    for y in 0..probs.len() {
        let t = target.weight(y);
        if t == 0.0 {
            continue;
        }
        let p = probs[y];
        if p > PROB_FLOOR {
            loss -= t * ln(p);
            for (k, g) in grad_logits.iter_mut().enumerate() {
                let delta = if k == y { 1.0 } else { 0.0 };
                *g += scale * t * (probs[k] - delta);
            }
        } else {
            loss -= t * ln(PROB_FLOOR);
        }
    }
    loss
}

/// Mean cross-entropy over `batch` for a network with a softmax output,
/// with exact parameter gradients.
pub fn loss_and_grad(params: &MlpParams, batch: &[(Vec<f64>, Target)]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(config("empty batch"));
    }
    if params.arch.final_activation() != Activation::Softmax {
        return Err(config("cross-entropy needs a softmax output layer"));
    }
    let n = batch.len();
    let d = params.arch.in_dim();
    let k = params.arch.out_dim();
    let mut input = Vec::with_capacity(n * d);
    for (x, t) in batch {
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::Numerical("NaN in network input".into()));
        }
        crate::error::check_dim("batch input", d, x.len())?;
        t.check(k)?;
        input.extend_from_slice(x);
    }
    let cache = params.forward_batch(&input, n)?;
    let probs = cache.output();
    let scale = 1.0 / n as f64;
    let mut g_logits = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, (_, t)) in batch.iter().enumerate() {
        loss += cross_entropy_grad(
            &probs[i * k..(i + 1) * k],
            t,
            scale,
            &mut g_logits[i * k..(i + 1) * k],
        );
    }
    let mut grads = vec![0.0; params.values.len()];
    params
        .arch
        .backward(&params.values, &cache, &g_logits, GradAt::Logits, &mut grads)?;
    Ok((loss * scale, grads))
}
