//! The prevalence-adjusted ratio model.
//!
//! `f(x, z)` is a late-fusion network with a softmax head; it takes no site
//! input. A site enters only through its prevalence vector `p = P(Y | z, site)`:
//! the adjusted posterior is `p ⊙ f(x, z)` renormalized to sum to one, and
//! the predicted label is its argmax.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Error, Result};
use crate::eval::{select_checkpoint, CheckpointRecord, ValidationHook};
use crate::math::{argmax, is_distribution};
use crate::nn::{Activation, FusionArch, FusionNet};
use crate::prevalence::PrevalenceEstimate;
use crate::rng;
use crate::scm::{LabelPair, Sample};
use crate::train::{adjust, Objective, Trainer, TrainingSite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub site_cycling: bool,
    pub seed: u64,
    pub checkpoint_every: usize,
    /// Renormalize `p ⊙ f` before the cross-entropy. Turning this off trains
    /// on the raw product instead.
    pub normalize_product: bool,
    pub representation_dim: usize,
    pub backbone_activation: Activation,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            lr: 1e-4,
            batch_size: 128,
            site_cycling: true,
            seed: 0,
            checkpoint_every: 500,
            normalize_product: true,
            representation_dim: 10,
            backbone_activation: Activation::Identity,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(config("steps must be >= 1"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(config("lr must be finite and non-negative"));
        }
        if self.batch_size == 0 || self.checkpoint_every == 0 || self.representation_dim == 0 {
            return Err(config("batch_size, checkpoint_every and representation_dim must be >= 1"));
        }
        if self.backbone_activation == Activation::Softmax {
            return Err(config("backbone activation cannot be softmax"));
        }
        Ok(())
    }

    pub fn arch(&self, x_dim: usize, z_dim: usize, classes: usize) -> FusionArch {
        FusionArch {
            x_dim,
            z_dim,
            rep_dim: self.representation_dim,
            backbone_activation: self.backbone_activation,
            classes,
        }
    }
}

/// The network `f(x, z)` modelling the site-invariant ratio.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatioModel {
    pub net: FusionNet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdjustedPrediction {
    pub probs: Vec<f64>,
    pub label: usize,
    pub raw_ratio: Vec<f64>,
}

/// A selected model with its training record.
#[derive(Debug, Clone, PartialEq)]
pub struct Trained<M> {
    pub model: M,
    pub selected_step: usize,
    pub val_f1: f64,
    pub history: Vec<CheckpointRecord>,
}

impl RatioModel {
    pub fn raw_ratio(&self, x: &[f64], z: &[f64]) -> Result<Vec<f64>> {
        self.net.probs(x, z)
    }

    pub fn classes(&self) -> usize {
        self.net.classes()
    }
}

fn finish(raw: Vec<f64>, prev: &[f64]) -> Result<AdjustedPrediction> {
    let mut probs = vec![0.0; raw.len()];
    adjust(prev, &raw, &mut probs)?;
    Ok(AdjustedPrediction {
        label: argmax(&probs),
        probs,
        raw_ratio: raw,
    })
}

fn check_prev(prev: &[f64], classes: usize) -> Result<()> {
    check_dim("prevalence", classes, prev.len())?;
    if prev.iter().any(|p| !p.is_finite() || *p < 0.0) {
        return Err(config("prevalence entries must be finite and non-negative"));
    }
    Ok(())
}

pub fn copa_forward(model: &RatioModel, x: &[f64], z: &[f64], prev: &[f64]) -> Result<AdjustedPrediction> {
    check_prev(prev, model.classes())?;
    finish(model.raw_ratio(x, z)?, prev)
}

/// Adjusted predictions for a batch with one prevalence vector per sample.
pub fn predict_adjusted(model: &RatioModel, samples: &[Sample], prevs: &[Vec<f64>]) -> Result<Vec<AdjustedPrediction>> {
    check_dim("per-sample prevalence", samples.len(), prevs.len())?;
    if samples.is_empty() {
        return Ok(Vec::new());
    }
    let k = model.classes();
    let arch = *model.net.arch();
    let mut xs = Vec::with_capacity(samples.len() * arch.x_dim);
    let mut zs = Vec::with_capacity(samples.len() * arch.z_dim);
    for s in samples {
        check_dim("sample x", arch.x_dim, s.x.len())?;
        check_dim("sample z", arch.z_dim, s.z.len())?;
        xs.extend_from_slice(&s.x);
        zs.extend_from_slice(&s.z);
    }
    let cache = model.net.forward(&xs, &zs, samples.len())?;
    let f = cache.probs();
    prevs
        .iter()
        .enumerate()
        .map(|(i, p)| {
            check_prev(p, k)?;
            finish(f[i * k..(i + 1) * k].to_vec(), p)
        })
        .collect()
}

/// Labels at a site, querying `prev` (that site's estimate) at each sample's `z`.
pub fn predict_site(model: &RatioModel, samples: &[Sample], prev: &PrevalenceEstimate) -> Result<Vec<usize>> {
    let prevs = samples
        .iter()
        .map(|s| prev.query(&s.z))
        .collect::<Result<Vec<_>>>()?;
    Ok(predict_adjusted(model, samples, &prevs)?
        .into_iter()
        .map(|p| p.label)
        .collect())
}

/// Source of `z` values for predictions where `z` is not observed.
pub trait ZSampler {
    fn sample_z(&mut self) -> Vec<f64>;
}

/// Draws each `z` coordinate uniformly from the values observed for it.
#[derive(Debug, Clone)]
pub struct ObservedLevels {
    levels: Vec<Vec<f64>>,
    rng: rng::Rng,
}

impl ObservedLevels {
    pub fn new(levels: Vec<Vec<f64>>, seed: u64) -> Result<Self> {
        if levels.iter().any(Vec::is_empty) {
            return Err(config("every z coordinate needs at least one level"));
        }
        Ok(Self {
            levels,
            rng: rng::derived_rng(seed, &[rng::tag::MARGINALIZE]),
        })
    }

    pub fn from_pairs(pairs: &[LabelPair], seed: u64) -> Result<Self> {
        let dim = pairs
            .first()
            .map(|p| p.z.len())
            .ok_or_else(|| config("no pairs to collect z levels from"))?;
        let mut levels = vec![Vec::<f64>::new(); dim];
        for p in pairs {
            check_dim("z levels", dim, p.z.len())?;
            for (l, v) in levels.iter_mut().zip(&p.z) {
                l.push(*v);
            }
        }
        for l in levels.iter_mut() {
            l.sort_by(f64::total_cmp);
            l.dedup();
        }
        Self::new(levels, seed)
    }
}

impl ZSampler for ObservedLevels {
    fn sample_z(&mut self) -> Vec<f64> {
        self.levels
            .iter()
            .map(|l| l[self.rng.random_range(0..l.len())])
            .collect()
    }
}

/// Prediction with `z` summed out: `sum_j prev ⊙ f(x, z_j)` over `m` sampled
/// `z_j`, renormalized. `raw_ratio` is the mean of the `f(x, z_j)`.
pub fn predict_marginalized(
    model: &RatioModel,
    x: &[f64],
    prev_marginal: &[f64],
    z_sampler: &mut dyn ZSampler,
    m: usize,
) -> Result<AdjustedPrediction> {
    if m == 0 {
        return Err(config("need at least one z draw"));
    }
    let k = model.classes();
    check_prev(prev_marginal, k)?;
    let mut acc = vec![0.0; k];
    let mut raw = vec![0.0; k];
    for _ in 0..m {
        let z = z_sampler.sample_z();
        let f = model.raw_ratio(x, &z)?;
        for i in 0..k {
            acc[i] += prev_marginal[i] * f[i];
            raw[i] += f[i] / m as f64;
        }
    }
    let s: f64 = acc.iter().sum();
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numerical("marginalized output has no mass".into()));
    }
    acc.iter_mut().for_each(|v| *v /= s);
    debug_assert!(is_distribution(&acc, 1e-9));
    Ok(AdjustedPrediction {
        label: argmax(&acc),
        probs: acc,
        raw_ratio: raw,
    })
}

/// Trains `f(x, z)` on prevalence-adjusted outputs and returns the checkpoint
/// chosen by `val`.
pub fn train_copa(sites: &[TrainingSite<'_>], cfg: &TrainConfig, classes: usize, val: &ValidationHook) -> Result<Trained<RatioModel>> {
    let first = sites
        .first()
        .and_then(|s| s.samples.first())
        .ok_or_else(|| config("at least one non-empty training site is required"))?;
    let arch = cfg.arch(first.x.len(), first.z.len(), classes);
    let mut trainer = Trainer::new(
        arch,
        sites.to_vec(),
        cfg.clone(),
        Objective::Adjusted {
            normalize: cfg.normalize_product,
        },
    )?;
    trainer.run()?;
    select_copa(arch, &trainer.into_state().checkpoints, val)
}

/// Picks the best checkpoint for the adjusted model.
pub fn select_copa(arch: FusionArch, checkpoints: &[crate::train::Checkpoint], val: &ValidationHook) -> Result<Trained<RatioModel>> {
    let sel = select_checkpoint(checkpoints, |params| {
        let model = RatioModel {
            net: FusionNet::with_params(arch, params.to_vec())?,
        };
        val.score_adjusted(&model)
    })?;
    Ok(Trained {
        model: RatioModel {
            net: FusionNet::with_params(arch, checkpoints[sel.index].params.clone())?,
        },
        selected_step: sel.step,
        val_f1: sel.score,
        history: sel.history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> RatioModel {
        let cfg = TrainConfig::default();
        RatioModel {
            net: FusionNet::new(cfg.arch(2, 1, 2), 3).unwrap(),
        }
    }

    #[test]
    fn uniform_prevalence_returns_raw_ratio() {
        let m = model();
        let p = copa_forward(&m, &[0.3, -0.2], &[1.0], &[0.5, 0.5]).unwrap();
        for (a, b) in p.probs.iter().zip(&p.raw_ratio) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn prevalence_tilts_even_ratio() {
        let u = finish(vec![0.5, 0.5], &[0.9, 0.1]).unwrap();
        assert!((u.probs[0] - 0.9).abs() < 1e-12 && (u.probs[1] - 0.1).abs() < 1e-12);
        assert_eq!(u.label, 0);
        let tie = finish(vec![0.5, 0.5], &[0.5, 0.5]).unwrap();
        assert_eq!(tie.label, 0);
    }

    #[test]
    fn prevalence_scaling_is_invisible() {
        let m = model();
        let a = copa_forward(&m, &[0.1, 0.9], &[0.0], &[0.3, 0.7]).unwrap();
        for c in [1e-3, 0.5, 7.0, 1e4] {
            let b = copa_forward(&m, &[0.1, 0.9], &[0.0], &[0.3 * c, 0.7 * c]).unwrap();
            assert_eq!(a.label, b.label);
            for (p, q) in a.probs.iter().zip(&b.probs) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_mass_is_a_numerical_error() {
        assert!(matches!(finish(vec![1.0, 0.0], &[0.0, 1.0]), Err(Error::Numerical(_))));
    }

    #[test]
    fn marginalized_single_draw_matches_forward() {
        struct Fixed;
        impl ZSampler for Fixed {
            fn sample_z(&mut self) -> Vec<f64> {
                vec![1.0]
            }
        }
        let m = model();
        let a = predict_marginalized(&m, &[0.2, 0.4], &[0.6, 0.4], &mut Fixed, 1).unwrap();
        let b = copa_forward(&m, &[0.2, 0.4], &[1.0], &[0.6, 0.4]).unwrap();
        for (p, q) in a.probs.iter().zip(&b.probs) {
            assert!((p - q).abs() < 1e-12);
        }
        assert!(predict_marginalized(&m, &[0.2, 0.4], &[0.6, 0.4], &mut Fixed, 0).is_err());
    }

    #[test]
    fn observed_levels_only_emit_seen_values() {
        let pairs: Vec<LabelPair> = [0.0, 1.0, 1.0, 0.0]
            .iter()
            .map(|&z| LabelPair { y: 0, z: vec![z] })
            .collect();
        let mut s = ObservedLevels::from_pairs(&pairs, 4).unwrap();
        let draws: Vec<f64> = (0..200).map(|_| s.sample_z()[0]).collect();
        assert!(draws.iter().all(|v| *v == 0.0 || *v == 1.0));
        assert!(draws.contains(&0.0) && draws.contains(&1.0));
    }
}
