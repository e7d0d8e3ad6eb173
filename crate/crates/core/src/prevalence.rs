//! Per-site conditional prevalence `P(Y | Z, site)` estimators: smoothed
//! counting for categorical `z`, auxiliary networks for continuous or
//! multi-dimensional `z`, and the marginal and uniform stand-ins.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt::Write;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, config, Error, Result};
use crate::math::is_distribution;
use crate::nn::{self, Activation, AdamState, GradAt, LayerSpec, Mlp, MlpParams, Target};
use crate::rng::{self, tag};
use crate::scm::{LabelPair, Sample};

/// Floor applied to estimates from single-class data.
pub const DEGENERATE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SmoothingConfig {
    pub pseudo_count: f64,
}

impl Default for SmoothingConfig {
    fn default() -> Self {
        Self { pseudo_count: 1.0 }
    }
}

impl SmoothingConfig {
    pub const NONE: SmoothingConfig = SmoothingConfig { pseudo_count: 0.0 };

    fn validate(&self) -> Result<()> {
        if self.pseudo_count >= 0.0 && self.pseudo_count.is_finite() {
            Ok(())
        } else {
            Err(config("pseudo_count must be a finite value >= 0"))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AuxTrainConfig {
    pub hidden: Vec<usize>,
    pub steps: usize,
    pub lr: f64,
    /// Pools up to this size are fitted full-batch.
    pub full_batch_max: usize,
    pub batch_size: usize,
}

impl Default for AuxTrainConfig {
    fn default() -> Self {
        Self {
            hidden: vec![20, 20, 20],
            steps: 2000,
            lr: 1e-3,
            full_batch_max: 10_000,
            batch_size: 512,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrevalenceKind {
    Table,
    AuxModel,
    Marginal,
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PrevalenceEstimate {
    Table {
        site_id: String,
        classes: usize,
        /// `z` key (comma-joined integer codes) to `P(Y | z)`.
        table: BTreeMap<String, Vec<f64>>,
        /// Returned for `z` values absent from the table.
        fallback: Vec<f64>,
        degenerate: bool,
    },
    AuxModel {
        site_id: String,
        model: MlpParams,
        degenerate: bool,
    },
    Marginal {
        site_id: String,
        probs: Vec<f64>,
        degenerate: bool,
    },
    Uniform {
        site_id: String,
        classes: usize,
    },
}

/// Key of a categorical `z` vector.
pub fn z_key(z: &[f64]) -> Result<String> {
    let mut key = String::new();
    for (i, v) in z.iter().enumerate() {
        let r = libm::round(*v);
        if !v.is_finite() || (v - r).abs() > 1e-9 {
            return Err(config(alloc::format!(
                "z value {v} is not a category code; use an auxiliary model for continuous z"
            )));
        }
        if i > 0 {
            key.push(',');
        }
        let _ = write!(key, "{}", r as i64);
    }
    Ok(key)
}

fn floor_distribution(v: &mut [f64], floor: f64) {
    v.iter_mut().for_each(|p| *p = p.max(floor));
    let s: f64 = v.iter().sum();
    v.iter_mut().for_each(|p| *p /= s);
}

fn check_classes(classes: usize) -> Result<()> {
    if classes >= 2 {
        Ok(())
    } else {
        Err(config("need at least two classes"))
    }
}

fn check_labels(pairs: &[LabelPair], classes: usize) -> Result<()> {
    match pairs.iter().find(|p| p.y >= classes) {
        Some(p) => Err(config(alloc::format!("label {} out of range {classes}", p.y))),
        None => Ok(()),
    }
}

fn is_degenerate(pairs: &[LabelPair]) -> bool {
    pairs.first().is_none_or(|f| pairs.iter().all(|p| p.y == f.y))
}

impl PrevalenceEstimate {
    pub fn kind(&self) -> PrevalenceKind {
        match self {
            Self::Table { .. } => PrevalenceKind::Table,
            Self::AuxModel { .. } => PrevalenceKind::AuxModel,
            Self::Marginal { .. } => PrevalenceKind::Marginal,
            Self::Uniform { .. } => PrevalenceKind::Uniform,
        }
    }

    pub fn site_id(&self) -> &str {
        match self {
            Self::Table { site_id, .. }
            | Self::AuxModel { site_id, .. }
            | Self::Marginal { site_id, .. }
            | Self::Uniform { site_id, .. } => site_id,
        }
    }

    pub fn with_site_id(mut self, id: impl Into<String>) -> Self {
        let id = id.into();
        match &mut self {
            Self::Table { site_id, .. }
            | Self::AuxModel { site_id, .. }
            | Self::Marginal { site_id, .. }
            | Self::Uniform { site_id, .. } => *site_id = id,
        }
        self
    }

    pub fn classes(&self) -> usize {
        match self {
            Self::Table { classes, .. } | Self::Uniform { classes, .. } => *classes,
            Self::AuxModel { model, .. } => model.arch.out_dim(),
            Self::Marginal { probs, .. } => probs.len(),
        }
    }

    pub fn is_degenerate(&self) -> bool {
        match self {
            Self::Table { degenerate, .. }
            | Self::AuxModel { degenerate, .. }
            | Self::Marginal { degenerate, .. } => *degenerate,
            Self::Uniform { .. } => false,
        }
    }

    /// A fixed probability vector regardless of `z`.
    pub fn marginal(probs: Vec<f64>) -> Result<Self> {
        check_classes(probs.len())?;
        if !is_distribution(&probs, 1e-9) {
            return Err(config("marginal prevalence must be a probability vector"));
        }
        Ok(Self::Marginal {
            site_id: String::new(),
            probs,
            degenerate: false,
        })
    }

    /// A table from known conditionals.
    pub fn table(table: BTreeMap<String, Vec<f64>>, fallback: Vec<f64>) -> Result<Self> {
        let classes = fallback.len();
        check_classes(classes)?;
        for v in table.values().chain(core::iter::once(&fallback)) {
            if v.len() != classes || !is_distribution(v, 1e-9) {
                return Err(config("prevalence table rows must be probability vectors"));
            }
        }
        Ok(Self::Table {
            site_id: String::new(),
            classes,
            table,
            fallback,
            degenerate: false,
        })
    }

    /// `P(Y | Z = z, site)`.
    pub fn query(&self, z: &[f64]) -> Result<Vec<f64>> {
        match self {
            Self::Table { table, fallback, .. } => {
                let key = z_key(z)?;
                Ok(table.get(&key).unwrap_or(fallback).clone())
            }
            Self::AuxModel { model, degenerate, .. } => {
                if z.iter().any(|v| v.is_nan()) {
                    return Err(Error::Numerical("NaN in z".into()));
                }
                let (mut p, _) = model.forward(z)?;
                if *degenerate {
                    floor_distribution(&mut p, DEGENERATE_FLOOR);
                }
                Ok(p)
            }
            Self::Marginal { probs, .. } => Ok(probs.clone()),
            Self::Uniform { classes, .. } => Ok(vec![1.0 / *classes as f64; *classes]),
        }
    }
}

pub fn count_prevalence(
    pairs: &[LabelPair],
    smoothing: SmoothingConfig,
    classes: usize,
) -> Result<PrevalenceEstimate> {
    check_classes(classes)?;
    smoothing.validate()?;
    check_labels(pairs, classes)?;
    let c = smoothing.pseudo_count;
    if pairs.is_empty() && c == 0.0 {
        return Err(Error::Estimation("no pairs and no smoothing".into()));
    }
    let mut counts: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut marginal = vec![0.0; classes];
    for p in pairs {
        let row = counts
            .entry(z_key(&p.z)?)
            .or_insert_with(|| vec![0.0; classes]);
        row[p.y] += 1.0;
        marginal[p.y] += 1.0;
    }
    let normalize = |row: &mut Vec<f64>| {
        let total: f64 = row.iter().sum();
        let denom = total + c * classes as f64;
        row.iter_mut().for_each(|v| *v = (*v + c) / denom);
    };
    normalize(&mut marginal);
    counts.values_mut().for_each(normalize);
    let degenerate = is_degenerate(pairs);
    if degenerate {
        floor_distribution(&mut marginal, DEGENERATE_FLOOR);
        counts
            .values_mut()
            .for_each(|r| floor_distribution(r, DEGENERATE_FLOOR));
    }
    Ok(PrevalenceEstimate::Table {
        site_id: String::new(),
        classes,
        table: counts,
        fallback: marginal,
        degenerate,
    })
}

pub fn marginal_prevalence(
    pairs: &[LabelPair],
    smoothing: SmoothingConfig,
    classes: usize,
) -> Result<PrevalenceEstimate> {
    check_classes(classes)?;
    smoothing.validate()?;
    check_labels(pairs, classes)?;
    let c = smoothing.pseudo_count;
    if pairs.is_empty() && c == 0.0 {
        return Err(Error::Estimation("no pairs and no smoothing".into()));
    }
    let mut probs = vec![c; classes];
    for p in pairs {
        probs[p.y] += 1.0;
    }
    let total = pairs.len() as f64 + c * classes as f64;
    probs.iter_mut().for_each(|v| *v /= total);
    let degenerate = is_degenerate(pairs);
    if degenerate {
        floor_distribution(&mut probs, DEGENERATE_FLOOR);
    }
    Ok(PrevalenceEstimate::Marginal {
        site_id: String::new(),
        probs,
        degenerate,
    })
}

pub fn uniform_prevalence(classes: usize) -> Result<PrevalenceEstimate> {
    check_classes(classes)?;
    Ok(PrevalenceEstimate::Uniform {
        site_id: String::new(),
        classes,
    })
}

/// Counting estimator on a uniform random subsample of `l` pairs.
pub fn subsample_prevalence(
    pairs: &[LabelPair],
    l: usize,
    smoothing: SmoothingConfig,
    classes: usize,
    seed: u64,
) -> Result<PrevalenceEstimate> {
    if l == 0 || l > pairs.len() {
        return Err(config(alloc::format!(
            "subsample size {l} must lie in 1..={}",
            pairs.len()
        )));
    }
    count_prevalence(&subsample_pairs(pairs, l, seed), smoothing, classes)
}

/// Uniform random subset of `l` pairs in pool order; the whole pool when
/// `l >= pairs.len()`.
pub fn subsample_pairs(pairs: &[LabelPair], l: usize, seed: u64) -> Vec<LabelPair> {
    if l >= pairs.len() {
        return pairs.to_vec();
    }
    let mut r = rng::derived_rng(seed, &[tag::SUBSAMPLE, l as u64]);
    let mut idx = index::sample(&mut r, pairs.len(), l).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| pairs[i].clone()).collect()
}

/// Mean cross-entropy and gradient of a softmax network on class labels.
fn class_loss_grad(arch: &Mlp, params: &[f64], input: &[f64], labels: &[usize], grads: &mut [f64]) -> Result<f64> {
    let n = labels.len();
    let k = arch.out_dim();
    let cache = arch.forward(params, input, n)?;
    let probs = cache.output();
    let scale = 1.0 / n as f64;
    let mut g = vec![0.0; n * k];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += nn::cross_entropy_grad(&probs[i * k..(i + 1) * k], &Target::Class(y), scale, &mut g[i * k..(i + 1) * k]);
    }
    grads.iter_mut().for_each(|v| *v = 0.0);
    arch.backward(params, &cache, &g, GradAt::Logits, grads)?;
    Ok(loss * scale)
}

/// Fits a ReLU network with a softmax output mapping `z` to `P(Y | z)`.
pub fn fit_aux_model(
    pairs: &[LabelPair],
    classes: usize,
    cfg: &AuxTrainConfig,
    seed: u64,
) -> Result<PrevalenceEstimate> {
    check_classes(classes)?;
    check_labels(pairs, classes)?;
    let first = pairs
        .first()
        .ok_or_else(|| Error::Estimation("no pairs to fit".into()))?;
    let z_dim = first.z.len();
    if z_dim == 0 {
        return Err(config("auxiliary model needs at least one z column"));
    }
    if cfg.steps == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(config("auxiliary training needs steps, batch_size and lr > 0"));
    }
    let mut specs = Vec::with_capacity(cfg.hidden.len() + 1);
    let mut d = z_dim;
    for &h in &cfg.hidden {
        specs.push(LayerSpec::new(d, h, Activation::Relu));
        d = h;
    }
    specs.push(LayerSpec::new(d, classes, Activation::Softmax));
    let mut model = nn::mlp_init(&specs, rng::derive_seed(seed, &[tag::AUX]))?;

    let mut input = Vec::with_capacity(pairs.len() * z_dim);
    for p in pairs {
        check_dim("aux z", z_dim, p.z.len())?;
        if p.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite z".into()));
        }
        input.extend_from_slice(&p.z);
    }
    let labels: Vec<usize> = pairs.iter().map(|p| p.y).collect();
    let mut adam = AdamState::new(model.values.len(), cfg.lr);
    let mut grads = vec![0.0; model.values.len()];

    if pairs.len() <= cfg.full_batch_max {
        for _ in 0..cfg.steps {
            class_loss_grad(&model.arch, &model.values, &input, &labels, &mut grads)?;
            adam.update(&mut model.values, &grads)?;
        }
    } else {
        let mut r = rng::derived_rng(seed, &[tag::AUX, 1]);
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        order.shuffle(&mut r);
        let mut cursor = 0;
        let bs = cfg.batch_size.min(pairs.len());
        let mut bx = Vec::with_capacity(bs * z_dim);
        let mut by = Vec::with_capacity(bs);
        for _ in 0..cfg.steps {
            bx.clear();
            by.clear();
            for _ in 0..bs {
                if cursor == order.len() {
                    order.shuffle(&mut r);
                    cursor = 0;
                }
                let i = order[cursor];
                cursor += 1;
                bx.extend_from_slice(&input[i * z_dim..(i + 1) * z_dim]);
                by.push(labels[i]);
            }
            class_loss_grad(&model.arch, &model.values, &bx, &by, &mut grads)?;
            adam.update(&mut model.values, &grads)?;
        }
    }
    if !model.is_finite() {
        return Err(Error::Numerical("auxiliary model diverged".into()));
    }
    Ok(PrevalenceEstimate::AuxModel {
        site_id: String::new(),
        model,
        degenerate: is_degenerate(pairs),
    })
}

/// How `(y, z)` pairs are turned into an estimate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PairEstimator {
    Counting(SmoothingConfig),
    Aux(AuxTrainConfig),
}

impl PairEstimator {
    pub fn fit(&self, pairs: &[LabelPair], classes: usize, seed: u64) -> Result<PrevalenceEstimate> {
        match self {
            Self::Counting(s) => count_prevalence(pairs, *s, classes),
            Self::Aux(cfg) => fit_aux_model(pairs, classes, cfg, seed),
        }
    }
}

/// Splits the samples into two random halves and gives each sample the
/// prevalence fitted on the other half, so a sample's own label never enters
/// its own prevalence.
pub fn half_split_assign(
    samples: &[Sample],
    estimator: &PairEstimator,
    classes: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if samples.len() < 2 {
        return Err(config("half-split needs at least two samples"));
    }
    let mut r = rng::derived_rng(seed, &[tag::SPLIT]);
    let mut perm: Vec<usize> = (0..samples.len()).collect();
    perm.shuffle(&mut r);
    let (a, b) = perm.split_at(samples.len() / 2);
    let pairs_of = |idx: &[usize]| -> Vec<LabelPair> { idx.iter().map(|&i| samples[i].label_pair()).collect() };
    let fit_b = estimator.fit(&pairs_of(b), classes, rng::derive_seed(seed, &[tag::SPLIT, 1]))?;
    let fit_a = estimator.fit(&pairs_of(a), classes, rng::derive_seed(seed, &[tag::SPLIT, 2]))?;
    let mut out = vec![Vec::new(); samples.len()];
    for &i in a {
        out[i] = fit_b.query(&samples[i].z)?;
    }
    for &i in b {
        out[i] = fit_a.query(&samples[i].z)?;
    }
    Ok(out)
}
