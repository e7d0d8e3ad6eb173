//! Experiment driver: builds sites, assigns prevalence, trains each method
//! per seed, selects checkpoints and scores test sites.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;

use super::{f1_score, ResultRow, RunReport, ValidationHook, ValidationMode, CheckpointRecord, POSITIVE_CLASS};
use crate::baselines::{predict_erm, train_erm, ErmModel, ErmVariant};
use crate::config::{ExperimentConfig, Method, PrevalenceChoice, SiteRole};
use crate::copa::{predict_adjusted, predict_marginalized, predict_site, train_copa, ObservedLevels, RatioModel, Trained};
use crate::error::{config, Result};
use crate::hash::params_hash;
use crate::math::argmax;
use crate::nn::FusionNet;
use crate::prevalence::{
    half_split_assign, marginal_prevalence, subsample_pairs, uniform_prevalence, PairEstimator, PrevalenceEstimate,
};
use crate::rng::{self, tag};
use crate::scm::{bayes_posterior, label_law, make_mixing_matrix, make_site, MixingMatrix, Sample, SiteDataset};
use crate::train::TrainingSite;
use crate::whiten::Whitening;

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedSite {
    pub role: SiteRole,
    /// Position in the experiment's site list; keys seed derivation.
    pub index: usize,
    pub data: SiteDataset,
    /// Conditional prevalence assigned to each sample.
    pub prevalence: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentData {
    pub config_hash: String,
    pub sites: Vec<PreparedSite>,
    /// Held-out training-site samples with their prevalence (internal mode).
    pub internal_val: Option<(Vec<Sample>, Vec<Vec<f64>>)>,
    pub mixing: Option<MixingMatrix>,
    /// Applied to every sample's features; models never see raw features
    /// when present.
    pub whitening: Option<Whitening>,
    pub z_categorical: bool,
    pub x_dim: usize,
    pub z_dim: usize,
}

impl ExperimentData {
    pub fn sites_with_role(&self, role: SiteRole) -> impl Iterator<Item = &PreparedSite> {
        self.sites.iter().filter(move |s| s.role == role)
    }

    pub fn training_sites(&self) -> Vec<TrainingSite<'_>> {
        self.sites_with_role(SiteRole::Train)
            .map(|s| TrainingSite {
                samples: &s.data.samples,
                prevalence: &s.prevalence,
            })
            .collect()
    }

    pub fn validation_hook(&self, mode: ValidationMode) -> Result<ValidationHook> {
        let (samples, prevalence) = match mode {
            ValidationMode::External => {
                let mut samples = Vec::new();
                let mut prevalence = Vec::new();
                for s in self.sites_with_role(SiteRole::Validation) {
                    samples.extend(s.data.samples.iter().cloned());
                    prevalence.extend(s.prevalence.iter().cloned());
                }
                (samples, prevalence)
            }
            ValidationMode::Internal => self
                .internal_val
                .clone()
                .ok_or_else(|| config("internal validation data was not prepared"))?,
        };
        if samples.is_empty() {
            return Err(config("validation set is empty"));
        }
        Ok(ValidationHook {
            mode,
            samples,
            prevalence,
        })
    }
}

fn estimator(cfg: &ExperimentConfig, z_categorical: bool) -> PairEstimator {
    if z_categorical {
        PairEstimator::Counting(cfg.smoothing)
    } else {
        PairEstimator::Aux(cfg.aux.clone())
    }
}

fn pool_estimate(cfg: &ExperimentConfig, est: &PairEstimator, data: &SiteDataset, index: usize) -> Result<PrevalenceEstimate> {
    let seed = rng::derive_seed(cfg.data_seed, &[tag::SUBSAMPLE, index as u64]);
    let pool = subsample_pairs(&data.prevalence_pairs, cfg.prevalence_l, seed);
    Ok(est.fit(&pool, cfg.classes, seed)?.with_site_id(data.site_id.clone()))
}

/// The site's own prevalence estimate from `prevalence_l` pool pairs, as
/// used for its samples during preparation. Half-split sites have no single
/// estimate and get one fitted on all their samples.
pub fn site_prevalence(cfg: &ExperimentConfig, data: &ExperimentData, site: &PreparedSite) -> Result<PrevalenceEstimate> {
    let est = estimator(cfg, data.z_categorical);
    if site.data.pairs_from_samples {
        let seed = rng::derive_seed(cfg.data_seed, &[tag::SPLIT, site.index as u64]);
        Ok(est.fit(&site.data.prevalence_pairs, cfg.classes, seed)?.with_site_id(site.data.site_id.clone()))
    } else {
        pool_estimate(cfg, &est, &site.data, site.index)
    }
}

/// F1 of the adjusted model at `site` when every sample's prevalence is
/// queried from `prev`.
pub fn evaluate_with_estimate(model: &RatioModel, site: &PreparedSite, prev: &PrevalenceEstimate) -> Result<f64> {
    let preds = predict_site(model, &site.data.samples, prev)?;
    let labels: Vec<usize> = site.data.samples.iter().map(|s| s.y).collect();
    f1_score(&preds, &labels, POSITIVE_CLASS)
}

/// Generates every configured site from `data_seed`, sharing one mixing
/// matrix.
pub fn prepare_synthetic(cfg: &ExperimentConfig) -> Result<(Vec<(SiteRole, SiteDataset)>, MixingMatrix)> {
    cfg.validate()?;
    if !cfg.is_synthetic() {
        return Err(config("config does not describe synthetic data"));
    }
    let w = make_mixing_matrix(cfg.data_seed);
    let sites = cfg
        .sites
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let sc = e.site_config(cfg.relation)?;
            let seed = rng::derive_seed(cfg.data_seed, &[tag::SITE, i as u64]);
            Ok((e.role, make_site(&sc, &cfg.scm, &w, seed)?))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((sites, w))
}

/// Assigns conditional prevalence to every sample and carves out internal
/// validation data when that mode is configured.
pub fn prepare_experiment(
    cfg: &ExperimentConfig,
    sites: Vec<(SiteRole, SiteDataset)>,
    mixing: Option<MixingMatrix>,
    z_categorical: bool,
) -> Result<ExperimentData> {
    cfg.validate()?;
    let first = sites
        .iter()
        .flat_map(|(_, s)| s.samples.first())
        .next()
        .ok_or_else(|| config("no samples"))?;
    let (x_dim, z_dim) = (first.x.len(), first.z.len());
    let est = estimator(cfg, z_categorical);
    let mut prepared = Vec::with_capacity(sites.len());
    for (index, (role, data)) in sites.into_iter().enumerate() {
        if data.samples.is_empty() {
            return Err(config(alloc::format!("site `{}` has no samples", data.site_id)));
        }
        for s in &data.samples {
            if s.x.len() != x_dim || s.z.len() != z_dim || s.y >= cfg.classes {
                return Err(config(alloc::format!("site `{}` has inconsistent samples", data.site_id)));
            }
        }
        let prevalence = if data.pairs_from_samples {
            half_split_assign(
                &data.samples,
                &est,
                cfg.classes,
                rng::derive_seed(cfg.data_seed, &[tag::SPLIT, index as u64]),
            )?
        } else {
            let fitted = pool_estimate(cfg, &est, &data, index)?;
            data.samples
                .iter()
                .map(|s| fitted.query(&s.z))
                .collect::<Result<Vec<_>>>()?
        };
        prepared.push(PreparedSite {
            role,
            index,
            data,
            prevalence,
        });
    }

    let internal_val = if cfg.validation == ValidationMode::Internal {
        let total = cfg.internal_val_size.unwrap_or_else(|| {
            let ext: usize = prepared
                .iter()
                .filter(|s| s.role == SiteRole::Validation)
                .map(|s| s.data.samples.len())
                .sum();
            if ext > 0 {
                ext
            } else {
                500
            }
        });
        let train_idx: Vec<usize> = prepared
            .iter()
            .enumerate()
            .filter(|(_, s)| s.role == SiteRole::Train)
            .map(|(i, _)| i)
            .collect();
        let n_train = train_idx.len();
        let mut samples = Vec::with_capacity(total);
        let mut prevs = Vec::with_capacity(total);
        for (k, &i) in train_idx.iter().enumerate() {
            let take = total / n_train + usize::from(k < total % n_train);
            let site = &mut prepared[i];
            if take >= site.data.samples.len() {
                return Err(config(alloc::format!(
                    "site `{}` is too small to hold out {take} validation samples",
                    site.data.site_id
                )));
            }
            let mut order: Vec<usize> = (0..site.data.samples.len()).collect();
            order.shuffle(&mut rng::derived_rng(cfg.data_seed, &[tag::HOLDOUT, site.index as u64]));
            let mut held: Vec<usize> = order[..take].to_vec();
            held.sort_unstable();
            for &h in held.iter().rev() {
                samples.push(site.data.samples.remove(h));
                prevs.push(site.prevalence.remove(h));
            }
        }
        Some((samples, prevs))
    } else {
        None
    };

    let mut internal_val = internal_val;
    let whitening = if cfg.whiten_inputs {
        let w = Whitening::fit(
            prepared
                .iter()
                .filter(|s| s.role == SiteRole::Train)
                .flat_map(|s| s.data.samples.iter().map(|q| q.x.as_slice())),
        )?;
        let val = internal_val.iter_mut().flat_map(|(v, _)| v.iter_mut());
        for q in prepared.iter_mut().flat_map(|s| s.data.samples.iter_mut()).chain(val) {
            q.x = w.apply(&q.x)?;
        }
        Some(w)
    } else {
        None
    };

    Ok(ExperimentData {
        config_hash: cfg.hash(),
        sites: prepared,
        internal_val,
        mixing,
        whitening,
        z_categorical,
        x_dim,
        z_dim,
    })
}

/// Outcome of one method trained (or evaluated) with one seed.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub method: Method,
    pub seed: u64,
    pub model: Option<FusionNet>,
    pub selected_step: usize,
    pub val_f1: f64,
    pub history: Vec<CheckpointRecord>,
    /// `(site_id, F1)` for each test site.
    pub test_f1: Vec<(String, f64)>,
    pub model_hash: String,
}

impl SeedRun {
    pub fn rows(&self) -> impl Iterator<Item = ResultRow> + '_ {
        self.test_f1.iter().map(move |(site, f1)| ResultRow {
            method: self.method.as_str().into(),
            seed: self.seed,
            site_id: site.clone(),
            test_f1: *f1,
            selected_step: self.selected_step,
            model_hash: self.model_hash.clone(),
        })
    }
}

fn seeded_train_cfg(cfg: &ExperimentConfig, seed: u64) -> crate::copa::TrainConfig {
    let mut t = cfg.train.clone();
    t.seed = seed;
    t
}

pub fn train_copa_for_seed(cfg: &ExperimentConfig, data: &ExperimentData, seed: u64) -> Result<Trained<RatioModel>> {
    let hook = data.validation_hook(cfg.validation)?;
    train_copa(&data.training_sites(), &seeded_train_cfg(cfg, seed), cfg.classes, &hook)
}

/// Prevalence supplied at a test site for one evaluation choice.
#[allow(clippy::large_enum_variant)]
pub enum TestPrevalence {
    PerSample(Vec<Vec<f64>>),
    Marginalized { marginal: Vec<f64>, levels: ObservedLevels },
}

pub fn test_prevalence(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    site: &PreparedSite,
    choice: PrevalenceChoice,
    seed: u64,
) -> Result<TestPrevalence> {
    let pool = &site.data.prevalence_pairs;
    let sub_seed = rng::derive_seed(seed, &[tag::SUBSAMPLE, site.index as u64]);
    let per_sample = |est: &PrevalenceEstimate| -> Result<TestPrevalence> {
        Ok(TestPrevalence::PerSample(
            site.data
                .samples
                .iter()
                .map(|s| est.query(&s.z))
                .collect::<Result<Vec<_>>>()?,
        ))
    };
    match choice {
        PrevalenceChoice::Conditional => Ok(TestPrevalence::PerSample(site.prevalence.clone())),
        PrevalenceChoice::Subsample(l) => {
            if l > pool.len() {
                return Err(config(alloc::format!(
                    "site `{}` has {} prevalence pairs, fewer than {l}",
                    site.data.site_id,
                    pool.len()
                )));
            }
            let est = estimator(cfg, data.z_categorical).fit(&subsample_pairs(pool, l, sub_seed), cfg.classes, sub_seed)?;
            per_sample(&est)
        }
        PrevalenceChoice::Marginal => per_sample(&marginal_prevalence(pool, cfg.smoothing, cfg.classes)?),
        PrevalenceChoice::Uniform => per_sample(&uniform_prevalence(cfg.classes)?),
        PrevalenceChoice::Marginalized => {
            let marginal = marginal_prevalence(pool, cfg.smoothing, cfg.classes)?.query(&[])?;
            let levels = ObservedLevels::from_pairs(pool, rng::derive_seed(seed, &[tag::MARGINALIZE, site.index as u64]))?;
            Ok(TestPrevalence::Marginalized { marginal, levels })
        }
    }
}

/// F1 of the adjusted model at a test site under `choice`.
pub fn evaluate_adjusted(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    model: &RatioModel,
    site: &PreparedSite,
    choice: PrevalenceChoice,
    seed: u64,
) -> Result<f64> {
    let labels: Vec<usize> = site.data.samples.iter().map(|s| s.y).collect();
    let preds: Vec<usize> = match test_prevalence(cfg, data, site, choice, seed)? {
        TestPrevalence::PerSample(prevs) => predict_adjusted(model, &site.data.samples, &prevs)?
            .into_iter()
            .map(|p| p.label)
            .collect(),
        TestPrevalence::Marginalized { marginal, mut levels } => site
            .data
            .samples
            .iter()
            .map(|s| predict_marginalized(model, &s.x, &marginal, &mut levels, cfg.marginalize_draws).map(|p| p.label))
            .collect::<Result<Vec<_>>>()?,
    };
    f1_score(&preds, &labels, POSITIVE_CLASS)
}

fn bayes_oracle_f1(cfg: &ExperimentConfig, data: &ExperimentData, site: &PreparedSite) -> Result<f64> {
    let tp = site
        .data
        .true_params
        .as_ref()
        .ok_or_else(|| config(alloc::format!("site `{}` has no generating parameters", site.data.site_id)))?;
    let law = label_law(tp.relation, tp.beta, tp.scm.alpha)?;
    let mut table = BTreeMap::new();
    for (z, row) in law.conditional_table().iter().enumerate() {
        table.insert(z.to_string(), row.to_vec());
    }
    let prev = PrevalenceEstimate::table(table, alloc::vec![1.0 - law.p_y1, law.p_y1])?;
    let mut preds = Vec::with_capacity(site.data.samples.len());
    for s in &site.data.samples {
        let z = s.z.first().copied().unwrap_or(0.0) as usize;
        let x = match &data.whitening {
            Some(w) => w.invert(&s.x)?,
            None => s.x.clone(),
        };
        preds.push(argmax(&bayes_posterior(&x, z, &tp.mixing, &cfg.scm, &prev)?));
    }
    let labels: Vec<usize> = site.data.samples.iter().map(|s| s.y).collect();
    f1_score(&preds, &labels, POSITIVE_CLASS)
}

/// Test F1 at every test site for an already selected model.
pub fn evaluate_model(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    method: Method,
    net: &FusionNet,
    choice: PrevalenceChoice,
    seed: u64,
) -> Result<Vec<(String, f64)>> {
    data.sites_with_role(SiteRole::Test)
        .map(|site| {
            let labels: Vec<usize> = site.data.samples.iter().map(|s| s.y).collect();
            let f1 = match method {
                Method::Copa => evaluate_adjusted(cfg, data, &RatioModel { net: net.clone() }, site, choice, seed)?,
                Method::ErmA | Method::ErmB => {
                    let variant = if method == Method::ErmA { ErmVariant::ErmA } else { ErmVariant::ErmB };
                    let m = ErmModel {
                        variant,
                        net: net.clone(),
                    };
                    f1_score(&predict_erm(&m, &site.data.samples)?, &labels, POSITIVE_CLASS)?
                }
                Method::BayesOracle => bayes_oracle_f1(cfg, data, site)?,
            };
            Ok((site.data.site_id.clone(), f1))
        })
        .collect()
}

/// Trains `method` with `seed`, selects a checkpoint and scores test sites.
pub fn run_method_seed(cfg: &ExperimentConfig, data: &ExperimentData, method: Method, seed: u64) -> Result<SeedRun> {
    let tcfg = seeded_train_cfg(cfg, seed);
    let (net, selected_step, val_f1, history) = match method {
        Method::Copa => {
            let t = train_copa_for_seed(cfg, data, seed)?;
            (Some(t.model.net), t.selected_step, t.val_f1, t.history)
        }
        Method::ErmA | Method::ErmB => {
            let variant = if method == Method::ErmA { ErmVariant::ErmA } else { ErmVariant::ErmB };
            let hook = data.validation_hook(cfg.validation)?;
            let t = train_erm(variant, &data.training_sites(), &tcfg, cfg.classes, &hook)?;
            (Some(t.model.net), t.selected_step, t.val_f1, t.history)
        }
        Method::BayesOracle => (None, 0, f64::NAN, Vec::new()),
    };
    let test_f1 = match &net {
        Some(n) => evaluate_model(cfg, data, method, n, PrevalenceChoice::Conditional, seed)?,
        None => data
            .sites_with_role(SiteRole::Test)
            .map(|s| Ok((s.data.site_id.clone(), bayes_oracle_f1(cfg, data, s)?)))
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(SeedRun {
        method,
        seed,
        model_hash: net.as_ref().map(|n| params_hash(&n.params)).unwrap_or_default(),
        model: net,
        selected_step,
        val_f1,
        history,
        test_f1,
    })
}

/// Runs every configured method for every seed on prepared data.
pub fn run_experiment_on(cfg: &ExperimentConfig, data: &ExperimentData) -> Result<(RunReport, Vec<SeedRun>)> {
    let mut runs = Vec::new();
    for &method in &cfg.methods {
        for &seed in &cfg.seeds {
            runs.push(run_method_seed(cfg, data, method, seed)?);
        }
    }
    let rows = runs.iter().flat_map(SeedRun::rows).collect();
    Ok((RunReport::from_rows(data.config_hash.clone(), cfg.validation, rows), runs))
}

/// Synthetic end-to-end run: generate, prepare, train and score.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    let (sites, w) = prepare_synthetic(cfg)?;
    let data = prepare_experiment(cfg, sites, Some(w), true)?;
    Ok(run_experiment_on(cfg, &data)?.0)
}

/// Re-scores trained adjusted models under each configured ablation
/// variant. Models are only read, never retrained.
pub fn run_ablation(cfg: &ExperimentConfig, data: &ExperimentData, models: &[(u64, RatioModel)]) -> Result<RunReport> {
    let mut rows = Vec::new();
    for (seed, model) in models {
        let hash = params_hash(&model.net.params);
        for &variant in &cfg.ablations {
            for site in data.sites_with_role(SiteRole::Test) {
                rows.push(ResultRow {
                    method: alloc::format!("copa/{variant}"),
                    seed: *seed,
                    site_id: site.data.site_id.clone(),
                    test_f1: evaluate_adjusted(cfg, data, model, site, variant, *seed)?,
                    selected_step: 0,
                    model_hash: hash.clone(),
                });
            }
        }
    }
    Ok(RunReport::from_rows(data.config_hash.clone(), cfg.validation, rows))
}
