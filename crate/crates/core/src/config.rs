//! Experiment configuration: the sites of a run and their roles, the
//! methods to train, training hyperparameters, validation mode, ablation
//! variants and seeds.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::copa::TrainConfig;
use crate::error::{config, Error, Result};
use crate::eval::ValidationMode;
use crate::hash::json_hash;
use crate::prevalence::{AuxTrainConfig, SmoothingConfig};
use crate::scm::{CausalRelation, ScmParams, SiteConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteRole {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteEntry {
    pub site_id: String,
    pub role: SiteRole,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta: Option<f64>,
    #[serde(default = "default_pool")]
    pub prevalence_pool_size: usize,
    /// Overrides the experiment-level relation for this site.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub relation: Option<CausalRelation>,
}

fn default_pool() -> usize {
    1000
}

impl SiteEntry {
    pub fn synthetic(site_id: &str, role: SiteRole, n_samples: usize, beta: f64, pool: usize) -> Self {
        Self {
            site_id: site_id.into(),
            role,
            n_samples: Some(n_samples),
            beta: Some(beta),
            prevalence_pool_size: pool,
            relation: None,
        }
    }

    pub fn site_config(&self, relation: CausalRelation) -> Result<SiteConfig> {
        let cfg = SiteConfig {
            site_id: self.site_id.clone(),
            n_samples: self
                .n_samples
                .ok_or_else(|| config(alloc::format!("site `{}` needs n_samples", self.site_id)))?,
            beta: self
                .beta
                .ok_or_else(|| config(alloc::format!("site `{}` needs beta", self.site_id)))?,
            relation: self.relation.unwrap_or(relation),
            prevalence_pool_size: self.prevalence_pool_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Copa,
    ErmA,
    ErmB,
    /// Exact Bayes posterior with the true test conditionals (synthetic only).
    BayesOracle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Copa => "copa",
            Method::ErmA => "erm_a",
            Method::ErmB => "erm_b",
            Method::BayesOracle => "bayes_oracle",
        }
    }

    pub fn is_trained(self) -> bool {
        self != Method::BayesOracle
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Method::Copa, Method::ErmA, Method::ErmB, Method::BayesOracle]
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| config(alloc::format!("unknown method `{s}`")))
    }
}

/// Which prevalence the adjusted model is evaluated with at a test site.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum PrevalenceChoice {
    /// The site's conditional estimate used for the main results.
    Conditional,
    /// Counting on `L` pairs drawn from the site's pool.
    Subsample(usize),
    Marginal,
    Uniform,
    /// Marginal prevalence with `z` summed out over sampled values.
    Marginalized,
}

impl PrevalenceChoice {
    pub fn ablation_defaults() -> Vec<PrevalenceChoice> {
        vec![
            Self::Subsample(100_000),
            Self::Subsample(10_000),
            Self::Subsample(1_000),
            Self::Subsample(100),
            Self::Subsample(10),
            Self::Marginal,
            Self::Uniform,
            Self::Marginalized,
        ]
    }
}

impl fmt::Display for PrevalenceChoice {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Conditional => f.write_str("conditional"),
            Self::Subsample(l) => write!(f, "subsample:{l}"),
            Self::Marginal => f.write_str("marginal"),
            Self::Uniform => f.write_str("uniform"),
            Self::Marginalized => f.write_str("marginalized"),
        }
    }
}

impl FromStr for PrevalenceChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conditional" => Ok(Self::Conditional),
            "marginal" => Ok(Self::Marginal),
            "uniform" => Ok(Self::Uniform),
            "marginalized" => Ok(Self::Marginalized),
            _ => {
                let l = s
                    .strip_prefix("subsample:")
                    .and_then(|v| v.parse::<usize>().ok())
                    .filter(|l| *l > 0)
                    .ok_or_else(|| config(alloc::format!("unknown prevalence choice `{s}`")))?;
                Ok(Self::Subsample(l))
            }
        }
    }
}

impl TryFrom<String> for PrevalenceChoice {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PrevalenceChoice> for String {
    fn from(c: PrevalenceChoice) -> Self {
        c.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSource {
    #[default]
    Synthetic,
    /// A CSV of samples plus a column-type manifest, paths relative to the
    /// config file.
    Tabular { csv: String, manifest: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub name: String,
    pub relation: CausalRelation,
    pub scm: ScmParams,
    pub data: DataSource,
    /// Seeds the mixing matrix and every site.
    pub data_seed: u64,
    pub sites: Vec<SiteEntry>,
    pub methods: Vec<Method>,
    pub train: TrainConfig,
    pub validation: ValidationMode,
    /// Pairs used for each site's conditional estimate (capped at the pool).
    pub prevalence_l: usize,
    pub smoothing: SmoothingConfig,
    pub aux: AuxTrainConfig,
    pub ablations: Vec<PrevalenceChoice>,
    pub marginalize_draws: usize,
    pub seeds: Vec<u64>,
    pub classes: usize,
    /// Held-out size for internal validation; defaults to the validation
    /// site's size, or 500.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub internal_val_size: Option<usize>,
    /// Whiten features with statistics of the training sites before any
    /// model sees them.
    pub whiten_inputs: bool,
    pub output_dir: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            relation: CausalRelation::CommonCause,
            scm: ScmParams::default(),
            data: DataSource::Synthetic,
            data_seed: 0,
            sites: Vec::new(),
            methods: vec![Method::Copa, Method::ErmA, Method::ErmB],
            train: TrainConfig::default(),
            validation: ValidationMode::External,
            prevalence_l: 1000,
            smoothing: SmoothingConfig::default(),
            aux: AuxTrainConfig::default(),
            ablations: PrevalenceChoice::ablation_defaults(),
            marginalize_draws: 10,
            seeds: (0..5).collect(),
            classes: 2,
            internal_val_size: None,
            whiten_inputs: true,
            output_dir: "runs".into(),
        }
    }
}

impl ExperimentConfig {
    /// Two training sites `(10k, 0.9)` and `(10k, 0.7)`, an external
    /// validation site `(0.5k, 0.5)` and a test site `(1k, 0.3)`.
    pub fn multi_site(relation: CausalRelation) -> Self {
        Self {
            name: alloc::format!("multi_{relation}"),
            relation,
            sites: vec![
                SiteEntry::synthetic("train_0.9", SiteRole::Train, 10_000, 0.9, 1000),
                SiteEntry::synthetic("train_0.7", SiteRole::Train, 10_000, 0.7, 1000),
                SiteEntry::synthetic("val_0.5", SiteRole::Validation, 500, 0.5, 1000),
                SiteEntry::synthetic("test_0.3", SiteRole::Test, 1000, 0.3, 100_000),
            ],
            ..Self::default()
        }
    }

    /// One training site `(20k, 0.9)` with the same validation and test sites.
    pub fn single_site(relation: CausalRelation) -> Self {
        Self {
            name: alloc::format!("single_{relation}"),
            relation,
            sites: vec![
                SiteEntry::synthetic("train_0.9", SiteRole::Train, 20_000, 0.9, 1000),
                SiteEntry::synthetic("val_0.5", SiteRole::Validation, 500, 0.5, 1000),
                SiteEntry::synthetic("test_0.3", SiteRole::Test, 1000, 0.3, 100_000),
            ],
            ..Self::default()
        }
    }

    pub fn sites_with_role(&self, role: SiteRole) -> impl Iterator<Item = &SiteEntry> {
        self.sites.iter().filter(move |s| s.role == role)
    }

    pub fn is_synthetic(&self) -> bool {
        self.data == DataSource::Synthetic
    }

    pub fn validate(&self) -> Result<()> {
        if self.sites_with_role(SiteRole::Train).next().is_none() {
            return Err(config("at least one training site is required"));
        }
        if self.sites_with_role(SiteRole::Test).next().is_none() {
            return Err(config("at least one test site is required"));
        }
        let mut ids = BTreeSet::new();
        for s in &self.sites {
            if s.site_id.is_empty() || !ids.insert(s.site_id.as_str()) {
                return Err(config(alloc::format!("site id `{}` is empty or repeated", s.site_id)));
            }
            if s.prevalence_pool_size == 0 {
                return Err(config(alloc::format!("site `{}` needs a prevalence pool", s.site_id)));
            }
            if self.is_synthetic() {
                s.site_config(self.relation)?;
            }
        }
        if self.validation == ValidationMode::External && self.sites_with_role(SiteRole::Validation).next().is_none() {
            return Err(config("external validation needs a validation site"));
        }
        if self.methods.is_empty() {
            return Err(config("no methods configured"));
        }
        if self.methods.contains(&Method::BayesOracle) && !self.is_synthetic() {
            return Err(config("bayes_oracle needs synthetic data"));
        }
        if self.seeds.is_empty() {
            return Err(config("at least one seed is required"));
        }
        if self.seeds.iter().collect::<BTreeSet<_>>().len() != self.seeds.len() {
            return Err(config("seeds must be distinct"));
        }
        if self.classes < 2 {
            return Err(config("need at least two classes"));
        }
        if self.is_synthetic() && self.classes != 2 {
            return Err(config("synthetic data is binary"));
        }
        if self.prevalence_l == 0 || self.marginalize_draws == 0 {
            return Err(config("prevalence_l and marginalize_draws must be >= 1"));
        }
        if self.internal_val_size == Some(0) {
            return Err(config("internal_val_size must be >= 1"));
        }
        self.scm.validate()?;
        self.train.validate()?;
        Ok(())
    }

    /// Hash of everything that determines results; `output_dir` is excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = String::new();
        json_hash(&c)
    }
}
