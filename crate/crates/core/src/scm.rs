//! Synthetic multi-site data from three binary structural causal models, the
//! 2-dim feature model built on top of them, closed-form label laws, and the
//! exact Bayes posterior for the feature model.
//!
//! Label equations (`U` is a fresh `Unif(0, 1)` draw each time it appears):
//!
//! * common cause: `S ~ U`, `Y = [b*S + (1-b)*a > 0.5]`, `Z = [b*S + (1-b)*U > 0.5]`
//! * `Y -> Z`: `Y = [b*U + (1-b)*a > 0.5]`, `Z = [b*Y/2 + (1-b/2)*U > 0.5]`
//! * `Z -> Y`: `Z = [U > 0.5]`, `Y = [b*Z/2 + b*U/2 + (1-b)*a > 0.5]`
//!
//! Features: `C1 = ±c1_offset + N(0, s^2)` by `Y`, `C2 = ±c2_offset + N(0, s^2)`
//! by `Z`, and `x = W [C1, C2]` with one mixing matrix `W` shared by all sites.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{config, Error, Result};
use crate::math::{exp, sqrt};
use crate::prevalence::PrevalenceEstimate;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CausalRelation {
    CommonCause,
    #[serde(rename = "y_to_z")]
    YCausesZ,
    #[serde(rename = "z_to_y")]
    ZCausesY,
}

impl CausalRelation {
    pub const ALL: [CausalRelation; 3] = [Self::CommonCause, Self::YCausesZ, Self::ZCausesY];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::CommonCause => "common_cause",
            Self::YCausesZ => "y_to_z",
            Self::ZCausesY => "z_to_y",
        }
    }
}

impl fmt::Display for CausalRelation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CausalRelation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|r| r.as_str() == s)
            .ok_or_else(|| config(alloc::format!("unknown causal relation `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScmParams {
    pub alpha: f64,
    pub c1_offset: f64,
    pub c2_offset: f64,
    pub noise_std: f64,
}

impl Default for ScmParams {
    fn default() -> Self {
        Self {
            alpha: 0.3,
            c1_offset: 0.1,
            c2_offset: 1.0,
            noise_std: 0.1,
        }
    }
}

impl ScmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.noise_std > 0.0 && self.noise_std.is_finite()) {
            return Err(config("noise_std must be positive"));
        }
        if !(self.alpha.is_finite() && self.c1_offset.is_finite() && self.c2_offset.is_finite()) {
            return Err(config("SCM parameters must be finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteConfig {
    pub site_id: String,
    pub n_samples: usize,
    pub beta: f64,
    pub relation: CausalRelation,
    pub prevalence_pool_size: usize,
}

impl SiteConfig {
    pub fn validate(&self) -> Result<()> {
        check_beta(self.beta)?;
        if self.n_samples == 0 {
            return Err(config(alloc::format!("site `{}`: n_samples must be >= 1", self.site_id)));
        }
        if self.prevalence_pool_size == 0 {
            return Err(config(alloc::format!(
                "site `{}`: prevalence_pool_size must be >= 1",
                self.site_id
            )));
        }
        Ok(())
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if beta > 0.0 && beta < 1.0 {
        Ok(())
    } else {
        Err(config(alloc::format!("beta must lie in (0, 1), got {beta}")))
    }
}

const MAX_CONDITION: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MixingMatrix {
    pub w: [[f64; 2]; 2],
    pub seed: u64,
}

impl MixingMatrix {
    pub fn identity() -> Self {
        Self {
            w: [[1.0, 0.0], [0.0, 1.0]],
            seed: 0,
        }
    }

    pub fn det(&self) -> f64 {
        self.w[0][0] * self.w[1][1] - self.w[0][1] * self.w[1][0]
    }

    /// Ratio of the largest to the smallest singular value.
    pub fn condition_number(&self) -> f64 {
        let d = self.det().abs();
        if d == 0.0 {
            return f64::INFINITY;
        }
        let fro2: f64 = self.w.iter().flatten().map(|v| v * v).sum();
        let disc = (fro2 * fro2 - 4.0 * d * d).max(0.0);
        let smax2 = 0.5 * (fro2 + sqrt(disc));
        smax2 / d
    }

    pub fn apply(&self, c: [f64; 2]) -> [f64; 2] {
        [
            self.w[0][0] * c[0] + self.w[0][1] * c[1],
            self.w[1][0] * c[0] + self.w[1][1] * c[1],
        ]
    }

    pub fn inverse(&self) -> Result<[[f64; 2]; 2]> {
        let d = self.det();
        if d == 0.0 || !d.is_finite() {
            return Err(Error::Numerical("mixing matrix is singular".into()));
        }
        Ok([
            [self.w[1][1] / d, -self.w[0][1] / d],
            [-self.w[1][0] / d, self.w[0][0] / d],
        ])
    }
}

/// Entries i.i.d. `Unif(-1, 1)`, redrawn until the condition number is at
/// most 100.
pub fn make_mixing_matrix(seed: u64) -> MixingMatrix {
    let mut rng = rng::derived_rng(seed, &[tag::MIXING]);
    let unif = Uniform::new(-1.0, 1.0).expect("valid range");
    loop {
        let m = MixingMatrix {
            w: [
                [unif.sample(&mut rng), unif.sample(&mut rng)],
                [unif.sample(&mut rng), unif.sample(&mut rng)],
            ],
            seed,
        };
        if m.condition_number() <= MAX_CONDITION {
            return m;
        }
    }
}

/// One `(y, z)` observation used for prevalence estimation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelPair {
    pub y: usize,
    pub z: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub x: Vec<f64>,
    pub y: usize,
    pub z: Vec<f64>,
    pub site_id: String,
}

impl Sample {
    pub fn label_pair(&self) -> LabelPair {
        LabelPair {
            y: self.y,
            z: self.z.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueParams {
    pub beta: f64,
    pub relation: CausalRelation,
    pub scm: ScmParams,
    pub mixing: MixingMatrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteDataset {
    pub site_id: String,
    pub samples: Vec<Sample>,
    pub prevalence_pairs: Vec<LabelPair>,
    /// True when `prevalence_pairs` are the samples' own labels (ingested
    /// data); prevalence must then be assigned by half-split.
    #[serde(default)]
    pub pairs_from_samples: bool,
    pub true_params: Option<TrueParams>,
}

impl SiteDataset {
    /// Builds a site whose only `(y, z)` information is its own samples.
    pub fn from_samples(site_id: impl Into<String>, samples: Vec<Sample>) -> Self {
        let prevalence_pairs = samples.iter().map(Sample::label_pair).collect();
        Self {
            site_id: site_id.into(),
            samples,
            prevalence_pairs,
            pairs_from_samples: true,
            true_params: None,
        }
    }

    pub fn x_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.x.len())
    }

    pub fn z_dim(&self) -> usize {
        self.samples.first().map_or(0, |s| s.z.len())
    }
}

#[inline]
fn ind(b: bool) -> usize {
    usize::from(b)
}

pub fn gen_labels(
    relation: CausalRelation,
    beta: f64,
    params: &ScmParams,
    n: usize,
    rng_seed: u64,
) -> Result<Vec<(usize, usize)>> {
    check_beta(beta)?;
    if n == 0 {
        return Err(config("cannot generate zero labels"));
    }
    let a = params.alpha;
    let mut rng = rng::rng_from_seed(rng_seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let pair = match relation {
            CausalRelation::CommonCause => {
                let s: f64 = rng.random();
                let u: f64 = rng.random();
                let y = ind(beta * s + (1.0 - beta) * a > 0.5);
                let z = ind(beta * s + (1.0 - beta) * u > 0.5);
                (y, z)
            }
            CausalRelation::YCausesZ => {
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                let y = ind(beta * u1 + (1.0 - beta) * a > 0.5);
                let z = ind(beta * y as f64 / 2.0 + (1.0 - beta / 2.0) * u2 > 0.5);
                (y, z)
            }
            CausalRelation::ZCausesY => {
                let u1: f64 = rng.random();
                let u2: f64 = rng.random();
                let z = ind(u1 > 0.5);
                let y = ind(beta * z as f64 / 2.0 + beta * u2 / 2.0 + (1.0 - beta) * a > 0.5);
                (y, z)
            }
        };
        out.push(pair);
    }
    Ok(out)
}

pub fn gen_features_2dim(
    labels: &[(usize, usize)],
    w: &MixingMatrix,
    params: &ScmParams,
    site_id: &str,
    rng_seed: u64,
) -> Result<Vec<Sample>> {
    if labels.is_empty() {
        return Err(config("no labels to generate features for"));
    }
    params.validate()?;
    let noise = Normal::new(0.0, params.noise_std)
        .map_err(|e| config(alloc::format!("noise distribution: {e}")))?;
    let mut rng = rng::rng_from_seed(rng_seed);
    let sign = |b: usize| if b == 1 { 1.0 } else { -1.0 };
    Ok(labels
        .iter()
        .map(|&(y, z)| {
            let c1 = params.c1_offset * sign(y) + noise.sample(&mut rng);
            let c2 = params.c2_offset * sign(z) + noise.sample(&mut rng);
            Sample {
                x: w.apply([c1, c2]).to_vec(),
                y,
                z: vec![z as f64],
                site_id: site_id.into(),
            }
        })
        .collect())
}

pub fn make_site(
    cfg: &SiteConfig,
    params: &ScmParams,
    w: &MixingMatrix,
    rng_seed: u64,
) -> Result<SiteDataset> {
    cfg.validate()?;
    params.validate()?;
    let labels = gen_labels(
        cfg.relation,
        cfg.beta,
        params,
        cfg.n_samples,
        rng::derive_seed(rng_seed, &[tag::LABELS]),
    )?;
    let samples = gen_features_2dim(
        &labels,
        w,
        params,
        &cfg.site_id,
        rng::derive_seed(rng_seed, &[tag::FEATURES]),
    )?;
    let prevalence_pairs = gen_labels(
        cfg.relation,
        cfg.beta,
        params,
        cfg.prevalence_pool_size,
        rng::derive_seed(rng_seed, &[tag::POOL]),
    )?
    .into_iter()
    .map(|(y, z)| LabelPair {
        y,
        z: vec![z as f64],
    })
    .collect();
    Ok(SiteDataset {
        site_id: cfg.site_id.clone(),
        samples,
        prevalence_pairs,
        pairs_from_samples: false,
        true_params: Some(TrueParams {
            beta: cfg.beta,
            relation: cfg.relation,
            scm: *params,
            mixing: *w,
        }),
    })
}

/// Exact label probabilities of a binary SCM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LabelLaw {
    pub p_y1: f64,
    pub p_z1: f64,
    /// `P(Y = 1 | Z = z)` for `z = 0, 1`.
    pub p_y1_given_z: [f64; 2],
}

impl LabelLaw {
    /// `P(Y = y | Z = z)` as a table indexed `[z][y]`.
    pub fn conditional_table(&self) -> [[f64; 2]; 2] {
        let [a, b] = self.p_y1_given_z;
        [[1.0 - a, a], [1.0 - b, b]]
    }
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

/// `P(U > t)` for `U ~ Unif(0, 1)`.
fn tail(t: f64) -> f64 {
    1.0 - clamp01(t)
}

/// Exact integral of `clamp(p + q*s, 0, 1)` over `[a, b]`.
fn integral_clamped_linear(p: f64, q: f64, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    if q == 0.0 {
        return clamp01(p) * (b - a);
    }
    let mut cuts = [a, (0.0 - p) / q, (1.0 - p) / q, b];
    cuts[1..3].sort_by(f64::total_cmp);
    let mut total = 0.0;
    let mut lo = a;
    for &c in cuts[1..].iter() {
        let hi = c.clamp(a, b);
        if hi > lo {
            let mid = 0.5 * (lo + hi);
            let g = p + q * mid;
            total += (hi - lo) * clamp01(g);
            lo = hi;
        }
    }
    total
}

/// Closed-form label marginals and conditionals, obtained by exact
/// piecewise-linear integration of the structural equations.
pub fn label_law(relation: CausalRelation, beta: f64, alpha: f64) -> Result<LabelLaw> {
    check_beta(beta)?;
    let (p_y1, p_z1, p_y1_z1) = match relation {
        CausalRelation::CommonCause => {
            let s_star = (0.5 - (1.0 - beta) * alpha) / beta;
            // P(Z = 1 | S = s) = clamp(p + q s)
            let p = 1.0 - 0.5 / (1.0 - beta);
            let q = beta / (1.0 - beta);
            let p_y1 = tail(s_star);
            let p_z1 = integral_clamped_linear(p, q, 0.0, 1.0);
            let joint = integral_clamped_linear(p, q, clamp01(s_star), 1.0);
            (p_y1, p_z1, joint)
        }
        CausalRelation::YCausesZ => {
            let p_y1 = tail((0.5 - (1.0 - beta) * alpha) / beta);
            let z_given_y = |y: f64| tail((0.5 - beta * y / 2.0) / (1.0 - beta / 2.0));
            let p_z1 = p_y1 * z_given_y(1.0) + (1.0 - p_y1) * z_given_y(0.0);
            (p_y1, p_z1, p_y1 * z_given_y(1.0))
        }
        CausalRelation::ZCausesY => {
            let y_given_z = |z: f64| tail((0.5 - (1.0 - beta) * alpha - beta * z / 2.0) / (beta / 2.0));
            let p_z1 = 0.5;
            let p_y1 = 0.5 * (y_given_z(0.0) + y_given_z(1.0));
            (p_y1, p_z1, 0.5 * y_given_z(1.0))
        }
    };
    let p_y1_z0 = p_y1 - p_y1_z1;
    let cond = |joint: f64, pz: f64| if pz > 0.0 { clamp01(joint / pz) } else { p_y1 };
    Ok(LabelLaw {
        p_y1,
        p_z1,
        p_y1_given_z: [cond(p_y1_z0, 1.0 - p_z1), cond(p_y1_z1, p_z1)],
    })
}

/// Exact posterior `P(Y | x, z, site)` of the 2-dim feature model.
///
/// Only the `C1` likelihood depends on `y`; the `C2` term and the Jacobian of
/// `W` cancel in the normalization.
pub fn bayes_posterior(
    x: &[f64],
    z: usize,
    w: &MixingMatrix,
    params: &ScmParams,
    prevalence: &PrevalenceEstimate,
) -> Result<Vec<f64>> {
    crate::error::check_dim("bayes_posterior x", 2, x.len())?;
    let inv = w.inverse()?;
    let c1 = inv[0][0] * x[0] + inv[0][1] * x[1];
    let prior = prevalence.query(&[z as f64])?;
    crate::error::check_dim("bayes_posterior prevalence", 2, prior.len())?;
    let var = params.noise_std * params.noise_std;
    let loglik = |mu: f64| -(c1 - mu) * (c1 - mu) / (2.0 * var);
    let l0 = loglik(-params.c1_offset);
    let l1 = loglik(params.c1_offset);
    let m = l0.max(l1);
    let u0 = prior[0] * exp(l0 - m);
    let u1 = prior[1] * exp(l1 - m);
    let s = u0 + u1;
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numerical("posterior has no mass".into()));
    }
    Ok(vec![u0 / s, u1 / s])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prevalence::{uniform_prevalence, PrevalenceEstimate};

    #[test]
    fn relation_names_are_stable() {
        for r in CausalRelation::ALL {
            let json = serde_json::to_string(&r).unwrap();
            assert_eq!(json, alloc::format!("\"{}\"", r.as_str()));
            assert_eq!(r.as_str().parse::<CausalRelation>().unwrap(), r);
        }
        assert_eq!(CausalRelation::YCausesZ.as_str(), "y_to_z");
    }

    #[test]
    fn gen_labels_rejects_bad_config() {
        let p = ScmParams::default();
        assert!(gen_labels(CausalRelation::CommonCause, 0.0, &p, 10, 0).is_err());
        assert!(gen_labels(CausalRelation::CommonCause, 1.0, &p, 10, 0).is_err());
        assert!(gen_labels(CausalRelation::CommonCause, 0.5, &p, 0, 0).is_err());
    }

    #[test]
    fn z_causes_y_small_beta_is_single_class() {
        let p = ScmParams::default();
        let labels = gen_labels(CausalRelation::ZCausesY, 1e-9, &p, 5000, 3).unwrap();
        assert!(labels.iter().all(|&(y, _)| y == 0));
    }

    #[test]
    fn zero_noise_features_follow_structural_equation() {
        let p = ScmParams {
            noise_std: 1e-300,
            ..ScmParams::default()
        };
        let w = MixingMatrix::identity();
        let s = gen_features_2dim(&[(1, 1), (0, 0)], &w, &p, "a", 0).unwrap();
        assert!((s[0].x[0] - 0.1).abs() < 1e-12 && (s[0].x[1] - 1.0).abs() < 1e-12);
        assert!((s[1].x[0] + 0.1).abs() < 1e-12 && (s[1].x[1] + 1.0).abs() < 1e-12);
        assert_eq!(s[0].z, vec![1.0]);
    }

    #[test]
    fn mixing_matrix_contract() {
        let a = make_mixing_matrix(0);
        assert_eq!(a, make_mixing_matrix(0));
        assert_ne!(a.w, make_mixing_matrix(1).w);
        for seed in 0..200 {
            let m = make_mixing_matrix(seed);
            assert!(m.det().abs() > 0.0);
            assert!(m.condition_number() <= 100.0);
        }
    }

    #[test]
    fn condition_number_of_diagonal() {
        let m = MixingMatrix {
            w: [[2.0, 0.0], [0.0, 0.5]],
            seed: 0,
        };
        assert!((m.condition_number() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn make_site_sizes_and_seeds() {
        let cfg = SiteConfig {
            site_id: "s".into(),
            n_samples: 10_000,
            beta: 0.9,
            relation: CausalRelation::CommonCause,
            prevalence_pool_size: 1000,
        };
        let p = ScmParams::default();
        let w = make_mixing_matrix(5);
        let a = make_site(&cfg, &p, &w, 1).unwrap();
        assert_eq!(a.samples.len(), 10_000);
        assert_eq!(a.prevalence_pairs.len(), 1000);
        let b = make_site(&cfg, &p, &w, 2).unwrap();
        assert_ne!(a.samples, b.samples);
        assert_eq!(a, make_site(&cfg, &p, &w, 1).unwrap());
        let pos = a.samples.iter().filter(|s| s.y == 1).count() as f64 / 10_000.0;
        assert!((pos - 0.4778).abs() < 0.02, "{pos}");
    }

    #[test]
    fn label_law_common_cause_marginals() {
        let l = label_law(CausalRelation::CommonCause, 0.9, 0.3).unwrap();
        assert!((l.p_y1 - 0.47777777).abs() < 1e-6);
        let l = label_law(CausalRelation::CommonCause, 0.3, 0.3).unwrap();
        assert!((l.p_y1 - 0.0333333).abs() < 1e-6);
    }

    #[test]
    fn integral_of_clamped_linear_pieces() {
        // clamp(2s - 0.5) on [0,1]: 0 until 0.25, linear until 0.75, then 1
        let v = integral_clamped_linear(-0.5, 2.0, 0.0, 1.0);
        assert!((v - (0.25 + 0.25)).abs() < 1e-12);
        assert!((integral_clamped_linear(0.3, 0.0, 0.0, 2.0) - 0.6).abs() < 1e-12);
        assert!((integral_clamped_linear(1.0, -1.0, 0.0, 1.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn posterior_examples() {
        let p = ScmParams::default();
        let w = MixingMatrix::identity();
        let uni = uniform_prevalence(2).unwrap();
        let post = bayes_posterior(&[0.0, 0.7], 1, &w, &p, &uni).unwrap();
        assert!((post[0] - 0.5).abs() < 1e-12);
        let post = bayes_posterior(&[0.1, -1.0], 0, &w, &p, &uni).unwrap();
        let sigma2 = 1.0 / (1.0 + exp(-2.0));
        assert!((post[1] - sigma2).abs() < 1e-12);
        assert!((post[1] - 0.8808).abs() < 1e-4);
        // prior 0.9 on y=0 beats a likelihood ratio of e^2 ~ 7.39
        let skewed = PrevalenceEstimate::marginal(alloc::vec![0.9, 0.1]).unwrap();
        let post = bayes_posterior(&[0.1, 0.0], 0, &w, &p, &skewed).unwrap();
        let expected = 0.1 * exp(2.0) / (0.1 * exp(2.0) + 0.9);
        assert!((post[1] - expected).abs() < 1e-12);
        assert!(post[0] > post[1]);
    }

    #[test]
    fn posterior_rejects_singular_mixing() {
        let w = MixingMatrix {
            w: [[1.0, 2.0], [2.0, 4.0]],
            seed: 0,
        };
        let uni = uniform_prevalence(2).unwrap();
        assert!(matches!(
            bayes_posterior(&[0.0, 0.0], 0, &w, &ScmParams::default(), &uni),
            Err(Error::Numerical(_))
        ));
    }
}
