//! Metrics, checkpoint selection, run reports and the experiment driver.

mod experiment;

pub use experiment::{
    evaluate_adjusted, evaluate_model, evaluate_with_estimate, prepare_experiment, prepare_synthetic, run_ablation, run_experiment,
    run_experiment_on, run_method_seed, site_prevalence, test_prevalence, train_copa_for_seed, ExperimentData, PreparedSite,
    SeedRun, TestPrevalence,
};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::baselines::{predict_erm, ErmModel};
use crate::copa::{predict_adjusted, RatioModel};
use crate::error::{check_dim, config, Result};
use crate::math::sqrt;
use crate::scm::Sample;
use crate::train::Checkpoint;

/// The class treated as positive for F1 throughout.
pub const POSITIVE_CLASS: usize = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn from_predictions(preds: &[usize], labels: &[usize], positive: usize) -> Result<Self> {
        check_dim("predictions vs labels", labels.len(), preds.len())?;
        let mut c = Self::default();
        for (&p, &l) in preds.iter().zip(labels) {
            match (p == positive, l == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// `2tp / (2tp + fp + fn)`, and 0 when nothing is predicted or present.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            (2 * self.tp) as f64 / denom as f64
        }
    }
}

/// `K x K` confusion matrix indexed `[true][predicted]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiConfusion {
    pub counts: Vec<Vec<usize>>,
}

impl MultiConfusion {
    pub fn from_predictions(preds: &[usize], labels: &[usize], classes: usize) -> Result<Self> {
        check_dim("predictions vs labels", labels.len(), preds.len())?;
        let mut counts = vec![vec![0; classes]; classes];
        for (&p, &l) in preds.iter().zip(labels) {
            if p >= classes || l >= classes {
                return Err(config("class index out of range"));
            }
            counts[l][p] += 1;
        }
        Ok(Self { counts })
    }

    /// One-vs-rest counts for class `c`.
    pub fn one_vs_rest(&self, c: usize) -> ConfusionCounts {
        let k = self.counts.len();
        let mut out = ConfusionCounts::default();
        for t in 0..k {
            for p in 0..k {
                let n = self.counts[t][p];
                match (p == c, t == c) {
                    (true, true) => out.tp += n,
                    (true, false) => out.fp += n,
                    (false, true) => out.fn_ += n,
                    (false, false) => out.tn += n,
                }
            }
        }
        out
    }
}

pub fn f1_score(preds: &[usize], labels: &[usize], positive: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(config("cannot score an empty prediction set"));
    }
    Ok(ConfusionCounts::from_predictions(preds, labels, positive)?.f1())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ValidationMode {
    /// Held-out samples from the training sites.
    Internal,
    /// An unseen validation site.
    #[default]
    External,
}

/// Validation data for checkpoint selection. For the adjusted model each
/// sample carries the prevalence of the site it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ValidationHook {
    pub mode: ValidationMode,
    pub samples: Vec<Sample>,
    pub prevalence: Vec<Vec<f64>>,
}

impl ValidationHook {
    fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.y).collect()
    }

    pub fn score_adjusted(&self, model: &RatioModel) -> Result<f64> {
        let preds: Vec<usize> = predict_adjusted(model, &self.samples, &self.prevalence)?
            .into_iter()
            .map(|p| p.label)
            .collect();
        f1_score(&preds, &self.labels(), POSITIVE_CLASS)
    }

    pub fn score_erm(&self, model: &ErmModel) -> Result<f64> {
        f1_score(&predict_erm(model, &self.samples)?, &self.labels(), POSITIVE_CLASS)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointRecord {
    pub step: usize,
    pub train_loss: f64,
    pub val_f1: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub index: usize,
    pub step: usize,
    pub score: f64,
    pub history: Vec<CheckpointRecord>,
}

/// Scores every checkpoint and keeps the best; ties go to the earliest step.
pub fn select_checkpoint<F>(checkpoints: &[Checkpoint], mut score: F) -> Result<Selection>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if checkpoints.is_empty() {
        return Err(config("no checkpoints to select from"));
    }
    let mut history = Vec::with_capacity(checkpoints.len());
    let mut best = 0;
    for (i, c) in checkpoints.iter().enumerate() {
        let s = score(&c.params)?;
        history.push(CheckpointRecord {
            step: c.step,
            train_loss: c.train_loss,
            val_f1: s,
        });
        if s > history[best].val_f1 {
            best = i;
        }
    }
    Ok(Selection {
        index: best,
        step: checkpoints[best].step,
        score: history[best].val_f1,
        history,
    })
}

/// Sample mean and standard error (`std / sqrt(n)`, with the `n - 1` sample
/// standard deviation; zero for a single value).
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, sqrt(var) / sqrt(n as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub seed: u64,
    pub site_id: String,
    pub test_f1: f64,
    pub selected_step: usize,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub method: String,
    pub site_id: String,
    pub seeds: Vec<u64>,
    pub per_seed_f1: Vec<f64>,
    pub selected_steps: Vec<usize>,
    pub mean: f64,
    pub std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub validation: ValidationMode,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<Summary>,
}

impl RunReport {
    pub fn from_rows(config_hash: String, validation: ValidationMode, rows: Vec<ResultRow>) -> Self {
        let mut summary: Vec<Summary> = Vec::new();
        for r in &rows {
            let entry = match summary
                .iter_mut()
                .position(|s| s.method == r.method && s.site_id == r.site_id)
            {
                Some(i) => &mut summary[i],
                None => {
                    summary.push(Summary {
                        method: r.method.clone(),
                        site_id: r.site_id.clone(),
                        seeds: Vec::new(),
                        per_seed_f1: Vec::new(),
                        selected_steps: Vec::new(),
                        mean: 0.0,
                        std_err: 0.0,
                    });
                    summary.last_mut().expect("just pushed")
                }
            };
            entry.seeds.push(r.seed);
            entry.per_seed_f1.push(r.test_f1);
            entry.selected_steps.push(r.selected_step);
        }
        for s in summary.iter_mut() {
            let (m, se) = mean_and_stderr(&s.per_seed_f1);
            s.mean = m;
            s.std_err = se;
        }
        Self {
            config_hash,
            validation,
            rows,
            summary,
        }
    }

    /// Mean F1 of `method` on its first reported site.
    pub fn mean_f1(&self, method: &str) -> Option<f64> {
        self.summary.iter().find(|s| s.method == method).map(|s| s.mean)
    }

    pub fn summary_for(&self, method: &str, site_id: &str) -> Option<&Summary> {
        self.summary
            .iter()
            .find(|s| s.method == method && s.site_id == site_id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_examples() {
        assert_eq!(f1_score(&[1, 0, 1], &[1, 0, 1], 1).unwrap(), 1.0);
        assert_eq!(f1_score(&[0, 0, 0], &[1, 0, 1], 1).unwrap(), 0.0);
        assert_eq!(f1_score(&[0, 0], &[0, 0], 1).unwrap(), 0.0);
        let mut preds = vec![1; 8];
        let mut labels = vec![1; 8];
        preds.extend([1, 1, 0, 0, 0, 0]);
        labels.extend([0, 0, 1, 1, 1, 1]);
        assert!((f1_score(&preds, &labels, 1).unwrap() - 16.0 / 22.0).abs() < 1e-15);
        assert!(f1_score(&[1], &[1, 0], 1).is_err());
        assert!(f1_score(&[], &[], 1).is_err());
    }

    #[test]
    fn multiclass_one_vs_rest() {
        let m = MultiConfusion::from_predictions(&[0, 1, 2, 2], &[0, 2, 2, 1], 3).unwrap();
        let c = m.one_vs_rest(2);
        assert_eq!((c.tp, c.fp, c.fn_, c.tn), (1, 1, 1, 1));
        assert_eq!(c.total(), 4);
    }

    fn ckpt(step: usize) -> Checkpoint {
        Checkpoint {
            step,
            train_loss: 0.0,
            params: vec![step as f64],
        }
    }

    #[test]
    fn selection_rules() {
        let one = select_checkpoint(&[ckpt(500)], |_| Ok(0.2)).unwrap();
        assert_eq!(one.step, 500);
        let rising: Vec<Checkpoint> = (1..=4).map(|i| ckpt(i * 500)).collect();
        assert_eq!(select_checkpoint(&rising, |p| Ok(p[0])).unwrap().step, 2000);
        let flat = select_checkpoint(&rising, |_| Ok(0.5)).unwrap();
        assert_eq!(flat.step, 500);
        assert!(select_checkpoint(&[], |_| Ok(0.0)).is_err());
    }

    #[test]
    fn stderr_matches_definition() {
        let (m, se) = mean_and_stderr(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m, 2.5);
        assert!((se - sqrt(5.0 / 3.0) / 2.0).abs() < 1e-15);
        assert_eq!(mean_and_stderr(&[0.7]), (0.7, 0.0));
    }
}
