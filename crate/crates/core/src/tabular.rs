//! Column typing and standardization for ingested tabular data.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{config, Result};
use crate::math::sqrt;
use crate::scm::SiteDataset;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZColumnKind {
    Categorical,
    Continuous,
}

/// Declares the type of every `z` column of a dataset.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnManifest {
    pub z_columns: Vec<ZColumnKind>,
}

impl ColumnManifest {
    pub fn categorical(n: usize) -> Self {
        Self {
            z_columns: alloc::vec![ZColumnKind::Categorical; n],
        }
    }

    /// Counting works only when every `z` column is categorical.
    pub fn all_categorical(&self) -> bool {
        self.z_columns.iter().all(|k| *k == ZColumnKind::Categorical)
    }
}

/// Per-column `(mean, std)` for continuous `z` columns.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub columns: Vec<Option<(f64, f64)>>,
}

impl Standardizer {
    /// Fits means and standard deviations on `fit_sites` only.
    pub fn fit<'a>(manifest: &ColumnManifest, fit_sites: impl IntoIterator<Item = &'a SiteDataset>) -> Result<Self> {
        let m = manifest.z_columns.len();
        let mut sum = alloc::vec![0.0; m];
        let mut sq = alloc::vec![0.0; m];
        let mut n = 0usize;
        for site in fit_sites {
            for s in &site.samples {
                if s.z.len() != m {
                    return Err(config("z width does not match the column manifest"));
                }
                for (j, v) in s.z.iter().enumerate() {
                    sum[j] += v;
                    sq[j] += v * v;
                }
                n += 1;
            }
        }
        if n == 0 {
            return Err(config("no samples to fit the standardizer on"));
        }
        let columns = manifest
            .z_columns
            .iter()
            .enumerate()
            .map(|(j, kind)| match kind {
                ZColumnKind::Categorical => None,
                ZColumnKind::Continuous => {
                    let mean = sum[j] / n as f64;
                    let var = (sq[j] / n as f64 - mean * mean).max(0.0);
                    let sd = sqrt(var);
                    Some((mean, if sd > 0.0 { sd } else { 1.0 }))
                }
            })
            .collect();
        Ok(Self { columns })
    }

    pub fn apply(&self, z: &mut [f64]) {
        for (v, c) in z.iter_mut().zip(&self.columns) {
            if let Some((mean, sd)) = c {
                *v = (*v - mean) / sd;
            }
        }
    }

    pub fn apply_site(&self, site: &mut SiteDataset) {
        for s in site.samples.iter_mut() {
            self.apply(&mut s.z);
        }
        for p in site.prevalence_pairs.iter_mut() {
            self.apply(&mut p.z);
        }
    }
}
