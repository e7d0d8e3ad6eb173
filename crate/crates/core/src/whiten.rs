//! Affine feature whitening `x' = L⁻¹(x − μ)` where `L Lᵀ` is the sample
//! covariance. Fitted on training features only.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::math::sqrt;

/// Relative ridge added to the covariance diagonal.
const RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Whitening {
    pub mean: Vec<f64>,
    /// Row-major lower Cholesky factor of the covariance.
    pub chol: Vec<f64>,
}

impl Whitening {
    pub fn fit<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let rows: Vec<&[f64]> = rows.into_iter().collect();
        let d = rows.first().map(|r| r.len()).ok_or_else(|| Error::Config("no rows to whiten".into()))?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            check_dim("whitening row", d, r.len())?;
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v / n;
            }
        }
        let mut cov = vec![0.0; d * d];
        for r in &rows {
            for i in 0..d {
                for j in 0..=i {
                    cov[i * d + j] += (r[i] - mean[i]) * (r[j] - mean[j]) / n;
                }
            }
        }
        let scale = (0..d).map(|i| cov[i * d + i]).sum::<f64>() / d as f64;
        for i in 0..d {
            cov[i * d + i] += RIDGE * scale.max(1.0);
        }
        let mut chol = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..=i {
                let s: f64 = (0..j).map(|k| chol[i * d + k] * chol[j * d + k]).sum();
                if i == j {
                    let v = cov[i * d + i] - s;
                    if !(v > 0.0) {
                        return Err(Error::Numerical("feature covariance is not positive definite".into()));
                    }
                    chol[i * d + i] = sqrt(v);
                } else {
                    chol[i * d + j] = (cov[i * d + j] - s) / chol[j * d + j];
                }
            }
        }
        Ok(Self { mean, chol })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_dim("whitening input", d, x.len())?;
        let mut out = vec![0.0; d];
        for i in 0..d {
            let s: f64 = (0..i).map(|k| self.chol[i * d + k] * out[k]).sum();
            out[i] = (x[i] - self.mean[i] - s) / self.chol[i * d + i];
        }
        Ok(out)
    }

    pub fn invert(&self, w: &[f64]) -> Result<Vec<f64>> {
        let d = self.dim();
        check_dim("whitened input", d, w.len())?;
        Ok((0..d)
            .map(|i| self.mean[i] + (0..=i).map(|k| self.chol[i * d + k] * w[k]).sum::<f64>())
            .collect())
    }
}
