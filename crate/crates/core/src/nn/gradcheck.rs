//! Central finite-difference gradient checks.

use alloc::vec::Vec;

use rand::seq::index;

use super::{loss_and_grad, MlpParams, Target};
use crate::error::Result;
use crate::rng::{self, tag};

/// Coordinates are checked exhaustively up to this many parameters, and a
/// seeded subsample of `SUBSAMPLE` coordinates is used above it.
const EXHAUSTIVE_LIMIT: usize = 2000;
const SUBSAMPLE: usize = 256;

/// `|a - b| / max(|a|, |b|, 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between `analytic` and central differences of `f`
/// around `params`.
pub fn grad_check_fn<F>(params: &[f64], analytic: &[f64], mut f: F, h: f64, seed: u64) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let coords: Vec<usize> = if params.len() <= EXHAUSTIVE_LIMIT {
        (0..params.len()).collect()
    } else {
        let mut r = rng::derived_rng(seed, &[tag::GRAD_CHECK]);
        let mut c = index::sample(&mut r, params.len(), SUBSAMPLE).into_vec();
        c.sort_unstable();
        c
    };
    let mut work = params.to_vec();
    let mut worst: f64 = 0.0;
    for i in coords {
        let orig = work[i];
        work[i] = orig + h;
        let up = f(&work);
        work[i] = orig - h;
        let down = f(&work);
        work[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max(relative_error(analytic[i], numeric));
    }
    worst
}

pub fn grad_check(params: &MlpParams, batch: &[(Vec<f64>, Target)], h: f64) -> Result<f64> {
    let (_, analytic) = loss_and_grad(params, batch)?;
    let mut probe = params.clone();
    Ok(grad_check_fn(
        &params.values,
        &analytic,
        |v| {
            probe.values.copy_from_slice(v);
            loss_and_grad(&probe, batch).map(|r| r.0).unwrap_or(f64::NAN)
        },
        h,
        0,
    ))
}
