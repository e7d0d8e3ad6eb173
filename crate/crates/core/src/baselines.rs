//! Empirical risk minimization baselines on the same late-fusion network.
//! `ErmA` sees only `x` (the head's fusion width for `z` is zero); `ErmB`
//! sees `x` and `z`. Both use the softmax output directly as `P(Y | input)`.

use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

use crate::copa::{TrainConfig, Trained};
use crate::error::{check_dim, config, Result};
use crate::eval::{select_checkpoint, ValidationHook};
use crate::math::argmax;
use crate::nn::{FusionArch, FusionNet};
use crate::scm::Sample;
use crate::train::{Checkpoint, Objective, Trainer, TrainingSite};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ErmVariant {
    ErmA,
    ErmB,
}

impl ErmVariant {
    pub fn uses_z(self) -> bool {
        self == ErmVariant::ErmB
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ErmVariant::ErmA => "erm_a",
            ErmVariant::ErmB => "erm_b",
        }
    }
}

impl fmt::Display for ErmVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErmModel {
    pub variant: ErmVariant,
    pub net: FusionNet,
}

pub fn erm_arch(variant: ErmVariant, cfg: &TrainConfig, x_dim: usize, z_dim: usize, classes: usize) -> FusionArch {
    cfg.arch(x_dim, if variant.uses_z() { z_dim } else { 0 }, classes)
}

pub fn train_erm(
    variant: ErmVariant,
    sites: &[TrainingSite<'_>],
    cfg: &TrainConfig,
    classes: usize,
    val: &ValidationHook,
) -> Result<Trained<ErmModel>> {
    let first = sites
        .first()
        .and_then(|s| s.samples.first())
        .ok_or_else(|| config("at least one non-empty training site is required"))?;
    let arch = erm_arch(variant, cfg, first.x.len(), first.z.len(), classes);
    let mut trainer = Trainer::new(arch, sites.to_vec(), cfg.clone(), Objective::Plain)?;
    trainer.run()?;
    select_erm(variant, arch, &trainer.into_state().checkpoints, val)
}

pub fn select_erm(variant: ErmVariant, arch: FusionArch, checkpoints: &[Checkpoint], val: &ValidationHook) -> Result<Trained<ErmModel>> {
    let sel = select_checkpoint(checkpoints, |params| {
        let model = ErmModel {
            variant,
            net: FusionNet::with_params(arch, params.to_vec())?,
        };
        val.score_erm(&model)
    })?;
    Ok(Trained {
        model: ErmModel {
            variant,
            net: FusionNet::with_params(arch, checkpoints[sel.index].params.clone())?,
        },
        selected_step: sel.step,
        val_f1: sel.score,
        history: sel.history,
    })
}

impl ErmModel {
    pub fn probs(&self, samples: &[Sample]) -> Result<Vec<Vec<f64>>> {
        if samples.is_empty() {
            return Ok(Vec::new());
        }
        let arch = *self.net.arch();
        let mut xs = Vec::with_capacity(samples.len() * arch.x_dim);
        let mut zs = Vec::with_capacity(samples.len() * arch.z_dim);
        for s in samples {
            check_dim("sample x", arch.x_dim, s.x.len())?;
            xs.extend_from_slice(&s.x);
            if arch.z_dim > 0 {
                check_dim("sample z", arch.z_dim, s.z.len())?;
                zs.extend_from_slice(&s.z);
            }
        }
        let cache = self.net.forward(&xs, &zs, samples.len())?;
        Ok(cache
            .probs()
            .chunks(arch.classes)
            .map(<[f64]>::to_vec)
            .collect())
    }
}

/// Argmax of the softmax output, ties to the smaller class.
pub fn predict_erm(model: &ErmModel, samples: &[Sample]) -> Result<Vec<usize>> {
    Ok(model.probs(samples)?.iter().map(|p| argmax(p)).collect())
}
