//! Resumable mini-batch trainer shared by the prevalence-adjusted model and
//! the ERM baselines.
//!
//! Batches come from per-group shuffled epochs. With site cycling each
//! training site is its own group and step `t` draws from site `t mod n`;
//! without it all samples form one pooled group. The permutation of epoch
//! `e` of group `g` is a pure function of `(seed, g, e)`, so the trainer
//! state is plain data and a resumed run replays the uninterrupted one
//! exactly.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::copa::TrainConfig;
use crate::error::{check_dim, config, Error, Result};
use crate::math::ln;
use crate::nn::{cross_entropy_grad, AdamState, FusionArch, FusionNet, Target, PROB_FLOOR};
use crate::rng::{self, tag};
use crate::scm::Sample;

/// Samples of one training site and, for the adjusted objective, the
/// prevalence vector assigned to each sample.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSite<'a> {
    pub samples: &'a [Sample],
    pub prevalence: &'a [Vec<f64>],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Objective {
    /// Cross-entropy on `prev ⊙ f(x, z)`, renormalized when `normalize`.
    Adjusted { normalize: bool },
    /// Cross-entropy on `f(x, z)`.
    Plain,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub step: usize,
    /// Mean batch loss since the previous checkpoint.
    pub train_loss: f64,
    pub params: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainerState {
    pub step: usize,
    pub params: Vec<f64>,
    pub adam: AdamState,
    pub cursors: Vec<usize>,
    pub epochs: Vec<u64>,
    pub checkpoints: Vec<Checkpoint>,
    pub loss_sum: f64,
    pub loss_count: usize,
}

pub struct Trainer<'a> {
    net: FusionNet,
    sites: Vec<TrainingSite<'a>>,
    cfg: TrainConfig,
    objective: Objective,
    groups: Vec<Vec<(usize, usize)>>,
    perms: Vec<Vec<usize>>,
    state: TrainerState,
}

impl<'a> Trainer<'a> {
    pub fn new(arch: FusionArch, sites: Vec<TrainingSite<'a>>, cfg: TrainConfig, objective: Objective) -> Result<Self> {
        cfg.validate()?;
        if sites.is_empty() {
            return Err(config("at least one training site is required"));
        }
        for s in &sites {
            if s.samples.is_empty() {
                return Err(config("training site has no samples"));
            }
            for smp in s.samples {
                check_dim("training x", arch.x_dim, smp.x.len())?;
                if arch.z_dim > 0 {
                    check_dim("training z", arch.z_dim, smp.z.len())?;
                }
                if smp.y >= arch.classes {
                    return Err(config("training label out of range"));
                }
            }
            if matches!(objective, Objective::Adjusted { .. }) {
                check_dim("training prevalence", s.samples.len(), s.prevalence.len())?;
                if s.prevalence.iter().any(|p| p.len() != arch.classes) {
                    return Err(config("prevalence vectors must have one entry per class"));
                }
            }
        }
        let net = FusionNet::new(arch, cfg.seed)?;
        let groups: Vec<Vec<(usize, usize)>> = if cfg.site_cycling {
            sites
                .iter()
                .enumerate()
                .map(|(si, s)| (0..s.samples.len()).map(|i| (si, i)).collect())
                .collect()
        } else {
            vec![sites
                .iter()
                .enumerate()
                .flat_map(|(si, s)| (0..s.samples.len()).map(move |i| (si, i)))
                .collect()]
        };
        let state = TrainerState {
            step: 0,
            params: net.params.clone(),
            adam: AdamState::new(net.num_params(), cfg.lr),
            cursors: vec![0; groups.len()],
            epochs: vec![0; groups.len()],
            checkpoints: Vec::new(),
            loss_sum: 0.0,
            loss_count: 0,
        };
        let mut t = Self {
            net,
            sites,
            cfg,
            objective,
            perms: Vec::new(),
            groups,
            state,
        };
        t.perms = (0..t.groups.len()).map(|g| t.permutation(g, 0)).collect();
        Ok(t)
    }

    /// Continues from a saved state.
    pub fn resume(arch: FusionArch, sites: Vec<TrainingSite<'a>>, cfg: TrainConfig, objective: Objective, state: TrainerState) -> Result<Self> {
        let mut t = Self::new(arch, sites, cfg, objective)?;
        check_dim("resumed parameters", t.net.num_params(), state.params.len())?;
        if state.cursors.len() != t.groups.len() || state.epochs.len() != t.groups.len() {
            return Err(config("resumed state does not match the training sites"));
        }
        t.perms = (0..t.groups.len()).map(|g| t.permutation(g, state.epochs[g])).collect();
        t.net.params.clone_from(&state.params);
        t.state = state;
        Ok(t)
    }

    fn permutation(&self, group: usize, epoch: u64) -> Vec<usize> {
        let mut r = rng::derived_rng(self.cfg.seed, &[tag::BATCH, group as u64, epoch]);
        let mut p: Vec<usize> = (0..self.groups[group].len()).collect();
        p.shuffle(&mut r);
        p
    }

    pub fn state(&self) -> &TrainerState {
        &self.state
    }

    pub fn into_state(self) -> TrainerState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.state.step >= self.cfg.steps
    }

    fn next_batch(&mut self, group: usize) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            if self.state.cursors[group] == self.groups[group].len() {
                self.state.epochs[group] += 1;
                self.state.cursors[group] = 0;
                self.perms[group] = self.permutation(group, self.state.epochs[group]);
            }
            let i = self.perms[group][self.state.cursors[group]];
            self.state.cursors[group] += 1;
            out.push(self.groups[group][i]);
        }
        out
    }

    fn step_once(&mut self) -> Result<()> {
        let group = if self.cfg.site_cycling {
            self.state.step % self.groups.len()
        } else {
            0
        };
        let batch = self.next_batch(group);
        let samples: Vec<&Sample> = batch.iter().map(|&(si, i)| &self.sites[si].samples[i]).collect();
        let prevs: Vec<&[f64]> = match self.objective {
            Objective::Plain => Vec::new(),
            Objective::Adjusted { .. } => batch
                .iter()
                .map(|&(si, i)| self.sites[si].prevalence[i].as_slice())
                .collect(),
        };
        let (loss, grads) = objective_loss_grad(&self.net, &samples, &prevs, self.objective)?;
        self.state.adam.update(&mut self.net.params, &grads)?;
        if !loss.is_finite() || self.net.params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(alloc::format!(
                "training diverged at step {}",
                self.state.step + 1
            )));
        }
        self.state.loss_sum += loss;
        self.state.loss_count += 1;
        self.state.step += 1;
        if self.state.step.is_multiple_of(self.cfg.checkpoint_every) || self.state.step == self.cfg.steps {
            self.state.checkpoints.push(Checkpoint {
                step: self.state.step,
                train_loss: self.state.loss_sum / self.state.loss_count as f64,
                params: self.net.params.clone(),
            });
            self.state.loss_sum = 0.0;
            self.state.loss_count = 0;
        }
        Ok(())
    }

    /// Trains until `step` (capped at the configured number of steps).
    pub fn run_until(&mut self, step: usize) -> Result<()> {
        let target = step.min(self.cfg.steps);
        while self.state.step < target {
            self.step_once()?;
        }
        self.state.params.clone_from(&self.net.params);
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        self.run_until(self.cfg.steps)
    }
}

/// Mean batch loss of `objective` and its gradient with respect to the
/// network parameters. `prevs` holds one prevalence vector per sample for
/// the adjusted objective and is ignored for the plain one.
pub fn objective_loss_grad(
    net: &FusionNet,
    samples: &[&Sample],
    prevs: &[&[f64]],
    objective: Objective,
) -> Result<(f64, Vec<f64>)> {
    let arch = *net.arch();
    let n = samples.len();
    if n == 0 {
        return Err(config("empty batch"));
    }
    if matches!(objective, Objective::Adjusted { .. }) {
        check_dim("batch prevalence", n, prevs.len())?;
    }
    let k = arch.classes;
    let mut xs = Vec::with_capacity(n * arch.x_dim);
    let mut zs = Vec::with_capacity(n * arch.z_dim);
    for s in samples {
        xs.extend_from_slice(&s.x);
        if arch.z_dim > 0 {
            zs.extend_from_slice(&s.z);
        }
    }
    let cache = net.forward(&xs, &zs, n)?;
    let f = cache.probs();
    let scale = 1.0 / n as f64;
    let mut g = vec![0.0; n * k];
    let mut loss = 0.0;
    let mut q = vec![0.0; k];
    for (b, s) in samples.iter().enumerate() {
        let y = s.y;
        let fb = &f[b * k..(b + 1) * k];
        let gb = &mut g[b * k..(b + 1) * k];
        match objective {
            Objective::Plain => {
                loss += cross_entropy_grad(fb, &Target::Class(y), scale, gb);
            }
            Objective::Adjusted { normalize: true } => {
                check_dim("prevalence", k, prevs[b].len())?;
                adjust(prevs[b], fb, &mut q)?;
                loss += cross_entropy_grad(&q, &Target::Class(y), scale, gb);
            }
            Objective::Adjusted { normalize: false } => {
                check_dim("prevalence", k, prevs[b].len())?;
                let u = prevs[b][y] * fb[y];
                if u > PROB_FLOOR {
                    loss -= ln(u);
                    for (kk, gv) in gb.iter_mut().enumerate() {
                        let delta = if kk == y { 1.0 } else { 0.0 };
                        *gv += scale * (fb[kk] - delta);
                    }
                } else {
                    loss -= ln(PROB_FLOOR);
                }
            }
        }
    }
    let mut grads = vec![0.0; net.num_params()];
    net.backward(&cache, &g, &mut grads)?;
    Ok((loss * scale, grads))
}

/// `q = prev ⊙ f / sum(prev ⊙ f)`.
pub(crate) fn adjust(prev: &[f64], f: &[f64], q: &mut [f64]) -> Result<()> {
    let mut s = 0.0;
    for ((qk, p), fk) in q.iter_mut().zip(prev).zip(f) {
        *qk = p * fk;
        s += *qk;
    }
    if !(s > 0.0) || !s.is_finite() {
        return Err(Error::Numerical("prevalence-adjusted output has no mass".into()));
    }
    q.iter_mut().for_each(|v| *v /= s);
    Ok(())
}
