//! Run directories: one per config hash, holding the config, per-model
//! checkpoints and manifests, trainer states and reports.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use copa_core::config::{ExperimentConfig, Method};
use copa_core::copa::TrainConfig;
use copa_core::eval::{CheckpointRecord, ValidationMode};
use copa_core::nn::{FusionArch, FusionNet, ParamSet};
use copa_core::train::{Objective, TrainerState};
use serde::{Deserialize, Serialize};

use crate::dataset::{read_json, write_json};
use crate::error::{CliError, Result};

pub const SELECTION_CRITERION: &str = "max validation F1, ties to the earliest step";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub config_hash: String,
    pub method: Method,
    pub seed: u64,
    pub arch: FusionArch,
    pub train: TrainConfig,
    pub objective: Objective,
    pub validation: ValidationMode,
    pub selection: String,
    pub selected_step: usize,
    pub val_f1: f64,
    pub params_hash: String,
    pub history: Vec<CheckpointRecord>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StoredConfig {
    config_hash: String,
    config: ExperimentConfig,
}

pub struct RunDir {
    pub root: PathBuf,
    pub config_hash: String,
}

/// Removes the lockfile when dropped.
pub struct RunLock {
    path: PathBuf,
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

impl RunDir {
    pub fn path_for(cfg: &ExperimentConfig, out: Option<&Path>) -> PathBuf {
        let base = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from(&cfg.output_dir));
        base.join(cfg.hash())
    }

    /// Creates the run directory or checks that an existing one belongs to
    /// the same config.
    pub fn create(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Self> {
        let root = Self::path_for(cfg, out);
        fs::create_dir_all(&root).map_err(|e| CliError::io(&root, e))?;
        let hash = cfg.hash();
        let cfg_path = root.join("config.json");
        if cfg_path.exists() {
            let stored: StoredConfig = read_json(&cfg_path)?;
            if stored.config_hash != hash {
                return Err(CliError::Config(format!(
                    "{} belongs to config {}, not {hash}",
                    root.display(),
                    stored.config_hash
                )));
            }
        } else {
            write_json(
                &cfg_path,
                &StoredConfig {
                    config_hash: hash.clone(),
                    config: cfg.clone(),
                },
            )?;
        }
        Ok(Self { root, config_hash: hash })
    }

    /// Opens an existing run directory.
    pub fn open(cfg: &ExperimentConfig, out: Option<&Path>) -> Result<Self> {
        let root = Self::path_for(cfg, out);
        if !root.join("config.json").exists() {
            return Err(CliError::missing(&root));
        }
        Self::create(cfg, out)
    }

    pub fn lock(&self) -> Result<RunLock> {
        let path = self.root.join(".lock");
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| {
                if e.kind() == std::io::ErrorKind::AlreadyExists {
                    CliError::Io(format!("{} is locked by another run", self.root.display()))
                } else {
                    CliError::io(&path, e)
                }
            })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(RunLock { path })
    }

    pub fn model_dir(&self, method: Method, seed: u64) -> PathBuf {
        self.root.join("models").join(format!("{}-seed{seed}", method.as_str()))
    }

    pub fn write_checkpoint(&self, method: Method, seed: u64, step: usize, net: &FusionNet) -> Result<()> {
        let dir = self.model_dir(method, seed).join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_json(&dir.join(format!("step_{step:06}.json")), &ParamSet::from_fusion(net))
    }

    pub fn write_selected(&self, manifest: &ModelManifest, net: &FusionNet) -> Result<()> {
        let dir = self.model_dir(manifest.method, manifest.seed);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_json(&dir.join("selected.json"), &ParamSet::from_fusion(net))?;
        let mut log = csv::Writer::from_path(dir.join("log.csv")).map_err(|e| CliError::io(&dir, e))?;
        log.write_record(["step", "train_loss", "val_f1"]).map_err(|e| CliError::io(&dir, e))?;
        for h in &manifest.history {
            log.write_record([h.step.to_string(), format!("{:?}", h.train_loss), format!("{:?}", h.val_f1)])
                .map_err(|e| CliError::io(&dir, e))?;
        }
        log.flush().map_err(|e| CliError::io(&dir, e))?;
        write_json(&dir.join("manifest.json"), manifest)?;
        let state = dir.join("state.json");
        if state.exists() {
            fs::remove_file(&state).map_err(|e| CliError::io(&state, e))?;
        }
        Ok(())
    }

    pub fn is_trained(&self, method: Method, seed: u64) -> bool {
        self.model_dir(method, seed).join("manifest.json").exists()
    }

    pub fn write_state(&self, method: Method, seed: u64, state: &TrainerState) -> Result<()> {
        let dir = self.model_dir(method, seed);
        fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        write_json(&dir.join("state.json"), state)
    }

    pub fn read_state(&self, method: Method, seed: u64) -> Result<Option<TrainerState>> {
        let p = self.model_dir(method, seed).join("state.json");
        if p.exists() {
            read_json(&p).map(Some)
        } else {
            Ok(None)
        }
    }

    pub fn load_selected(&self, method: Method, seed: u64) -> Result<(ModelManifest, FusionNet)> {
        load_model_dir(&self.model_dir(method, seed), Some(&self.config_hash))
    }
}

/// Loads `selected.json` and `manifest.json` from a model directory,
/// rejecting artifacts of a different config.
pub fn load_model_dir(dir: &Path, expect_hash: Option<&str>) -> Result<(ModelManifest, FusionNet)> {
    let manifest: ModelManifest = read_json(&dir.join("manifest.json"))?;
    if let Some(h) = expect_hash {
        if manifest.config_hash != h {
            return Err(CliError::Config(format!(
                "{} was trained under config {}, not {h}",
                dir.display(),
                manifest.config_hash
            )));
        }
    }
    let params: ParamSet = read_json(&dir.join("selected.json"))?;
    let net = params.to_fusion(manifest.arch)?;
    Ok((manifest, net))
}
