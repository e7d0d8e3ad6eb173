//! Implementations of the CLI subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use copa_core::baselines::{erm_arch, select_erm, ErmVariant};
use copa_core::config::{DataSource, ExperimentConfig, Method, PrevalenceChoice, SiteRole};
use copa_core::copa::{select_copa, RatioModel};
use copa_core::eval::{
    evaluate_model, prepare_experiment, prepare_synthetic, run_ablation, run_method_seed, ExperimentData, ResultRow,
    RunReport, ValidationMode,
};
use copa_core::hash::params_hash;
use copa_core::nn::FusionNet;
use copa_core::scm::{MixingMatrix, SiteDataset};
use copa_core::tabular::ColumnManifest;
use copa_core::train::{Objective, Trainer};
use rayon::prelude::*;

use crate::dataset::{export_dataset, load_tabular, read_json, relative_to, write_json};
use crate::error::{CliError, Result};
use crate::store::{load_model_dir, ModelManifest, RunDir, SELECTION_CRITERION};

/// Options shared by the commands that operate on a run.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    pub config: PathBuf,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub validation: Option<ValidationMode>,
}

impl RunOptions {
    pub fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg: ExperimentConfig = read_json(&self.config)?;
        if let Some(v) = self.validation {
            cfg.validation = v;
        }
        cfg.validate()?;
        if let Some(s) = self.seed {
            if !cfg.seeds.contains(&s) {
                return Err(CliError::Config(format!("seed {s} is not among the configured seeds {:?}", cfg.seeds)));
            }
        }
        Ok(cfg)
    }

    fn seeds(&self, cfg: &ExperimentConfig) -> Vec<u64> {
        match self.seed {
            Some(s) => vec![s],
            None => cfg.seeds.clone(),
        }
    }
}

type Sites = (Vec<(SiteRole, SiteDataset)>, Option<MixingMatrix>, ColumnManifest);

pub fn load_sites(cfg: &ExperimentConfig, config_path: &Path) -> Result<Sites> {
    match &cfg.data {
        DataSource::Synthetic => {
            let (sites, w) = prepare_synthetic(cfg)?;
            Ok((sites, Some(w), ColumnManifest::categorical(1)))
        }
        DataSource::Tabular { csv, manifest } => {
            let (sites, columns) = load_tabular(cfg, &relative_to(config_path, csv), &relative_to(config_path, manifest))?;
            Ok((sites, None, columns))
        }
    }
}

pub fn prepare(cfg: &ExperimentConfig, config_path: &Path) -> Result<ExperimentData> {
    let (sites, mixing, columns) = load_sites(cfg, config_path)?;
    Ok(prepare_experiment(cfg, sites, mixing, columns.all_categorical())?)
}

/// Writes the dataset of a config to `out` (default `<run dir>/data`).
pub fn generate(opts: &RunOptions, out: Option<&Path>) -> Result<PathBuf> {
    let cfg = opts.load()?;
    let (sites, mixing, columns) = load_sites(&cfg, &opts.config)?;
    let dir = match out {
        Some(d) => d.to_path_buf(),
        None => RunDir::path_for(&cfg, None).join("data"),
    };
    let manifest = export_dataset(&dir, &cfg.hash(), &sites, &columns, mixing.as_ref())?;
    for s in &manifest.sites {
        eprintln!("{}: {} rows -> {}", s.site_id, s.rows, dir.join(&s.samples_file).display());
    }
    Ok(dir)
}

#[derive(Debug, Clone, PartialEq)]
pub enum JobOutcome {
    Trained { selected_step: usize, val_f1: f64 },
    AlreadyTrained,
    Paused { step: usize },
}

fn erm_variant(method: Method) -> Option<ErmVariant> {
    match method {
        Method::ErmA => Some(ErmVariant::ErmA),
        Method::ErmB => Some(ErmVariant::ErmB),
        _ => None,
    }
}

fn train_job(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    run: &RunDir,
    method: Method,
    seed: u64,
    stop_after: Option<usize>,
) -> Result<JobOutcome> {
    if run.is_trained(method, seed) {
        return Ok(JobOutcome::AlreadyTrained);
    }
    let mut tcfg = cfg.train.clone();
    tcfg.seed = seed;
    let (arch, objective) = match erm_variant(method) {
        Some(v) => (erm_arch(v, &tcfg, data.x_dim, data.z_dim, cfg.classes), Objective::Plain),
        None => (
            tcfg.arch(data.x_dim, data.z_dim, cfg.classes),
            Objective::Adjusted {
                normalize: tcfg.normalize_product,
            },
        ),
    };
    let sites = data.training_sites();
    let mut trainer = match run.read_state(method, seed)? {
        Some(state) => Trainer::resume(arch, sites, tcfg.clone(), objective, state)?,
        None => Trainer::new(arch, sites, tcfg.clone(), objective)?,
    };
    trainer.run_until(stop_after.unwrap_or(tcfg.steps))?;
    if !trainer.is_done() {
        run.write_state(method, seed, trainer.state())?;
        return Ok(JobOutcome::Paused {
            step: trainer.state().step,
        });
    }
    let state = trainer.into_state();
    for c in &state.checkpoints {
        run.write_checkpoint(method, seed, c.step, &FusionNet::with_params(arch, c.params.clone())?)?;
    }
    let hook = data.validation_hook(cfg.validation)?;
    let (net, selected_step, val_f1, history) = match erm_variant(method) {
        Some(v) => {
            let t = select_erm(v, arch, &state.checkpoints, &hook)?;
            (t.model.net, t.selected_step, t.val_f1, t.history)
        }
        None => {
            let t = select_copa(arch, &state.checkpoints, &hook)?;
            (t.model.net, t.selected_step, t.val_f1, t.history)
        }
    };
    let manifest = ModelManifest {
        config_hash: run.config_hash.clone(),
        method,
        seed,
        arch,
        train: tcfg,
        objective,
        validation: cfg.validation,
        selection: SELECTION_CRITERION.into(),
        selected_step,
        val_f1,
        params_hash: params_hash(&net.params),
        history,
    };
    run.write_selected(&manifest, &net)?;
    Ok(JobOutcome::Trained { selected_step, val_f1 })
}

/// Trains every trained method for every selected seed, in parallel.
pub fn train(opts: &RunOptions, dry_run: bool, stop_after: Option<usize>) -> Result<Vec<(Method, u64, JobOutcome)>> {
    let cfg = opts.load()?;
    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .filter(|m| m.is_trained())
        .flat_map(|&m| opts.seeds(&cfg).into_iter().map(move |s| (m, s)))
        .collect();
    if dry_run {
        eprintln!(
            "config {} is valid: {} training jobs, {} steps each",
            cfg.hash(),
            jobs.len(),
            cfg.train.steps
        );
        return Ok(Vec::new());
    }
    let data = prepare(&cfg, &opts.config)?;
    let run = RunDir::create(&cfg, opts.out.as_deref())?;
    let _lock = run.lock()?;
    let results: Vec<Result<(Method, u64, JobOutcome)>> = jobs
        .par_iter()
        .map(|&(m, s)| {
            let outcome = train_job(&cfg, &data, &run, m, s, stop_after)?;
            eprintln!("{m} seed {s}: {outcome:?}");
            Ok((m, s, outcome))
        })
        .collect();
    results.into_iter().collect()
}

fn report_name(stem: &str, choice: PrevalenceChoice) -> String {
    match choice {
        PrevalenceChoice::Conditional => stem.to_string(),
        other => format!("{stem}-{}", other.to_string().replace(':', "-")),
    }
}

pub fn write_report(dir: &Path, stem: &str, report: &RunReport) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    write_json(&dir.join(format!("{stem}.json")), report)?;
    let path = dir.join(format!("{stem}.csv"));
    let io = |e: csv::Error| CliError::io(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["method", "seed", "site", "metric", "value", "config_hash"]).map_err(io)?;
    for r in &report.rows {
        let seed = r.seed.to_string();
        let mut metric = |name: &str, value: String| {
            w.write_record([r.method.as_str(), &seed, &r.site_id, name, &value, &report.config_hash])
        };
        metric("test_f1", format!("{:?}", r.test_f1)).map_err(io)?;
        metric("selected_step", r.selected_step.to_string()).map_err(io)?;
        if !r.model_hash.is_empty() {
            metric("model_hash", r.model_hash.clone()).map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))
}

fn model_rows(
    cfg: &ExperimentConfig,
    data: &ExperimentData,
    manifest: &ModelManifest,
    net: &FusionNet,
    choice: PrevalenceChoice,
) -> Result<Vec<ResultRow>> {
    Ok(evaluate_model(cfg, data, manifest.method, net, choice, manifest.seed)?
        .into_iter()
        .map(|(site_id, test_f1)| ResultRow {
            method: manifest.method.as_str().into(),
            seed: manifest.seed,
            site_id,
            test_f1,
            selected_step: manifest.selected_step,
            model_hash: manifest.params_hash.clone(),
        })
        .collect())
}

/// Scores selected models on the test sites and writes JSON and CSV
/// reports. With `checkpoint`, only that model directory is scored.
pub fn eval(opts: &RunOptions, choice: PrevalenceChoice, checkpoint: Option<&Path>) -> Result<RunReport> {
    let cfg = opts.load()?;
    let run = RunDir::open(&cfg, opts.out.as_deref())?;
    let data = prepare(&cfg, &opts.config)?;
    let stem = report_name("report", choice);
    if let Some(dir) = checkpoint {
        let (manifest, net) = load_model_dir(dir, Some(&run.config_hash))?;
        let rows = model_rows(&cfg, &data, &manifest, &net, choice)?;
        let report = RunReport::from_rows(run.config_hash.clone(), cfg.validation, rows);
        write_report(dir, &stem, &report)?;
        return Ok(report);
    }
    let jobs: Vec<(Method, u64)> = cfg
        .methods
        .iter()
        .flat_map(|&m| opts.seeds(&cfg).into_iter().map(move |s| (m, s)))
        .collect();
    let rows: Vec<Result<Vec<ResultRow>>> = jobs
        .par_iter()
        .map(|&(m, s)| {
            if m.is_trained() {
                let (manifest, net) = run.load_selected(m, s)?;
                model_rows(&cfg, &data, &manifest, &net, choice)
            } else {
                Ok(run_method_seed(&cfg, &data, m, s)?.rows().collect())
            }
        })
        .collect();
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?.into_iter().flatten().collect();
    let report = RunReport::from_rows(run.config_hash.clone(), cfg.validation, rows);
    write_report(&run.root, &stem, &report)?;
    Ok(report)
}

/// Re-scores the selected adjusted models under every configured ablation
/// variant without retraining.
pub fn ablate(opts: &RunOptions) -> Result<RunReport> {
    let cfg = opts.load()?;
    let run = RunDir::open(&cfg, opts.out.as_deref())?;
    let data = prepare(&cfg, &opts.config)?;
    let models = opts
        .seeds(&cfg)
        .into_iter()
        .map(|s| {
            let (_, net) = run.load_selected(Method::Copa, s)?;
            Ok((s, RatioModel { net }))
        })
        .collect::<Result<Vec<_>>>()?;
    let per_seed: Vec<Result<RunReport>> = models
        .par_iter()
        .map(|m| Ok(run_ablation(&cfg, &data, std::slice::from_ref(m))?))
        .collect();
    let mut rows = Vec::new();
    for r in per_seed {
        rows.extend(r?.rows);
    }
    let report = RunReport::from_rows(run.config_hash.clone(), cfg.validation, rows);
    write_report(&run.root, "ablation", &report)?;
    Ok(report)
}

/// Summarizes every report in the run directory as a table and
/// `summary.csv`.
pub fn report(opts: &RunOptions) -> Result<String> {
    let cfg = opts.load()?;
    let run = RunDir::open(&cfg, opts.out.as_deref())?;
    let mut names: Vec<String> = fs::read_dir(&run.root)
        .map_err(|e| CliError::io(&run.root, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|n| n.ends_with(".json") && (n.starts_with("report") || n.starts_with("ablation")))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(CliError::Missing(format!("no reports in {}", run.root.display())));
    }
    let path = run.root.join("summary.csv");
    let io = |e: csv::Error| CliError::io(&path, e);
    let mut w = csv::Writer::from_path(&path).map_err(io)?;
    w.write_record(["report", "method", "site", "seeds", "mean_f1", "std_err", "config_hash"])
        .map_err(io)?;
    let mut table = format!("config {}\n", run.config_hash);
    for name in names {
        let rep: RunReport = read_json(&run.root.join(&name))?;
        if rep.config_hash != run.config_hash {
            return Err(CliError::Config(format!("{name} belongs to config {}", rep.config_hash)));
        }
        let stem = name.trim_end_matches(".json");
        table.push_str(&format!("\n{stem}\n"));
        for s in &rep.summary {
            table.push_str(&format!(
                "  {:<28} {:<12} {:.4} ± {:.4}  (n={})\n",
                s.method,
                s.site_id,
                s.mean,
                s.std_err,
                s.seeds.len()
            ));
            w.write_record([
                stem,
                &s.method,
                &s.site_id,
                &s.seeds.len().to_string(),
                &format!("{:?}", s.mean),
                &format!("{:?}", s.std_err),
                &rep.config_hash,
            ])
            .map_err(io)?;
        }
    }
    w.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(table)
}
