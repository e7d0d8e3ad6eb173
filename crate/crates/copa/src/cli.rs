use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use copa_core::config::{ExperimentConfig, PrevalenceChoice};
use copa_core::eval::ValidationMode;
use copa_core::scm::CausalRelation;

use crate::commands::{self, RunOptions};
use crate::dataset::write_json;
use crate::error::{CliError, Result};

#[derive(Debug, Parser)]
#[command(name = "copa", version, about = "Train and evaluate prevalence-adjusted classifiers across sites")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Validation {
    Internal,
    External,
}

impl From<Validation> for ValidationMode {
    fn from(v: Validation) -> Self {
        match v {
            Validation::Internal => ValidationMode::Internal,
            Validation::External => ValidationMode::External,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    MultiSite,
    SingleSite,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Root directory for run outputs; overrides the config's output_dir.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to one of the configured seeds.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub validation: Option<Validation>,
}

impl From<&Common> for RunOptions {
    fn from(c: &Common) -> Self {
        RunOptions {
            config: c.config.clone(),
            out: c.out.clone(),
            seed: c.seed,
            validation: c.validation.map(Into::into),
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a preset config.
    Init {
        #[arg(long, value_enum, default_value = "multi-site")]
        preset: Preset,
        #[arg(long, default_value = "common_cause")]
        relation: CausalRelation,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the config's sites as CSV files plus a manifest.
    Generate {
        #[arg(long)]
        config: PathBuf,
        /// Dataset directory; defaults to `<run dir>/data`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every method and seed, keeping checkpoints and the selected model.
    Train {
        #[command(flatten)]
        common: Common,
        /// Validate the config and stop.
        #[arg(long)]
        dry_run: bool,
        /// Pause each job after this many steps; rerun to resume.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score selected models on the test sites.
    Eval {
        #[command(flatten)]
        common: Common,
        /// conditional, marginal, uniform, subsample:L or marginalized.
        #[arg(long, default_value = "conditional")]
        prevalence: PrevalenceChoice,
        /// Score only this model directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Re-score adjusted models under every ablated prevalence.
    Ablate {
        #[command(flatten)]
        common: Common,
    },
    /// Summarize the reports of a run.
    Report {
        #[command(flatten)]
        common: Common,
    },
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Init { preset, relation, out } => {
            let cfg = match preset {
                Preset::MultiSite => ExperimentConfig::multi_site(relation),
                Preset::SingleSite => ExperimentConfig::single_site(relation),
            };
            write_json(&out, &cfg)
        }
        Command::Generate { config, out } => {
            let opts = RunOptions {
                config,
                ..RunOptions::default()
            };
            let dir = commands::generate(&opts, out.as_deref())?;
            println!("{}", dir.display());
            Ok(())
        }
        Command::Train {
            common,
            dry_run,
            stop_after,
        } => {
            if stop_after == Some(0) {
                return Err(CliError::Config("--stop-after must be positive".into()));
            }
            commands::train(&(&common).into(), dry_run, stop_after).map(|_| ())
        }
        Command::Eval {
            common,
            prevalence,
            checkpoint,
        } => {
            let rep = commands::eval(&(&common).into(), prevalence, checkpoint.as_deref())?;
            for s in &rep.summary {
                println!("{} {} {:.4} ± {:.4}", s.method, s.site_id, s.mean, s.std_err);
            }
            Ok(())
        }
        Command::Ablate { common } => {
            let rep = commands::ablate(&(&common).into())?;
            for s in &rep.summary {
                println!("{} {} {:.4} ± {:.4}", s.method, s.site_id, s.mean, s.std_err);
            }
            Ok(())
        }
        Command::Report { common } => {
            print!("{}", commands::report(&(&common).into())?);
            Ok(())
        }
    }
}
