//! Command-line front end for the sleep staging pipeline.

pub mod config;
pub mod error;
pub mod pipeline;

use std::path::PathBuf;

use clap::{Parser, Subcommand};
use somnus_core::model::ContextConfig;

use config::{RunConfig, OUTPUT_ROOT_ENV};
use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "somnus", version, about = "Two-stage sleep staging from polysomnography")]
pub struct Cli {
    /// JSON run configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides `output_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for `ablate`.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic cohort to the raw data directory.
    Synth,
    /// Parse recordings and annotations; write `ingest.json`.
    Ingest,
    /// Build the epoch store and subject split.
    Preprocess,
    /// Stage 1: train the epoch encoder.
    TrainEncoder,
    /// Stage 2: train the sequence aggregator on the frozen encoder.
    TrainAggregator {
        #[arg(long, value_parser = parse_context)]
        context: Option<ContextConfig>,
    },
    /// Score a trained model on the test split.
    Evaluate {
        #[arg(long, value_parser = parse_context)]
        context: Option<ContextConfig>,
    },
    /// Train and score every context configuration.
    Ablate,
    /// Finite-difference gradient check of every op.
    Gradcheck,
}

pub fn parse_context(s: &str) -> Result<ContextConfig, String> {
    ContextConfig::ALL
        .into_iter()
        .find(|c| c.tag().eq_ignore_ascii_case(s))
        .ok_or_else(|| format!("unknown context {s:?}; expected one of None, Clinical, Event, Both, MTL"))
}

/// Loads the configuration and applies command-line and environment overrides.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this subcommand".into()))?;
    let mut cfg = RunConfig::load(path)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let env_root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from);
    cfg.resolve_output(cli.out.clone(), env_root);
    Ok(cfg)
}

/// Runs one subcommand and returns the text for stdout.
pub fn run(cli: &Cli) -> Result<String, CliError> {
    if cli.jobs == 0 {
        return Err(CliError::Config("--jobs must be at least 1".into()));
    }
    if let Command::Gradcheck = cli.command {
        return gradcheck(cli);
    }
    let cfg = resolve_config(cli)?;
    Ok(match &cli.command {
        Command::Synth => serde_json::to_string(&pipeline::synth(&cfg)?)?,
        Command::Ingest => {
            let s = pipeline::ingest(&cfg)?;
            format!(
                "{{\"included\":{},\"excluded\":{}}}",
                s.included.len(),
                s.excluded.len()
            )
        }
        Command::Preprocess => {
            let s = pipeline::preprocess(&cfg)?;
            format!(
                "{{\"subjects\":{},\"epochs\":{},\"scored_epochs\":{}}}",
                s.subjects, s.epochs, s.scored_epochs
            )
        }
        Command::TrainEncoder => {
            let o = pipeline::train_encoder(&cfg)?;
            format!("{{\"selected_epoch\":{},\"epochs_run\":{}}}", o.selected_epoch, o.history.len())
        }
        Command::TrainAggregator { context } => {
            let ctx = context.unwrap_or(cfg.model.context);
            let o = pipeline::train_aggregator(&cfg, ctx)?;
            format!(
                "{{\"context\":\"{}\",\"selected_epoch\":{},\"epochs_run\":{}}}",
                ctx.tag(),
                o.selected_epoch,
                o.history.len()
            )
        }
        Command::Evaluate { context } => {
            let ctx = context.unwrap_or(cfg.model.context);
            serde_json::to_string(&pipeline::evaluate(&cfg, ctx)?)?
        }
        Command::Ablate => {
            let reports = pipeline::ablate(&cfg, cli.jobs)?;
            somnus_core::train::render_ablation(&reports)
        }
        Command::Gradcheck => unreachable!("handled above"),
    })
}

fn gradcheck(cli: &Cli) -> Result<String, CliError> {
    let (entries, ok) = pipeline::gradcheck()?;
    let mut out = String::new();
    for e in &entries {
        let verdict = if e.passed { "ok" } else { "FAIL" };
        out.push_str(&format!("{:<22} {:>10.3e} {:>6} {verdict}\n", e.op, e.max_rel_err, e.entries));
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from));
    if let Some(dir) = dir {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join("gradcheck.json"), serde_json::to_string_pretty(&entries)? + "\n")?;
    }
    if !ok {
        let worst = entries
            .iter()
            .filter(|e| !e.passed)
            .map(|e| format!("{} ({:.3e})", e.op, e.max_rel_err))
            .collect::<Vec<_>>()
            .join(", ");
        print!("{out}");
        return Err(CliError::Numeric(format!(
            "relative error above {:e}: {worst}",
            pipeline::GRADCHECK_TOLERANCE
        )));
    }
    Ok(out)
}
