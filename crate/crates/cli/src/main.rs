//! Command line front end: one subcommand per pipeline stage, all driven
//! by a single TOML configuration file. Flags override config values.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Parser, Subcommand};

use aspectmine_core::pipeline::{
    run_cer, run_extract, run_ingest, run_metrics, run_rec_eval, run_rec_stratified,
    run_rec_train, run_synth, run_vocab, ArtifactOutcome, BackendKind, PipelineError, RunConfig,
    RunContext,
};

/// Loaded automatically from the working directory when --config is absent.
const DEFAULT_CONFIG: &str = "aspectmine.toml";

#[derive(Parser)]
#[command(
    name = "aspectmine",
    version,
    about = "Two-stage review mining: induce an aspect vocabulary, extract \
             aspect-opinion-sentiment triples under it, score grounding, and \
             evaluate an aspect-aware rating predictor."
)]
struct Cli {
    /// Configuration file (defaults to ./aspectmine.toml when present).
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,

    /// Override every stage seed (vocabulary, predictor, synthesis).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for parallel scoring (defaults to all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Override the completion backend: scripted or http.
    #[arg(long, global = true)]
    backend: Option<BackendKind>,

    /// Verify existing artifacts byte for byte instead of writing.
    #[arg(long, global = true)]
    check: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic corpus, its ground truth, and a backend script
    /// covering the full configured pipeline.
    Synth,
    /// Load raw reviews, drop invalid and sparse records, and write the
    /// cleaned chronological corpus.
    Ingest {
        /// Drop users with this many records or fewer.
        #[arg(long)]
        min_user_records: Option<usize>,
        /// Drop items with this many records or fewer.
        #[arg(long)]
        min_item_records: Option<usize>,
        /// Drop interactions before this timestamp.
        #[arg(long)]
        since: Option<i64>,
    },
    /// Induce the aspect vocabulary and write its pairwise-similarity
    /// matrix.
    Vocab,
    /// Extract aspect-opinion-sentiment triples for every interaction,
    /// checkpointing as it goes.
    Extract,
    /// Score annotations for aspect drift and opinion grounding.
    Metrics,
    /// Train and evaluate the aspect-aware rating predictor.
    #[command(subcommand)]
    Rec(RecCommand),
    /// Sweep the stage-one sampling ratio and report the cost-benefit
    /// curve.
    Cer {
        /// Ratios to sweep, comma separated; must include 0 and 1.
        #[arg(long, value_delimiter = ',')]
        ratios: Option<Vec<f64>>,
    },
}

#[derive(Subcommand)]
enum RecCommand {
    /// Fit the predictor on the chronological training split.
    Train,
    /// Score the trained predictor on the train and test splits.
    Eval,
    /// Score the test split stratified by review length.
    Stratified,
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, PipelineError> {
    match path {
        Some(p) => RunConfig::load(p),
        None => {
            let default = Path::new(DEFAULT_CONFIG);
            if default.exists() {
                RunConfig::load(default)
            } else {
                Ok(RunConfig::default())
            }
        }
    }
}

fn report(summary: impl Display, outcomes: Vec<ArtifactOutcome>) {
    for outcome in &outcomes {
        println!("{outcome}");
    }
    println!("{summary}");
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(workers) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("initializing the worker pool")?;
    }

    let mut config = load_config(cli.config.as_deref())?;
    config.apply_overrides(cli.seed, cli.backend);
    match &cli.command {
        Command::Ingest {
            min_user_records,
            min_item_records,
            since,
        } => {
            if let Some(v) = min_user_records {
                config.ingest.min_user_records = *v;
            }
            if let Some(v) = min_item_records {
                config.ingest.min_item_records = *v;
            }
            if let Some(v) = since {
                config.ingest.since = Some(*v);
            }
        }
        Command::Cer { ratios: Some(r) } => {
            config.cer.ratios = r.clone();
        }
        _ => {}
    }

    let ctx = RunContext::new(config, cli.check)?;
    match cli.command {
        Command::Synth => {
            let (summary, outcomes) = run_synth(&ctx)?;
            report(summary, outcomes);
        }
        Command::Ingest { .. } => {
            let (summary, outcomes) = run_ingest(&ctx)?;
            report(summary, outcomes);
        }
        Command::Vocab => {
            let (summary, outcomes) = run_vocab(&ctx)?;
            report(summary, outcomes);
        }
        Command::Extract => {
            let (summary, outcomes) = run_extract(&ctx)?;
            report(summary, outcomes);
        }
        Command::Metrics => {
            let (summary, outcomes) = run_metrics(&ctx)?;
            report(summary, outcomes);
        }
        Command::Rec(RecCommand::Train) => {
            let (summary, outcomes) = run_rec_train(&ctx)?;
            report(summary, outcomes);
        }
        Command::Rec(RecCommand::Eval) => {
            let (summary, outcomes) = run_rec_eval(&ctx)?;
            report(summary, outcomes);
        }
        Command::Rec(RecCommand::Stratified) => {
            let (summary, outcomes) = run_rec_stratified(&ctx)?;
            report(summary, outcomes);
        }
        Command::Cer { .. } => {
            let (summary, outcomes) = run_cer(&ctx)?;
            report(summary, outcomes);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let config_error = err
                .downcast_ref::<PipelineError>()
                .is_some_and(PipelineError::is_config);
            if config_error {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
