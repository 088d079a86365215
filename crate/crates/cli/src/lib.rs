//! Command-line entry point: argument parsing and stage dispatch.

pub mod config;
pub mod e2e;
pub mod human;
pub mod meta;
pub mod runtime;
pub mod stages;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use contrastaug_core::human_eval::Recorded;

use crate::config::RunConfig;
use crate::runtime::{ManifestArgs, Runtime};

#[derive(Debug, Parser)]
#[command(name = "contrastaug", version, about = "Contrastive feature extraction and synthetic augmentation pipeline")]
pub struct Cli {
    /// Run configuration (TOML, `${VAR}` expanded from the environment).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for all sampling; defaults to the manifest seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Persistent response cache directory.
    #[arg(long, global = true)]
    pub cache_dir: Option<PathBuf>,
    /// Use the deterministic mock backend for every model role.
    #[arg(long, global = true)]
    pub mock: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Registers a directory of concept subdirectories as a manifest.
    Ingest(stages::IngestArgs),
    /// Assigns train/val/test splits.
    Split(stages::SplitArgs),
    /// Checks files and hashes against the manifest.
    Verify(ManifestArgs),
    /// Probes the vision model and flags confusable concept pairs.
    DiscoverPairs(stages::DiscoverArgs),
    /// Extracts candidate features for each pair target.
    ExtractFeatures(stages::ExtractArgs),
    /// Scores features and selects the best per pair.
    FilterFeatures(stages::FilterArgs),
    /// Generates, verifies and ranks synthetic images per pair.
    Augment(stages::AugmentArgs),
    /// Multiple-choice evaluation on the test split.
    Evaluate(stages::EvaluateArgs),
    /// Writes a fine-tuning record stream for one real:synthetic ratio.
    ExportFinetune(stages::ExportArgs),
    /// Human verification sessions.
    #[command(subcommand)]
    HumanEval(human::HumanEvalCmd),
    /// Serves the annotation endpoints (and UI files, if given).
    ServeAnnotation(human::ServeArgs),
    /// Runs the whole pipeline on a generated corpus with the mock backend.
    E2e(e2e::E2eArgs),
}

fn print_json<T: serde::Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

pub fn run(cli: Cli) -> Result<ExitCode> {
    let config = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    let rt = Runtime::new(config, cli.seed, cli.mock, cli.cache_dir.clone());
    match &cli.command {
        Command::Ingest(a) => {
            stages::ingest(&rt, a)?;
        }
        Command::Split(a) => {
            stages::split(&rt, a)?;
        }
        Command::Verify(a) => {
            let violations = stages::verify(&rt, a)?;
            for v in &violations {
                println!("{v}");
            }
            if !violations.is_empty() {
                eprintln!("{} integrity violations", violations.len());
                return Ok(ExitCode::FAILURE);
            }
            println!("ok");
        }
        Command::DiscoverPairs(a) => {
            stages::discover_pairs(&rt, a)?;
        }
        Command::ExtractFeatures(a) => {
            stages::extract_features(&rt, a)?;
        }
        Command::FilterFeatures(a) => {
            stages::filter_features(&rt, a)?;
        }
        Command::Augment(a) => {
            stages::augment(&rt, a)?;
        }
        Command::Evaluate(a) => {
            let report = stages::evaluate(&rt, a)?;
            println!("{}", report.result);
        }
        Command::ExportFinetune(a) => {
            stages::export_finetune(&rt, a)?;
        }
        Command::HumanEval(cmd) => match cmd {
            human::HumanEvalCmd::Create(a) => {
                let s = human::create(&rt, a)?;
                println!("session {} created with {} items", s.id, s.items.len());
            }
            human::HumanEvalCmd::Record(a) => match human::record(a)? {
                Recorded::Stored(r) => print_json(&r)?,
                Recorded::Replayed(r) => {
                    eprintln!("identical judgment already stored");
                    print_json(&r)?
                }
            },
            human::HumanEvalCmd::Stats(a) => print_json(&human::stats(a)?)?,
        },
        Command::ServeAnnotation(a) => human::serve(a)?,
        Command::E2e(a) => {
            let s = e2e::run(&rt, a)?;
            println!(
                "pairs {}, selected features {}, baseline {}/{} (chance {:.4}), in-context {}/{}",
                s.pairs,
                s.selected_features,
                s.baseline.correct,
                s.baseline.total,
                s.baseline.chance,
                s.in_context.correct,
                s.in_context.total
            );
        }
    }
    Ok(ExitCode::SUCCESS)
}
