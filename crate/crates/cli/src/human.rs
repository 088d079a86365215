//! `human-eval` subcommands and the annotation server launcher.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};
use contrastaug_core::augment::AugmentationBatch;
use contrastaug_core::features::Feature;
use contrastaug_core::human_eval::{
    self, agreement_stats, AgreementStats, AnnotationSession, Condition, Judgment, Recorded, SessionStore,
};
use contrastaug_core::records::{read_lines, write_json};
use contrastaug_server::AppState;

use crate::meta::require;
use crate::runtime::{ManifestArgs, Runtime};

fn parse_snake<T: serde::de::DeserializeOwned>(s: &str) -> Result<T, String> {
    serde_json::from_value(serde_json::Value::String(s.replace('-', "_"))).map_err(|e| e.to_string())
}

fn parse_condition(s: &str) -> Result<Condition, String> {
    parse_snake(s)
}

fn parse_judgment(s: &str) -> Result<Judgment, String> {
    parse_snake(s)
}

#[derive(Debug, Clone, Subcommand)]
pub enum HumanEvalCmd {
    /// Samples a new annotation session from the pipeline outputs.
    Create(CreateArgs),
    /// Stores one judgment.
    Record(RecordArgs),
    /// Positive rate and Fleiss' kappa of a complete session.
    Stats(StatsArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CreateArgs {
    /// Directory holding session files.
    #[arg(long)]
    pub sessions: PathBuf,
    #[arg(long)]
    pub id: String,
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Selected features.
    #[arg(long)]
    pub features: PathBuf,
    /// Augmentation batches; needed for the synthetic condition.
    #[arg(long)]
    pub batches: Option<PathBuf>,
    /// real_target, real_misidentified or synthetic_target.
    #[arg(long, value_parser = parse_condition)]
    pub condition: Condition,
    #[arg(long, default_value_t = 100)]
    pub items: usize,
    /// Annotator ids, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub annotators: Vec<String>,
    /// Let annotation clients display concept names.
    #[arg(long)]
    pub show_concept: bool,
}

#[derive(Debug, Clone, Args)]
pub struct RecordArgs {
    #[arg(long)]
    pub sessions: PathBuf,
    #[arg(long)]
    pub id: String,
    #[arg(long)]
    pub annotator: String,
    #[arg(long)]
    pub item: usize,
    /// yes or no.
    #[arg(long, value_parser = parse_judgment)]
    pub judgment: Judgment,
}

#[derive(Debug, Clone, Args)]
pub struct StatsArgs {
    #[arg(long)]
    pub sessions: PathBuf,
    #[arg(long)]
    pub id: String,
    /// Also write the statistics to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn create(rt: &Runtime, a: &CreateArgs) -> Result<AnnotationSession> {
    let (manifest, _) = rt.load_manifest(&a.manifest)?;
    require(&a.features, "selected feature list")?;
    let features: Vec<Feature> = read_lines(&a.features)?;
    let batches: Vec<AugmentationBatch> = match &a.batches {
        Some(p) => {
            require(p, "augmentation batches")?;
            read_lines(p)?
        }
        None => Vec::new(),
    };
    let seed = rt.seed_or(manifest.seed);
    let mut session = human_eval::create_session(
        &a.id,
        &manifest,
        &features,
        &batches,
        a.condition,
        a.items,
        a.annotators.clone(),
        seed,
    )?;
    session.show_concept = a.show_concept;
    SessionStore::new(&a.sessions).create(&session)?;
    Ok(session)
}

pub fn record(a: &RecordArgs) -> Result<Recorded> {
    Ok(SessionStore::new(&a.sessions).record(&a.id, &a.annotator, a.item, a.judgment)?)
}

pub fn stats(a: &StatsArgs) -> Result<AgreementStats> {
    let (session, records) = SessionStore::new(&a.sessions).load(&a.id)?;
    let stats = agreement_stats(&session, &records)?;
    if let Some(out) = &a.out {
        write_json(out, &stats)?;
    }
    Ok(stats)
}

#[derive(Debug, Clone, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub sessions: PathBuf,
    /// Root that session image paths are relative to.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Built annotation client to serve statically.
    #[arg(long)]
    pub ui_dir: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

pub fn serve(a: &ServeArgs) -> Result<()> {
    let state = AppState {
        store: Arc::new(SessionStore::new(&a.sessions)),
        corpus: a.corpus.clone(),
        ui_dir: a.ui_dir.clone(),
    };
    let runtime = tokio::runtime::Runtime::new().context("cannot start async runtime")?;
    runtime.block_on(contrastaug_server::serve(a.addr, state))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_enums_from_flags() {
        assert_eq!(parse_condition("synthetic-target").unwrap(), Condition::SyntheticTarget);
        assert_eq!(parse_condition("real_target").unwrap(), Condition::RealTarget);
        assert_eq!(parse_judgment("no").unwrap(), Judgment::No);
        assert!(parse_judgment("maybe").is_err());
    }
}
