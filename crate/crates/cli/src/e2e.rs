//! Full pipeline on a generated corpus and the mock backend.
//!
//! Stages hand off through files exactly as when run one by one. The output
//! tree is a pure function of the seed and the arguments.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use clap::Args;
use contrastaug_core::dataset::Provenance;
use contrastaug_core::evaluation::RATIOS;
use contrastaug_core::features::{Feature, FeatureStatus};
use contrastaug_core::gateway::mock::{tags_in, MockWorld};
use contrastaug_core::records::write_json;
use serde::{Deserialize, Serialize};

use crate::runtime::{ManifestArgs, Runtime, MOCK_WORLD_FILE};
use crate::stages::{self, EvaluationReport, PoolMode, RankKind, VerifyKind};

#[derive(Debug, Clone, Args)]
pub struct E2eArgs {
    /// Output directory; must be empty or absent.
    #[arg(long, default_value = "e2e-out")]
    pub out: PathBuf,
    /// Concepts in the generated world; every other one is novel.
    #[arg(long, default_value_t = 80)]
    pub concepts: usize,
    #[arg(long, default_value_t = 35)]
    pub images: usize,
    /// Images generated per pair.
    #[arg(long, default_value_t = 50)]
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub correct: usize,
    pub total: usize,
    pub accuracy: Option<f64>,
    pub chance: f64,
    pub chance_sigma: f64,
}

impl From<&EvaluationReport> for EvalSummary {
    fn from(r: &EvaluationReport) -> Self {
        Self {
            correct: r.result.correct,
            total: r.result.total,
            accuracy: r.result.accuracy,
            chance: r.chance,
            chance_sigma: r.chance_sigma,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExportCount {
    pub records: usize,
    pub real: usize,
    pub synthetic: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct E2eSummary {
    pub seed: u64,
    pub concepts: usize,
    pub assets: usize,
    pub pairs: usize,
    pub targets: Vec<String>,
    pub features: usize,
    pub selected_features: usize,
    /// Selected features whose mock tags are not exactly their target.
    pub foreign_selected: Vec<String>,
    pub kept_images: usize,
    pub baseline: EvalSummary,
    pub in_context: EvalSummary,
    pub exports: BTreeMap<String, ExportCount>,
}

/// Whether a selected feature carries exactly its own target's tag.
pub fn tag_matches(f: &Feature) -> bool {
    tags_in(&f.text) == [f.target.to_lowercase()]
}

fn is_empty_dir(p: &Path) -> Result<bool> {
    Ok(!p.exists() || (p.is_dir() && std::fs::read_dir(p)?.next().is_none()))
}

pub fn run(rt: &Runtime, a: &E2eArgs) -> Result<E2eSummary> {
    if !is_empty_dir(&a.out)? {
        bail!("output directory {} is not empty", a.out.display());
    }
    let seed = rt.seed_or(7);
    let rt = Runtime::new(rt.config.clone(), Some(seed), true, rt.cache_dir.clone());
    let out = &a.out;
    let corpus = out.join("corpus");
    let world = MockWorld::species(a.concepts);
    world.write_corpus(&corpus, a.images)?;
    world.save(&corpus.join(MOCK_WORLD_FILE))?;

    let raw = out.join("manifest.raw.jsonl");
    let manifest_path = out.join("manifest.jsonl");
    stages::ingest(&rt, &stages::IngestArgs { root: corpus.clone(), out: raw.clone(), extensions: vec!["img".into()] })?;
    let manifest = stages::split(
        &rt,
        &stages::SplitArgs { manifest: raw, out: Some(manifest_path.clone()), train: 5, val: 15, test: 15 },
    )?;
    let m = || ManifestArgs { manifest: manifest_path.clone(), corpus: Some(corpus.clone()) };
    let violations = stages::verify(&rt, &m())?;
    if !violations.is_empty() {
        bail!("corpus failed verification: {}", violations.len());
    }

    let pairs_path = out.join("pairs.jsonl");
    let pairs = stages::discover_pairs(
        &rt,
        &stages::DiscoverArgs {
            manifest: m(),
            subset_size: None,
            threshold: None,
            images_per_concept: None,
            rounds: None,
            out: pairs_path.clone(),
            probes_out: None,
        },
    )?;
    let features_path = out.join("features.jsonl");
    let features = stages::extract_features(
        &rt,
        &stages::ExtractArgs {
            manifest: m(),
            pairs: pairs_path.clone(),
            modes: vec![stages::ExtractMode::Textual, stages::ExtractMode::Visual],
            contrastive: true,
            max_features: None,
            out: features_path.clone(),
        },
    )?;
    let selected_path = out.join("selected.jsonl");
    let scored = stages::filter_features(
        &rt,
        &stages::FilterArgs {
            manifest: m(),
            features: features_path,
            pairs: None,
            d_threshold: None,
            top_k: None,
            max_pairs: None,
            out: selected_path.clone(),
        },
    )?;
    let batches_path = out.join("batches.jsonl");
    let batches = stages::augment(
        &rt,
        &stages::AugmentArgs {
            manifest: m(),
            selected: selected_path.clone(),
            pairs: None,
            n: Some(a.n),
            verify: VerifyKind::Boolean,
            confidence_threshold: None,
            ranking: RankKind::MeanSimilarity,
            out: batches_path.clone(),
        },
    )?;

    let eval_dir = out.join("eval");
    let eval = |in_context: bool, name: &str| {
        stages::evaluate(
            &rt,
            &stages::EvaluateArgs {
                manifest: m(),
                features: Some(selected_path.clone()),
                pairs: Some(pairs_path.clone()),
                probes: None,
                experiment: None,
                ratio: None,
                in_context,
                option_pool: Some(PoolMode::Subset),
                out: eval_dir.join(format!("{name}.json")),
                probes_out: None,
            },
        )
    };
    let baseline = eval(false, "baseline")?;
    let in_context = eval(true, "in_context")?;

    let mut exports = BTreeMap::new();
    for ratio in RATIOS {
        let records = stages::export_finetune(
            &rt,
            &stages::ExportArgs {
                manifest: m(),
                batches: Some(batches_path.clone()),
                pairs: Some(pairs_path.clone()),
                ratio: ratio.to_string(),
                out: out.join("finetune").join(format!("ratio_{}.jsonl", ratio.replace(':', "_"))),
            },
        )?;
        let synthetic = records.iter().filter(|r| r.provenance == Provenance::Synthetic).count();
        exports.insert(
            ratio.to_string(),
            ExportCount { records: records.len(), real: records.len() - synthetic, synthetic },
        );
    }

    let selected: Vec<&Feature> = scored.iter().filter(|f| f.status == FeatureStatus::Selected).collect();
    let mut targets: Vec<String> = pairs.iter().map(|p| p.target.clone()).collect();
    targets.sort();
    targets.dedup();
    let summary = E2eSummary {
        seed,
        concepts: manifest.concepts.len(),
        assets: manifest.assets.len(),
        pairs: pairs.len(),
        targets,
        features: features.len(),
        selected_features: selected.len(),
        foreign_selected: selected.iter().filter(|f| !tag_matches(f)).map(|f| f.id.clone()).collect(),
        kept_images: batches.iter().map(|b| b.kept.len()).sum(),
        baseline: (&baseline).into(),
        in_context: (&in_context).into(),
        exports,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}
