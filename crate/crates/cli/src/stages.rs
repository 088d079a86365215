//! Pipeline stages. Each reads its inputs from files, writes its outputs
//! atomically and records a metadata file next to the primary output.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, ValueEnum};
use contrastaug_core::augment::{
    self, AugmentParams, AugmentationBatch, GatewayGenerability, RankingMode, VerifyMode, MAX_PROMPT_FEATURES,
};
use contrastaug_core::dataset::{self, CorpusManifest, IngestLayout, Violation, TRAIN};
use contrastaug_core::evaluation::{
    self, option_pool_all, option_pool_from_probes, selected_by_concept, EvalProbe, EvalResult, ExperimentConfig,
    FinetuneRecord,
};
use contrastaug_core::features::{self, ExtractConfig, Feature, FeatureStatus};
use contrastaug_core::filter::{self, EmbeddingSimilarity, ImageData, ScoringContext, SelectParams};
use contrastaug_core::gateway::Role;
use contrastaug_core::pairs::{self, ConfusablePair, DiscoveryParams, ProbeResult};
use contrastaug_core::records::{read_json, read_lines, write_json, write_lines};
use contrastaug_core::rng::derive_seed;
use contrastaug_core::templates::{self, Template};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::meta::{require, RunMeta};
use crate::runtime::{sibling, ManifestArgs, Runtime};

#[derive(Debug, Clone, Args)]
pub struct IngestArgs {
    /// Directory holding one subdirectory of images per concept.
    #[arg(long)]
    pub root: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Accepted image file extensions; defaults to common image formats.
    #[arg(long, value_delimiter = ',')]
    pub extensions: Vec<String>,
}

pub fn ingest(rt: &Runtime, a: &IngestArgs) -> Result<CorpusManifest> {
    let mut layout = IngestLayout::default();
    if !a.extensions.is_empty() {
        layout.extensions = a.extensions.iter().map(|e| e.trim_start_matches('.').to_lowercase()).collect();
    }
    let seed = rt.seed_or(0);
    let ingested = dataset::ingest(&a.root, &layout, seed)?;
    ingested.manifest.save(&a.out)?;
    let mut meta = RunMeta::new("ingest", Some(seed), json!({ "layout": layout })).corpus(&a.root);
    for w in &ingested.warnings {
        tracing::warn!("{w}");
        meta.warn(w.to_string());
    }
    meta.write(&a.out, &[])?;
    tracing::info!(
        concepts = ingested.manifest.concepts.len(),
        assets = ingested.manifest.assets.len(),
        "ingested {}",
        a.root.display()
    );
    Ok(ingested.manifest)
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output manifest; defaults to rewriting the input.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub train: usize,
    #[arg(long, default_value_t = 15)]
    pub val: usize,
    #[arg(long, default_value_t = 15)]
    pub test: usize,
}

pub fn split(rt: &Runtime, a: &SplitArgs) -> Result<CorpusManifest> {
    require(&a.manifest, "manifest")?;
    let mut manifest = CorpusManifest::load(&a.manifest)?;
    let input_bytes = std::fs::read(&a.manifest)?;
    manifest.seed = rt.seed_or(manifest.seed);
    let out_path = a.out.clone().unwrap_or_else(|| a.manifest.clone());
    let out = dataset::split(&manifest, a.train, a.val, a.test)?;
    out.save(&out_path)?;
    let mut meta = RunMeta::new("split", Some(manifest.seed), json!({ "train": a.train, "val": a.val, "test": a.test }));
    if out_path != a.manifest {
        meta = meta.input(&a.manifest);
    } else {
        meta.warn(format!("input rewritten in place; previous sha256 {}", contrastaug_core::records::sha256_hex(&input_bytes)));
    }
    meta.write(&out_path, &[])?;
    Ok(out)
}

pub fn verify(rt: &Runtime, a: &ManifestArgs) -> Result<Vec<Violation>> {
    let (manifest, corpus) = rt.load_manifest(a)?;
    Ok(dataset::verify(&manifest, &corpus))
}

#[derive(Debug, Clone, Args)]
pub struct DiscoverArgs {
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Concepts per probe question [default: 15].
    #[arg(long)]
    pub subset_size: Option<usize>,
    /// A pair is flagged when a misidentification rate exceeds this [default: 0.2].
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Validation images probed per concept [default: 5].
    #[arg(long)]
    pub images_per_concept: Option<usize>,
    /// Independent reshuffles of the concept list [default: 1].
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
    /// Probe log; defaults to `probes.jsonl` next to `--out`.
    #[arg(long)]
    pub probes_out: Option<PathBuf>,
}

pub fn discover_pairs(rt: &Runtime, a: &DiscoverArgs) -> Result<Vec<ConfusablePair>> {
    let (manifest, corpus) = rt.load_manifest(&a.manifest)?;
    let gateway = rt.gateway(&corpus, &manifest)?;
    let d = DiscoveryParams::default();
    let s = &rt.config.discovery;
    let params = DiscoveryParams {
        subset_size: a.subset_size.or(s.subset_size).unwrap_or(d.subset_size),
        threshold: a.threshold.or(s.threshold).unwrap_or(d.threshold),
        images_per_concept: a.images_per_concept.or(s.images_per_concept).unwrap_or(d.images_per_concept),
        rounds: a.rounds.or(s.rounds).unwrap_or(d.rounds),
        decode: rt.decode(),
    };
    let seed = rt.seed_or(manifest.seed);
    let concepts: Vec<String> = manifest.concepts.iter().map(|c| c.id.clone()).collect();
    let found = pairs::discover(&gateway, &manifest, &corpus, &concepts, &params, seed)?;
    let probes_out = a.probes_out.clone().unwrap_or_else(|| sibling(&a.out, "probes.jsonl"));
    write_lines(&probes_out, &found.probes)?;
    write_lines(&a.out, &found.pairs)?;
    let unparsed = found.probes.iter().filter(|p| !p.is_parsed()).count();
    let mut meta = RunMeta::new("discover-pairs", Some(seed), json!(params))
        .input(&a.manifest.manifest)
        .corpus(&corpus)
        .models(&gateway, &[Role::Vision])
        .templates(&[templates::PROBE]);
    if unparsed > 0 {
        meta.warn(format!("{unparsed} probe replies named no option"));
    }
    meta.write(&a.out, &[&probes_out])?;
    tracing::info!(probes = found.probes.len(), pairs = found.pairs.len(), "pair discovery done");
    Ok(found.pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ExtractMode {
    Textual,
    Visual,
}

#[derive(Debug, Clone, Args)]
pub struct ExtractArgs {
    #[command(flatten)]
    pub manifest: ManifestArgs,
    #[arg(long)]
    pub pairs: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "textual,visual")]
    pub modes: Vec<ExtractMode>,
    /// Ask for features that separate each target from its misidentified concept.
    #[arg(long)]
    pub contrastive: bool,
    /// Features requested per call [default: 10].
    #[arg(long)]
    pub max_features: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn sorted_pairs(path: &Path) -> Result<Vec<ConfusablePair>> {
    require(path, "pair list")?;
    let mut pairs: Vec<ConfusablePair> = read_lines(path)?;
    pairs.sort_by(|a, b| (&a.target, &a.misidentified).cmp(&(&b.target, &b.misidentified)));
    Ok(pairs)
}

fn feature_order(a: &Feature, b: &Feature) -> std::cmp::Ordering {
    (&a.target, &a.against, a.kind, &a.id).cmp(&(&b.target, &b.against, b.kind, &b.id))
}

pub fn extract_features(rt: &Runtime, a: &ExtractArgs) -> Result<Vec<Feature>> {
    let (manifest, corpus) = rt.load_manifest(&a.manifest)?;
    let pairs = sorted_pairs(&a.pairs)?;
    let gateway = rt.gateway(&corpus, &manifest)?;
    let cfg = ExtractConfig {
        max_features: a.max_features.or(rt.config.extract.max_features).unwrap_or(ExtractConfig::default().max_features),
        decode: rt.decode(),
    };
    let jobs: BTreeSet<(String, Option<String>)> = pairs
        .iter()
        .map(|p| (p.target.clone(), a.contrastive.then(|| p.misidentified.clone())))
        .collect();
    let modes: BTreeSet<ExtractMode> = a.modes.iter().copied().collect();
    let mut all = Vec::new();
    let mut warnings = Vec::new();
    for (target, against) in &jobs {
        let target = manifest.require_concept(target)?;
        let against = against.as_deref().map(|m| manifest.require_concept(m)).transpose()?;
        if modes.contains(&ExtractMode::Textual) {
            let x = features::extract_textual(&gateway, target, against, &cfg)
                .with_context(|| format!("textual extraction for `{}`", target.id))?;
            warnings.extend(x.warnings);
            all.extend(x.features);
        }
        if modes.contains(&ExtractMode::Visual) {
            let images = manifest.split_assets(&target.id, TRAIN)?;
            let x = features::extract_visual(&gateway, &corpus, target, &images, against, &cfg)
                .with_context(|| format!("visual extraction for `{}`", target.id))?;
            warnings.extend(x.warnings);
            warnings.extend(x.failures.into_iter().map(|(img, e)| format!("image {img}: {e}")));
            all.extend(x.features);
        }
    }
    let mut out = features::dedup_features(all);
    out.sort_by(feature_order);
    write_lines(&a.out, &out)?;
    let mut used: Vec<Template> = Vec::new();
    if modes.contains(&ExtractMode::Textual) {
        used.push(if a.contrastive { templates::TEXTUAL_CONTRASTIVE } else { templates::TEXTUAL });
    }
    if modes.contains(&ExtractMode::Visual) {
        used.push(if a.contrastive { templates::VISUAL_CONTRASTIVE } else { templates::VISUAL });
        used.push(templates::MERGE);
    }
    let params = json!({ "modes": modes, "contrastive": a.contrastive, "extract": cfg });
    let mut meta = RunMeta::new("extract-features", None, params)
        .input(&a.manifest.manifest)
        .input(&a.pairs)
        .corpus(&corpus)
        .models(&gateway, &[Role::Chat, Role::Vision])
        .templates(&used);
    for w in warnings {
        tracing::warn!("{w}");
        meta.warn(w);
    }
    meta.write(&a.out, &[])?;
    tracing::info!(features = out.len(), "feature extraction done");
    Ok(out)
}

#[derive(Debug, Clone, Args)]
pub struct FilterArgs {
    #[command(flatten)]
    pub manifest: ManifestArgs,
    #[arg(long)]
    pub features: PathBuf,
    /// Pair list, needed for features extracted without a contrast concept;
    /// defaults to `pairs.jsonl` next to `--features`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Minimum discriminability [default: 0.6].
    #[arg(long)]
    pub d_threshold: Option<f64>,
    /// Features selected per pair [default: 5].
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Image pairs per score [default: 5].
    #[arg(long)]
    pub max_pairs: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Real images of `concept` in `split`, in manifest order.
pub fn load_images(manifest: &CorpusManifest, corpus: &Path, concept: &str, split: &str) -> Result<Vec<ImageData>> {
    manifest
        .split_assets(concept, split)?
        .into_iter()
        .map(|a| Ok(ImageData::new(a.read_bytes(corpus)?)))
        .collect()
}

pub fn filter_features(rt: &Runtime, a: &FilterArgs) -> Result<Vec<Feature>> {
    require(&a.features, "feature list")?;
    let (manifest, corpus) = rt.load_manifest(&a.manifest)?;
    let features: Vec<Feature> = read_lines(&a.features)?;
    let mut groups: BTreeMap<(String, String), Vec<Feature>> = BTreeMap::new();
    let mut pairs_used = None;
    let (plain, contrastive): (Vec<Feature>, Vec<Feature>) = features.into_iter().partition(|f| f.against.is_none());
    for f in contrastive {
        let key = (f.target.clone(), f.against.clone().unwrap_or_default());
        groups.entry(key).or_default().push(f);
    }
    if !plain.is_empty() {
        let path = a.pairs.clone().unwrap_or_else(|| sibling(&a.features, "pairs.jsonl"));
        for p in sorted_pairs(&path)? {
            for f in plain.iter().filter(|f| f.target == p.target) {
                // Scored against this pair's misidentified concept.
                let mut f = f.clone();
                f.against = Some(p.misidentified.clone());
                groups.entry((p.target.clone(), p.misidentified.clone())).or_default().push(f);
            }
        }
        pairs_used = Some(path);
    }

    let gateway = rt.gateway(&corpus, &manifest)?;
    let s = &rt.config.filter;
    let d = SelectParams::default();
    let params = SelectParams {
        d_threshold: a.d_threshold.or(s.d_threshold).unwrap_or(d.d_threshold),
        top_k: a.top_k.or(s.top_k).unwrap_or(d.top_k),
    };
    let max_pairs = a.max_pairs.or(s.max_pairs).unwrap_or(filter::DEFAULT_PAIR_COUNT);
    let seed = rt.seed_or(manifest.seed);
    let sim = EmbeddingSimilarity::new(&gateway);
    let mut out = Vec::new();
    let mut warnings = Vec::new();
    for ((t, m), group) in groups {
        let target = manifest.require_concept(&t)?;
        let ctx = ScoringContext::new(
            load_images(&manifest, &corpus, &t, TRAIN)?,
            load_images(&manifest, &corpus, &m, TRAIN)?,
            max_pairs,
            derive_seed(seed, &format!("score:{t}:{m}")),
        )
        .with_context(|| format!("scoring images for pair ({t}, {m})"))?;
        let supplier = GatewayGenerability {
            gateway: &gateway,
            concept_name: target.canonical_name.clone(),
            seed: derive_seed(seed, &format!("generability:{t}:{m}")),
        };
        let selection = filter::filter_and_select(group, &ctx, &sim, &params, &supplier)
            .with_context(|| format!("filtering features of pair ({t}, {m})"))?;
        warnings.extend(selection.warnings);
        out.extend(selection.features);
    }
    write_lines(&a.out, &out)?;
    let mut meta = RunMeta::new(
        "filter-features",
        Some(seed),
        json!({ "select": params, "max_pairs": max_pairs, "image_split": TRAIN }),
    )
    .input(&a.manifest.manifest)
    .input(&a.features)
    .corpus(&corpus)
    .models(&gateway, &[Role::Embed, Role::ImageGen])
    .templates(&[templates::GENERATE]);
    if let Some(p) = &pairs_used {
        meta = meta.input(p);
    }
    for w in warnings {
        tracing::warn!("{w}");
        meta.warn(w);
    }
    meta.write(&a.out, &[])?;
    let selected = out.iter().filter(|f| f.status == FeatureStatus::Selected).count();
    tracing::info!(scored = out.len(), selected, "feature filtering done");
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VerifyKind {
    Boolean,
    Confidence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum RankKind {
    MeanSimilarity,
    Seeded,
}

#[derive(Debug, Clone, Args)]
pub struct AugmentArgs {
    #[command(flatten)]
    pub manifest: ManifestArgs,
    #[arg(long)]
    pub selected: PathBuf,
    /// Pair list; defaults to `pairs.jsonl` next to `--selected`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Images generated per pair [default: 50].
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long, value_enum, default_value = "boolean")]
    pub verify: VerifyKind,
    /// Minimum stated confidence in confidence mode [default: 0.85].
    #[arg(long)]
    pub confidence_threshold: Option<f64>,
    #[arg(long, value_enum, default_value = "mean-similarity")]
    pub ranking: RankKind,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn augment(rt: &Runtime, a: &AugmentArgs) -> Result<Vec<AugmentationBatch>> {
    require(&a.selected, "selected feature list")?;
    let (manifest, corpus) = rt.load_manifest(&a.manifest)?;
    let pairs_path = a.pairs.clone().unwrap_or_else(|| sibling(&a.selected, "pairs.jsonl"));
    let pairs = sorted_pairs(&pairs_path)?;
    let features: Vec<Feature> = read_lines(&a.selected)?;
    let gateway = rt.gateway(&corpus, &manifest)?;
    let verify = match a.verify {
        VerifyKind::Boolean => VerifyMode::Boolean,
        VerifyKind::Confidence => VerifyMode::Confidence {
            threshold: a.confidence_threshold.or(rt.config.augment.confidence_threshold).unwrap_or(0.85),
        },
    };
    let params = AugmentParams {
        n: a.n.or(rt.config.augment.n).unwrap_or(AugmentParams::default().n),
        verify,
        ranking: match a.ranking {
            RankKind::MeanSimilarity => RankingMode::MeanSimilarity,
            RankKind::Seeded => RankingMode::Seeded,
        },
        decode: rt.decode(),
    };
    let seed = rt.seed_or(manifest.seed);
    let sim = EmbeddingSimilarity::new(&gateway);
    let mut batches = Vec::new();
    let mut warnings = Vec::new();
    for pair in &pairs {
        let mut chosen: Vec<&Feature> = features
            .iter()
            .filter(|f| {
                f.status == FeatureStatus::Selected
                    && f.target == pair.target
                    && f.against.as_deref() == Some(pair.misidentified.as_str())
            })
            .collect();
        if chosen.is_empty() {
            warnings.push(format!("pair ({}, {}): no selected features, skipped", pair.target, pair.misidentified));
            continue;
        }
        if chosen.len() > MAX_PROMPT_FEATURES {
            warnings.push(format!(
                "pair ({}, {}): using the top {MAX_PROMPT_FEATURES} of {} selected features",
                pair.target,
                pair.misidentified,
                chosen.len()
            ));
            chosen.truncate(MAX_PROMPT_FEATURES);
        }
        let target = manifest.require_concept(&pair.target)?;
        let batch = augment::augment_pair(&gateway, &corpus, target, pair, &chosen, &params, seed, &sim)
            .with_context(|| format!("augmenting pair ({}, {})", pair.target, pair.misidentified))?;
        if batch.kept.is_empty() {
            warnings.push(format!("pair ({}, {}): no image satisfied every feature", pair.target, pair.misidentified));
        }
        batches.push(batch);
    }
    write_lines(&a.out, &batches)?;
    let verify_template = match verify {
        VerifyMode::Boolean => templates::VERIFY,
        VerifyMode::Confidence { .. } => templates::VERIFY_CONFIDENCE,
    };
    let mut meta = RunMeta::new("augment", Some(seed), json!(params))
        .input(&a.manifest.manifest)
        .input(&a.selected)
        .input(&pairs_path)
        .corpus(&corpus)
        .models(&gateway, &[Role::ImageGen, Role::Vision, Role::Embed])
        .templates(&[templates::GENERATE, verify_template]);
    for w in warnings {
        tracing::warn!("{w}");
        meta.warn(w);
    }
    meta.write(&a.out, &[])?;
    let kept: usize = batches.iter().map(|b| b.kept.len()).sum();
    tracing::info!(batches = batches.len(), kept, "augmentation done");
    Ok(batches)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolMode {
    /// Each concept's options are the subset it was probed in.
    Subset,
    /// Every concept is an option.
    All,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Selected features; required for in-context evaluation.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Evaluated concepts are the targets of this pair list; defaults to
    /// `pairs.jsonl` next to `--features` (or `--out`).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Probe log of pair discovery, for the subset option pool; defaults to
    /// `probes.jsonl` next to the pair list.
    #[arg(long)]
    pub probes: Option<PathBuf>,
    /// Experiment description (JSON); overrides `--ratio` and `--in-context`.
    #[arg(long)]
    pub experiment: Option<PathBuf>,
    /// Real:synthetic ratio naming the evaluated model [default: 5:0].
    #[arg(long)]
    pub ratio: Option<String>,
    /// Put each option's selected features into the prompt.
    #[arg(long)]
    pub in_context: bool,
    /// Option set per question [default: subset].
    #[arg(long, value_enum)]
    pub option_pool: Option<PoolMode>,
    #[arg(long)]
    pub out: PathBuf,
    /// Probe log; defaults to `<out stem>.probes.jsonl`.
    #[arg(long)]
    pub probes_out: Option<PathBuf>,
}

fn targets(pairs: &[ConfusablePair]) -> Vec<String> {
    pairs.iter().map(|p| p.target.clone()).collect::<BTreeSet<_>>().into_iter().collect()
}

fn parse_pool(s: &str) -> Result<PoolMode> {
    match s {
        "subset" => Ok(PoolMode::Subset),
        "all" => Ok(PoolMode::All),
        other => bail!("unknown option pool `{other}` (expected subset or all)"),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub result: EvalResult,
    pub option_pool: PoolMode,
    /// Mean of `1/|options|` over the probes: the accuracy of a uniform guess.
    pub chance: f64,
    /// Standard deviation of the accuracy of a uniform guess.
    pub chance_sigma: f64,
}

impl EvaluationReport {
    pub fn new(result: EvalResult, option_pool: PoolMode, probes: &[EvalProbe]) -> Self {
        let n = probes.len().max(1) as f64;
        let ps: Vec<f64> = probes.iter().map(|p| 1.0 / p.options.len().max(1) as f64).collect();
        let chance = ps.iter().sum::<f64>() / n;
        let chance_sigma = ps.iter().map(|p| p * (1.0 - p)).sum::<f64>().sqrt() / n;
        Self { result, option_pool, chance, chance_sigma }
    }
}

pub fn evaluate(rt: &Runtime, a: &EvaluateArgs) -> Result<EvaluationReport> {
    let (manifest, corpus) = rt.load_manifest(&a.manifest)?;
    let seed = rt.seed_or(manifest.seed);
    let config: ExperimentConfig = match &a.experiment {
        Some(path) => {
            require(path, "experiment")?;
            let c: ExperimentConfig = read_json(path)?;
            c.validate()?;
            c
        }
        None => ExperimentConfig::from_ratio(a.ratio.as_deref().unwrap_or("5:0"), a.in_context, seed)?,
    };
    let mut meta_inputs = vec![a.manifest.manifest.clone()];
    let features = match (&a.features, config.in_context_features) {
        (Some(path), true) => {
            require(path, "selected feature list")?;
            meta_inputs.push(path.clone());
            let list: Vec<Feature> = read_lines(path)?;
            Some(selected_by_concept(&list))
        }
        (None, true) => bail!("in-context evaluation needs --features"),
        _ => None,
    };
    let pairs_path = a
        .pairs
        .clone()
        .unwrap_or_else(|| sibling(a.features.as_deref().unwrap_or(&a.out), "pairs.jsonl"));
    let pairs = sorted_pairs(&pairs_path)?;
    meta_inputs.push(pairs_path.clone());
    let pool_mode = match a.option_pool {
        Some(p) => p,
        None => rt.config.evaluate.option_pool.as_deref().map(parse_pool).transpose()?.unwrap_or(PoolMode::Subset),
    };
    let pool = match pool_mode {
        PoolMode::All => option_pool_all(&manifest),
        PoolMode::Subset => {
            let path = a.probes.clone().unwrap_or_else(|| sibling(&pairs_path, "probes.jsonl"));
            require(&path, "probe log")?;
            meta_inputs.push(path.clone());
            let probes: Vec<ProbeResult> = read_lines(&path)?;
            option_pool_from_probes(&probes)
        }
    };
    let gateway = rt.gateway(&corpus, &manifest)?;
    let concepts = targets(&pairs);
    let evaluation = evaluation::evaluate(
        &gateway,
        &manifest,
        &corpus,
        &concepts,
        &pool,
        features.as_ref(),
        &config,
        &rt.decode(),
    )?;
    let report = EvaluationReport::new(evaluation.result, pool_mode, &evaluation.probes);
    let probes_out = a.probes_out.clone().unwrap_or_else(|| a.out.with_extension("probes.jsonl"));
    write_lines(&probes_out, &evaluation.probes)?;
    write_json(&a.out, &report)?;
    let template = if config.in_context_features { templates::EVALUATE_FEATURES } else { templates::EVALUATE };
    let mut meta = RunMeta::new("evaluate", Some(seed), json!({ "experiment": config, "option_pool": pool_mode }))
        .corpus(&corpus)
        .models(&gateway, &[Role::Vision])
        .templates(&[template]);
    for p in &meta_inputs {
        meta = meta.input(p);
    }
    if report.result.incomplete {
        meta.warn(format!("{} of {} probes failed", report.result.failed, report.result.total));
    }
    meta.write(&a.out, &[&probes_out])?;
    tracing::info!("{}", report.result);
    Ok(report)
}

#[derive(Debug, Clone, Args)]
pub struct ExportArgs {
    #[command(flatten)]
    pub manifest: ManifestArgs,
    /// Augmentation batches; required when the ratio has synthetic images.
    #[arg(long)]
    pub batches: Option<PathBuf>,
    /// Exported concepts are the targets of this pair list; defaults to
    /// `pairs.jsonl` next to `--batches` (or `--out`).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Real:synthetic images per concept, e.g. 5:1.
    #[arg(long)]
    pub ratio: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn export_finetune(rt: &Runtime, a: &ExportArgs) -> Result<Vec<FinetuneRecord>> {
    let (manifest, _) = rt.load_manifest(&a.manifest)?;
    let seed = rt.seed_or(manifest.seed);
    let config = ExperimentConfig::from_ratio(&a.ratio, false, seed)?;
    let pairs_path = a
        .pairs
        .clone()
        .unwrap_or_else(|| sibling(a.batches.as_deref().unwrap_or(&a.out), "pairs.jsonl"));
    let pairs = sorted_pairs(&pairs_path)?;
    let mut meta = RunMeta::new("export-finetune", Some(seed), json!({ "experiment": config }))
        .input(&a.manifest.manifest)
        .input(&pairs_path)
        .templates(&[templates::FINETUNE_INSTRUCTION]);
    let batches: Vec<AugmentationBatch> = match &a.batches {
        Some(path) => {
            require(path, "augmentation batches")?;
            meta = meta.input(path);
            read_lines(path)?
        }
        None if config.synthetic_per_concept > 0 => bail!("ratio {} needs --batches", a.ratio),
        None => Vec::new(),
    };
    let records = evaluation::export_finetune(&manifest, &batches, &config, &targets(&pairs))?;
    write_lines(&a.out, &records)?;
    meta.write(&a.out, &[])?;
    tracing::info!(ratio = %a.ratio, records = records.len(), "fine-tune export done");
    Ok(records)
}
