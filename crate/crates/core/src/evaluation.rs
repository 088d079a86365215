//! Recognition accuracy and fine-tuning exports.
//!
//! Evaluation asks the vision model one multiple-choice question per test
//! image, optionally listing selected features per option in the prompt.
//! Exports write conversational instruction-tuning records mixing real and
//! synthetic images at a fixed ratio.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationBatch;
use crate::choice;
use crate::dataset::{Concept, CorpusManifest, DatasetError, Provenance, TEST, TRAIN, VAL};
use crate::features::{Feature, FeatureStatus};
use crate::gateway::{purpose, DecodeParams, Gateway, Message};
use crate::pairs::{ProbeResult, UNPARSED};
use crate::rng::SplitMix64;
use crate::templates::{self, RenderError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentMode {
    FixedReal,
    FixedCompute,
}

/// The Real:Syn ratios of both experiment regimes.
pub const RATIOS: [&str; 7] = ["5:0", "5:1", "5:3", "5:5", "20:0", "10:10", "0:20"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub real_per_concept: usize,
    pub synthetic_per_concept: usize,
    pub mode: ExperimentMode,
    pub in_context_features: bool,
    pub seed: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("invalid experiment: {0}")]
    InvalidConfig(String),
    #[error("no test images for the evaluated concepts")]
    NoTestImages,
    #[error("gold concept `{0}` is not among the options")]
    GoldNotInOptions(String),
    #[error("no option list for concept `{0}`")]
    NoOptions(String),
    #[error("not enough images to export: {}", .0.iter().map(ToString::to_string).collect::<Vec<_>>().join("; "))]
    Shortfall(Vec<Shortfall>),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] RenderError),
}

impl ExperimentConfig {
    /// Parses `real:syn` and infers the regime.
    pub fn from_ratio(ratio: &str, in_context_features: bool, seed: u64) -> Result<Self, EvalError> {
        let bad = || EvalError::InvalidConfig(format!("ratio `{ratio}` is not of the form real:syn"));
        let (r, s) = ratio.split_once(':').ok_or_else(bad)?;
        let real: usize = r.trim().parse().map_err(|_| bad())?;
        let syn: usize = s.trim().parse().map_err(|_| bad())?;
        let mode = if real == 5 && [0, 1, 3, 5].contains(&syn) {
            ExperimentMode::FixedReal
        } else {
            ExperimentMode::FixedCompute
        };
        let cfg = Self {
            name: format!("{real}:{syn}"),
            real_per_concept: real,
            synthetic_per_concept: syn,
            mode,
            in_context_features,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        let (r, s) = (self.real_per_concept, self.synthetic_per_concept);
        let ok = match self.mode {
            ExperimentMode::FixedReal => r == 5 && [0, 1, 3, 5].contains(&s),
            ExperimentMode::FixedCompute => matches!((r, s), (20, 0) | (10, 10) | (0, 20)),
        };
        if ok {
            Ok(())
        } else {
            Err(EvalError::InvalidConfig(format!("{r}:{s} is not a valid {:?} ratio", self.mode)))
        }
    }
}

/// Selected features per concept, ordered by `G` descending (then id).
pub fn selected_by_concept(features: &[Feature]) -> BTreeMap<String, Vec<Feature>> {
    let mut out: BTreeMap<String, Vec<Feature>> = BTreeMap::new();
    for f in features.iter().filter(|f| f.status == FeatureStatus::Selected) {
        let list = out.entry(f.target.clone()).or_default();
        if !list.iter().any(|g| g.id == f.id) {
            list.push(f.clone());
        }
    }
    for list in out.values_mut() {
        list.sort_by(|a, b| {
            let g = |f: &Feature| f.g_score.unwrap_or(f64::NEG_INFINITY);
            g(b).total_cmp(&g(a)).then_with(|| a.id.cmp(&b.id))
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalPrompt {
    pub messages: Vec<Message>,
    /// Concept ids in presentation order.
    pub options: Vec<String>,
}

/// Builds the multiple-choice prompt for one image. Options are shuffled
/// with a seed derived from the image id. When `features` is given, every
/// option with selected features gets a block listing them.
pub fn build_eval_prompt(
    image: &str,
    gold: &str,
    options: &[&Concept],
    features: Option<&BTreeMap<String, Vec<Feature>>>,
    seed: u64,
) -> Result<EvalPrompt, EvalError> {
    let mut order: Vec<&Concept> = options.to_vec();
    order.sort_by(|a, b| a.id.cmp(&b.id));
    order.dedup_by(|a, b| a.id == b.id);
    if !order.iter().any(|c| c.id == gold) {
        return Err(EvalError::GoldNotInOptions(gold.to_string()));
    }
    SplitMix64::for_label(seed, &format!("eval-options:{image}")).shuffle(&mut order);
    let names: Vec<&str> = order.iter().map(|c| c.canonical_name.as_str()).collect();

    let mut blocks = Vec::new();
    if let Some(map) = features {
        for c in &order {
            let selected: Vec<&Feature> = map
                .get(&c.id)
                .map(|v| v.iter().filter(|f| f.status == FeatureStatus::Selected).collect())
                .unwrap_or_default();
            if selected.is_empty() {
                continue;
            }
            let lines = selected.iter().map(|f| format!("- {}", f.text)).collect::<Vec<_>>().join("\n");
            blocks.push(format!("{}:\n{lines}", c.canonical_name));
        }
    }
    let feature_section = if blocks.is_empty() {
        String::new()
    } else {
        templates::EVALUATE_FEATURES.render(&[("blocks", &blocks.join("\n\n"))])?
    };
    let prompt = templates::EVALUATE
        .render(&[("options", &choice::render_options(&names)), ("features", &feature_section)])?;
    Ok(EvalPrompt { messages: vec![Message::user(prompt)], options: order.iter().map(|c| c.id.clone()).collect() })
}

/// Option lists per concept.
pub type OptionPool = BTreeMap<String, Vec<String>>;

/// Every concept sees every concept as an option.
pub fn option_pool_all(manifest: &CorpusManifest) -> OptionPool {
    let all: Vec<String> = manifest.concepts.iter().map(|c| c.id.clone()).collect();
    all.iter().map(|c| (c.clone(), all.clone())).collect()
}

/// Each concept sees the subset it was probed in (its earliest probe).
pub fn option_pool_from_probes(probes: &[ProbeResult]) -> OptionPool {
    let mut first: BTreeMap<&str, &ProbeResult> = BTreeMap::new();
    for p in probes {
        let e = first.entry(&p.gold).or_insert(p);
        if (p.round, &p.image) < (e.round, &e.image) {
            *e = p;
        }
    }
    first
        .into_iter()
        .map(|(c, p)| {
            let mut opts = p.options.clone();
            opts.sort();
            (c.to_string(), opts)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalProbe {
    pub concept: String,
    pub image: String,
    pub options: Vec<String>,
    /// Predicted concept id, [`UNPARSED`], or empty when the call failed.
    pub predicted: String,
    pub correct: bool,
    #[serde(default)]
    pub reply: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConceptScore {
    pub correct: usize,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub config: ExperimentConfig,
    pub per_concept: BTreeMap<String, ConceptScore>,
    pub correct: usize,
    pub total: usize,
    /// `None` when any probe failed; never computed over partial data.
    pub accuracy: Option<f64>,
    pub incomplete: bool,
    pub failed: usize,
}

impl EvalResult {
    /// Recounts a probe log.
    pub fn from_probes(config: ExperimentConfig, probes: &[EvalProbe]) -> Self {
        let mut per_concept: BTreeMap<String, ConceptScore> = BTreeMap::new();
        let mut failed = 0;
        for p in probes {
            let s = per_concept.entry(p.concept.clone()).or_default();
            s.total += 1;
            s.correct += usize::from(p.correct);
            failed += usize::from(p.error.is_some());
        }
        let correct = per_concept.values().map(|s| s.correct).sum();
        let total = per_concept.values().map(|s| s.total).sum();
        let incomplete = failed > 0;
        let accuracy = (!incomplete && total > 0).then(|| correct as f64 / total as f64);
        Self { config, per_concept, correct, total, accuracy, incomplete, failed }
    }
}

impl fmt::Display for EvalResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.accuracy {
            Some(a) => write!(f, "{}: {}/{} correct ({:.2}%)", self.config.name, self.correct, self.total, 100.0 * a),
            None => write!(f, "{}: incomplete, {} of {} probes failed", self.config.name, self.failed, self.total),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub result: EvalResult,
    /// Sorted by `(concept, image)`.
    pub probes: Vec<EvalProbe>,
}

/// One probe per test image of each concept. Gateway failures do not abort
/// the run; they mark the result incomplete.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    gateway: &Gateway,
    manifest: &CorpusManifest,
    root: &Path,
    concepts: &[String],
    pool: &OptionPool,
    features: Option<&BTreeMap<String, Vec<Feature>>>,
    config: &ExperimentConfig,
    decode: &DecodeParams,
) -> Result<Evaluation, EvalError> {
    let features = if config.in_context_features { features } else { None };
    let mut jobs = Vec::new();
    for id in concepts.iter().collect::<BTreeSet<_>>() {
        let option_ids = pool.get(id).ok_or_else(|| EvalError::NoOptions(id.clone()))?;
        let mut options: Vec<&Concept> =
            option_ids.iter().map(|o| manifest.require_concept(o)).collect::<Result<_, _>>()?;
        if !options.iter().any(|c| &c.id == id) {
            options.push(manifest.require_concept(id)?);
        }
        for asset in manifest.split_assets(id, TEST)? {
            let prompt = build_eval_prompt(&asset.id, id, &options, features, config.seed)?;
            jobs.push((id.clone(), asset, prompt));
        }
    }
    if jobs.is_empty() {
        return Err(EvalError::NoTestImages);
    }
    let mut probes: Vec<EvalProbe> = jobs
        .into_par_iter()
        .map(|(concept, asset, prompt)| {
            let mut probe = EvalProbe {
                concept,
                image: asset.id.clone(),
                options: prompt.options.clone(),
                predicted: String::new(),
                correct: false,
                reply: String::new(),
                error: None,
            };
            let reply = asset
                .read_bytes(root)
                .map_err(|e| e.to_string())
                .and_then(|bytes| {
                    gateway.vision_chat(purpose::EVALUATE, &bytes, prompt.messages, decode).map_err(|e| e.to_string())
                });
            match reply {
                Ok(reply) => {
                    let names: Vec<&str> = prompt
                        .options
                        .iter()
                        .map(|o| manifest.concept(o).map(|c| c.canonical_name.as_str()).unwrap_or(""))
                        .collect();
                    probe.predicted = match choice::parse_choice(&reply, &names) {
                        Some(i) => prompt.options[i].clone(),
                        None => UNPARSED.to_string(),
                    };
                    probe.correct = probe.predicted == probe.concept;
                    probe.reply = reply;
                }
                Err(e) => probe.error = Some(e),
            }
            probe
        })
        .collect();
    probes.sort_by(|a, b| (&a.concept, &a.image).cmp(&(&b.concept, &b.image)));
    let result = EvalResult::from_probes(config.clone(), &probes);
    if result.incomplete {
        tracing::warn!(failed = result.failed, total = result.total, "evaluation incomplete");
    }
    Ok(Evaluation { result, probes })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub role: String,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinetuneRecord {
    /// Corpus-relative image path.
    pub image: String,
    pub conversations: Vec<Turn>,
    pub gold: String,
    pub provenance: Provenance,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shortfall {
    pub concept: String,
    pub provenance: Provenance,
    pub need: usize,
    pub have: usize,
}

impl fmt::Display for Shortfall {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.provenance {
            Provenance::Real => "real",
            Provenance::Synthetic => "synthetic",
        };
        write!(f, "`{}` needs {} {kind} images, has {}", self.concept, self.need, self.have)
    }
}

fn record(image: &str, concept: &Concept, provenance: Provenance) -> FinetuneRecord {
    FinetuneRecord {
        image: image.to_string(),
        conversations: vec![
            Turn { role: "user".into(), text: templates::FINETUNE_INSTRUCTION.text.trim_end().to_string() },
            Turn { role: "assistant".into(), text: concept.canonical_name.clone() },
        ],
        gold: concept.id.clone(),
        provenance,
    }
}

/// Builds fine-tuning records for `concepts`: per concept the first
/// `real_per_concept` reals of the training split (continuing into the
/// validation split when the training split is smaller), then the first
/// `synthetic_per_concept` kept synthetic images in ranking order.
pub fn export_finetune(
    manifest: &CorpusManifest,
    batches: &[AugmentationBatch],
    config: &ExperimentConfig,
    concepts: &[String],
) -> Result<Vec<FinetuneRecord>, EvalError> {
    config.validate()?;
    let mut out = Vec::new();
    let mut shortfalls = Vec::new();
    for id in concepts.iter().collect::<BTreeSet<_>>() {
        let concept = manifest.require_concept(id)?;
        let mut reals = manifest.split_assets(id, TRAIN)?;
        reals.extend(manifest.split_assets(id, VAL)?);
        if reals.len() < config.real_per_concept {
            shortfalls.push(Shortfall {
                concept: id.clone(),
                provenance: Provenance::Real,
                need: config.real_per_concept,
                have: reals.len(),
            });
        }
        let mut own: Vec<&AugmentationBatch> = batches.iter().filter(|b| &b.pair.target == id).collect();
        own.sort_by(|a, b| a.pair.misidentified.cmp(&b.pair.misidentified));
        let mut seen = BTreeSet::new();
        let mut synthetic = Vec::new();
        for b in own {
            for kept in &b.ranking {
                if let Some(asset) = b.candidate(kept) {
                    if seen.insert(kept.as_str()) {
                        synthetic.push(asset);
                    }
                }
            }
        }
        if synthetic.len() < config.synthetic_per_concept {
            shortfalls.push(Shortfall {
                concept: id.clone(),
                provenance: Provenance::Synthetic,
                need: config.synthetic_per_concept,
                have: synthetic.len(),
            });
        }
        if !shortfalls.is_empty() {
            continue;
        }
        for a in reals.iter().take(config.real_per_concept) {
            out.push(record(&a.path, concept, Provenance::Real));
        }
        for a in synthetic.iter().take(config.synthetic_per_concept) {
            out.push(record(&a.path, concept, Provenance::Synthetic));
        }
    }
    if !shortfalls.is_empty() {
        return Err(EvalError::Shortfall(shortfalls));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn concept(id: &str) -> Concept {
        Concept {
            id: id.into(),
            canonical_name: format!("Name {id}"),
            aliases: vec![],
            supercategory: None,
            images: vec![],
            splits: Default::default(),
            extra: Default::default(),
        }
    }

    fn selected(target: &str, text: &str, g: f64) -> Feature {
        let mut f = Feature::new(text, crate::features::FeatureKind::Textual, target, None).unwrap();
        f.status = FeatureStatus::Selected;
        f.g_score = Some(g);
        f
    }

    #[test]
    fn ratios_parse_and_validate() {
        for r in RATIOS {
            ExperimentConfig::from_ratio(r, false, 0).unwrap();
        }
        assert_eq!(ExperimentConfig::from_ratio("10:10", false, 0).unwrap().mode, ExperimentMode::FixedCompute);
        assert!(ExperimentConfig::from_ratio("5:2", false, 0).is_err());
        assert!(ExperimentConfig::from_ratio("15:5", false, 0).is_err());
        assert!(ExperimentConfig::from_ratio("five", false, 0).is_err());
    }

    #[test]
    fn prompt_without_features_has_no_feature_section() {
        let cs = [concept("a"), concept("b"), concept("c")];
        let refs: Vec<&Concept> = cs.iter().collect();
        let p = build_eval_prompt("img", "a", &refs, None, 3).unwrap();
        assert!(!p.messages[0].content.contains("Distinguishing"));
        assert_eq!(p.options.len(), 3);
        assert_eq!(p, build_eval_prompt("img", "a", &refs, None, 3).unwrap());
    }

    #[test]
    fn one_block_per_option_with_features() {
        let cs = [concept("a"), concept("b"), concept("c"), concept("d")];
        let refs: Vec<&Concept> = cs.iter().collect();
        let feats = selected_by_concept(&[
            selected("a", "red crest", 0.7),
            selected("a", "long tail", 0.9),
            selected("c", "blue wing", 0.6),
        ]);
        let p = build_eval_prompt("img", "a", &refs, Some(&feats), 3).unwrap();
        let text = &p.messages[0].content;
        assert_eq!(text.matches("Name a:\n").count() + text.matches("Name c:\n").count(), 2);
        assert!(!text.contains("Name b:\n") && !text.contains("Name d:\n"));
        assert!(text.find("long tail").unwrap() < text.find("red crest").unwrap());
    }

    #[test]
    fn gold_must_be_an_option() {
        let cs = [concept("a")];
        let refs: Vec<&Concept> = cs.iter().collect();
        assert!(matches!(build_eval_prompt("i", "z", &refs, None, 0), Err(EvalError::GoldNotInOptions(_))));
    }

    #[test]
    fn accuracy_withheld_when_incomplete() {
        let cfg = ExperimentConfig::from_ratio("5:0", false, 0).unwrap();
        let probe = |correct, error: Option<&str>| EvalProbe {
            concept: "a".into(),
            image: "i".into(),
            options: vec![],
            predicted: String::new(),
            correct,
            reply: String::new(),
            error: error.map(str::to_string),
        };
        let r = EvalResult::from_probes(cfg.clone(), &[probe(true, None), probe(false, None)]);
        assert_eq!(r.accuracy, Some(0.5));
        let r = EvalResult::from_probes(cfg, &[probe(true, None), probe(false, Some("timeout"))]);
        assert!(r.incomplete);
        assert_eq!(r.accuracy, None);
    }
}
