//! Candidate feature extraction.
//!
//! Textual features come from the chat model's knowledge of a concept;
//! visual features from the vision model looking at real images, merged by
//! one extra chat call when several images are used. Either kind can be
//! contrastive: the prompt then asks for traits the target has and the
//! misidentified concept lacks.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Concept, DatasetError, ImageAsset, Provenance};
use crate::gateway::{purpose, DecodeParams, Gateway, GatewayError, Message};
use crate::pairs::ProbeResult;
use crate::templates::{self, RenderError, Template};
use crate::text;

/// Longest accepted feature text, in characters after normalization.
pub const MAX_FEATURE_CHARS: usize = 200;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Textual,
    Visual,
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Textual => "textual",
            FeatureKind::Visual => "visual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureStatus {
    Candidate,
    PassedD,
    Selected,
    Rejected,
}

impl FeatureStatus {
    /// Statuses only move forward: candidate → passed_d → selected, or to
    /// rejected from anywhere except selected.
    pub fn can_become(self, next: FeatureStatus) -> bool {
        use FeatureStatus::*;
        matches!(
            (self, next),
            (Candidate, PassedD) | (PassedD, Selected) | (Candidate | PassedD, Rejected)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: String,
    pub text: String,
    pub kind: FeatureKind,
    pub contrastive: bool,
    pub target: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub against: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub d_score: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub g_score: Option<f64>,
    pub status: FeatureStatus,
}

#[derive(Debug, thiserror::Error)]
pub enum FeatureError {
    #[error("feature text is empty after normalization")]
    EmptyText,
    #[error("feature text has {0} characters, limit is {MAX_FEATURE_CHARS}")]
    TooLong(usize),
    #[error("contrastive feature of `{0}` must name a different concept")]
    BadAgainst(String),
    #[error("feature {id}: status cannot move from {from:?} to {to:?}")]
    Transition { id: String, from: FeatureStatus, to: FeatureStatus },
    #[error("image {image} is not a real image of `{concept}`")]
    ForeignImage { image: String, concept: String },
    #[error("visual extraction for `{0}` needs at least one image")]
    NoImages(String),
    #[error("all {count} visual extraction calls for `{concept}` failed; first error: {first}")]
    AllFailed { concept: String, count: usize, first: String },
    #[error("no confusable concept for `{0}`: every probe was answered correctly")]
    NoConfusable(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Template(#[from] RenderError),
}

impl Feature {
    /// A candidate feature. `text` is normalized; the id is its hash.
    pub fn new(text: &str, kind: FeatureKind, target: &str, against: Option<&str>) -> Result<Self, FeatureError> {
        let text = text::normalize(text);
        if text.is_empty() {
            return Err(FeatureError::EmptyText);
        }
        let chars = text.chars().count();
        if chars > MAX_FEATURE_CHARS {
            return Err(FeatureError::TooLong(chars));
        }
        if against.is_some_and(|a| a == target) {
            return Err(FeatureError::BadAgainst(target.to_string()));
        }
        Ok(Self {
            id: text::feature_id(&text),
            text,
            kind,
            contrastive: against.is_some(),
            target: target.to_string(),
            against: against.map(str::to_string),
            d_score: None,
            g_score: None,
            status: FeatureStatus::Candidate,
        })
    }

    pub fn advance(&mut self, next: FeatureStatus) -> Result<(), FeatureError> {
        if !self.status.can_become(next) {
            return Err(FeatureError::Transition { id: self.id.clone(), from: self.status, to: next });
        }
        self.status = next;
        Ok(())
    }
}

/// Items of a model-written list.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParsedList {
    /// Normalized, de-duplicated, in reply order.
    pub items: Vec<String>,
    /// Lines dropped for exceeding [`MAX_FEATURE_CHARS`].
    pub too_long: usize,
}

fn strip_marker(line: &str) -> Option<&str> {
    let t = line.trim();
    for m in ['-', '*', '•'] {
        if let Some(rest) = t.strip_prefix(m) {
            if rest.starts_with(char::is_whitespace) {
                return Some(rest.trim());
            }
        }
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            if r.is_empty() || r.starts_with(char::is_whitespace) {
                return Some(r.trim());
            }
        }
    }
    None
}

/// Parses numbered (`1.`, `1)`), dashed, starred or bulleted lines. When the
/// reply contains a line consisting of `Features:`, only text after the last
/// such line is read, so reasoning before it is ignored.
pub fn parse_feature_list(reply: &str) -> ParsedList {
    let lines: Vec<&str> = reply.lines().collect();
    let start = lines
        .iter()
        .rposition(|l| l.trim().trim_matches('*').trim().eq_ignore_ascii_case("features:"))
        .map(|i| i + 1)
        .unwrap_or(0);
    let mut out = ParsedList::default();
    let mut seen = BTreeSet::new();
    for line in &lines[start..] {
        let Some(item) = strip_marker(line) else { continue };
        let norm = text::normalize(item.trim_matches('*'));
        if norm.is_empty() {
            continue;
        }
        if norm.chars().count() > MAX_FEATURE_CHARS {
            out.too_long += 1;
            continue;
        }
        if seen.insert(norm.clone()) {
            out.items.push(norm);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExtractConfig {
    /// Upper bound on features requested per extraction call.
    pub max_features: usize,
    #[serde(default)]
    pub decode: DecodeParams,
}

impl Default for ExtractConfig {
    fn default() -> Self {
        Self { max_features: 10, decode: DecodeParams::default() }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Extraction {
    pub features: Vec<Feature>,
    pub warnings: Vec<String>,
    /// Per-image failures of visual extraction: `(image id, error)`.
    pub failures: Vec<(String, String)>,
}

fn pick(plain: Template, contrastive: Template, against: Option<&Concept>) -> Template {
    if against.is_some() {
        contrastive
    } else {
        plain
    }
}

fn render_extraction(
    template: Template,
    target: &Concept,
    against: Option<&Concept>,
    cfg: &ExtractConfig,
) -> Result<String, RenderError> {
    let max = cfg.max_features.to_string();
    let against_name = against.map(|a| a.canonical_name.as_str()).unwrap_or("");
    template.render(&[("target", &target.canonical_name), ("against", against_name), ("max_features", &max)])
}

fn to_features(
    list: ParsedList,
    kind: FeatureKind,
    target: &Concept,
    against: Option<&Concept>,
    what: &str,
    warnings: &mut Vec<String>,
) -> Vec<Feature> {
    if list.too_long > 0 {
        warnings.push(format!("{what}: dropped {} lines over {MAX_FEATURE_CHARS} characters", list.too_long));
    }
    if list.items.is_empty() {
        warnings.push(format!("{what}: reply contained no feature list"));
    }
    list.items
        .iter()
        .filter_map(|t| Feature::new(t, kind, &target.id, against.map(|a| a.id.as_str())).ok())
        .collect()
}

/// Asks the chat model for visual-appearance features of `target`.
pub fn extract_textual(
    gateway: &Gateway,
    target: &Concept,
    against: Option<&Concept>,
    cfg: &ExtractConfig,
) -> Result<Extraction, FeatureError> {
    check_against(target, against)?;
    let template = pick(templates::TEXTUAL, templates::TEXTUAL_CONTRASTIVE, against);
    let prompt = render_extraction(template, target, against, cfg)?;
    let reply = gateway.chat(purpose::EXTRACT_TEXTUAL, vec![Message::user(prompt)], &cfg.decode)?;
    let mut out = Extraction::default();
    let what = format!("textual features of `{}`", target.id);
    out.features = to_features(parse_feature_list(&reply), FeatureKind::Textual, target, against, &what, &mut out.warnings);
    Ok(out)
}

fn check_against(target: &Concept, against: Option<&Concept>) -> Result<(), FeatureError> {
    match against {
        Some(a) if a.id == target.id => Err(FeatureError::BadAgainst(target.id.clone())),
        _ => Ok(()),
    }
}

/// One vision call per image, then (for more than one image) one chat call
/// that merges and de-duplicates the union.
pub fn extract_visual(
    gateway: &Gateway,
    root: &Path,
    target: &Concept,
    images: &[&ImageAsset],
    against: Option<&Concept>,
    cfg: &ExtractConfig,
) -> Result<Extraction, FeatureError> {
    check_against(target, against)?;
    if images.is_empty() {
        return Err(FeatureError::NoImages(target.id.clone()));
    }
    for img in images {
        if img.provenance != Provenance::Real || img.concept != target.id {
            return Err(FeatureError::ForeignImage { image: img.id.clone(), concept: target.id.clone() });
        }
    }
    let template = pick(templates::VISUAL, templates::VISUAL_CONTRASTIVE, against);
    let prompt = render_extraction(template, target, against, cfg)?;
    let replies: Vec<Result<String, FeatureError>> = images
        .par_iter()
        .map(|img| {
            let bytes = img.read_bytes(root)?;
            Ok(gateway.vision_chat(purpose::EXTRACT_VISUAL, &bytes, vec![Message::user(prompt.clone())], &cfg.decode)?)
        })
        .collect();

    let mut out = Extraction::default();
    let mut union = Vec::new();
    let mut seen = BTreeSet::new();
    for (img, reply) in images.iter().zip(replies) {
        match reply {
            Ok(reply) => {
                let list = parse_feature_list(&reply);
                if list.items.is_empty() {
                    out.warnings.push(format!("visual features of `{}` from {}: empty list", target.id, img.id));
                }
                for item in list.items {
                    if seen.insert(item.clone()) {
                        union.push(item);
                    }
                }
            }
            Err(e) => out.failures.push((img.id.clone(), e.to_string())),
        }
    }
    if out.failures.len() == images.len() {
        return Err(FeatureError::AllFailed {
            concept: target.id.clone(),
            count: images.len(),
            first: out.failures[0].1.clone(),
        });
    }
    for (image, error) in &out.failures {
        tracing::warn!(concept = %target.id, %image, %error, "visual extraction failed for one image");
    }

    let what = format!("visual features of `{}`", target.id);
    let list = if images.len() > 1 {
        let listing = union.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n");
        let merge_prompt =
            templates::MERGE.render(&[("target", &target.canonical_name), ("features", &listing)])?;
        let reply = gateway.chat(purpose::MERGE_FEATURES, vec![Message::user(merge_prompt)], &cfg.decode)?;
        parse_feature_list(&reply)
    } else {
        ParsedList { items: union, too_long: 0 }
    };
    out.features = to_features(list, FeatureKind::Visual, target, against, &what, &mut out.warnings);
    Ok(out)
}

/// The candidate most often predicted for `target`'s probe images; ties go
/// to the smaller id.
pub fn acquire_misidentified(target: &str, candidates: &[String], probes: &[ProbeResult]) -> Result<String, FeatureError> {
    let allowed: BTreeSet<&str> = candidates.iter().map(String::as_str).filter(|c| *c != target).collect();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for p in probes.iter().filter(|p| p.gold == target) {
        if allowed.contains(p.predicted.as_str()) {
            *counts.entry(&p.predicted).or_default() += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(a.0)))
        .map(|(c, _)| c.to_string())
        .ok_or_else(|| FeatureError::NoConfusable(target.to_string()))
}

/// Merges feature lists, keeping the first occurrence of each
/// `(id, target, against, kind)`.
pub fn dedup_features(features: impl IntoIterator<Item = Feature>) -> Vec<Feature> {
    let mut seen = BTreeSet::new();
    features
        .into_iter()
        .filter(|f| seen.insert((f.id.clone(), f.target.clone(), f.against.clone(), f.kind)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairs::UNPARSED;

    #[test]
    fn parses_numbered_reply() {
        let list = parse_feature_list("1. Red  Crest\n2. blue tail\n");
        assert_eq!(list.items, vec!["red crest", "blue tail"]);
    }

    #[test]
    fn reads_only_after_marker_and_dedups() {
        let reply = "1. Think about size.\n2. Then colour.\n\nFeatures:\n- red crest\n* Red crest\n• long tail\nnot a list line";
        assert_eq!(parse_feature_list(reply).items, vec!["red crest", "long tail"]);
    }

    #[test]
    fn prose_yields_nothing() {
        assert!(parse_feature_list("It is a bird with a red crest.").items.is_empty());
    }

    #[test]
    fn long_lines_are_dropped() {
        let reply = format!("- {}\n- ok", "x".repeat(201));
        let list = parse_feature_list(&reply);
        assert_eq!(list.items, vec!["ok"]);
        assert_eq!(list.too_long, 1);
    }

    #[test]
    fn status_moves_forward_only() {
        let mut f = Feature::new("red crest", FeatureKind::Textual, "a", Some("b")).unwrap();
        assert!(f.contrastive);
        f.advance(FeatureStatus::PassedD).unwrap();
        assert!(f.advance(FeatureStatus::Candidate).is_err());
        f.advance(FeatureStatus::Selected).unwrap();
        assert!(f.advance(FeatureStatus::Rejected).is_err());
    }

    #[test]
    fn contrastive_needs_other_concept() {
        assert!(matches!(
            Feature::new("x", FeatureKind::Visual, "a", Some("a")),
            Err(FeatureError::BadAgainst(_))
        ));
    }

    #[test]
    fn feature_round_trips() {
        let f = Feature::new("Red crest", FeatureKind::Visual, "a", Some("b")).unwrap();
        let back: Feature = serde_json::from_str(&serde_json::to_string(&f).unwrap()).unwrap();
        assert_eq!(back, f);
    }

    fn probe(predicted: &str) -> ProbeResult {
        ProbeResult {
            image: String::new(),
            gold: "a".into(),
            options: vec![],
            predicted: predicted.into(),
            reply: String::new(),
            round: 0,
        }
    }

    #[test]
    fn misidentified_is_argmax_with_id_tiebreak() {
        let cands = vec!["b".to_string(), "c".to_string()];
        let p: Vec<_> = ["b", "b", "b", "c", "a", UNPARSED].iter().map(|x| probe(x)).collect();
        assert_eq!(acquire_misidentified("a", &cands, &p).unwrap(), "b");
        let tie: Vec<_> = ["c", "c", "b", "b"].iter().map(|x| probe(x)).collect();
        assert_eq!(acquire_misidentified("a", &cands, &tie).unwrap(), "b");
        let right: Vec<_> = ["a", "a"].iter().map(|x| probe(x)).collect();
        assert!(matches!(acquire_misidentified("a", &cands, &right), Err(FeatureError::NoConfusable(_))));
    }
}
