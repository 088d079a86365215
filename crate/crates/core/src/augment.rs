//! Feature-conditioned image generation and verification.
//!
//! Each selected feature set yields one prompt. Generated images are
//! checked feature by feature by the vision model; the satisfaction rate
//! `S` is the fraction of features it recognizes, and only images with
//! `S = 1` are kept.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Concept, ImageAsset, Provenance, SYNTHETIC_DIR};
use crate::features::Feature;
use crate::filter::{FilterError, GenerabilitySupplier, ImageData, Similarity};
use crate::gateway::{http::sniff_mime, purpose, DecodeParams, Gateway, GatewayError, Message, Rejection};
use crate::pairs::ConfusablePair;
use crate::records::{self, sha256_hex, RecordError};
use crate::rng::{derive_seed, SplitMix64};
use crate::templates::{self, RenderError};

/// Most features a single generation prompt may carry.
pub const MAX_PROMPT_FEATURES: usize = 5;

#[derive(Debug, thiserror::Error)]
pub enum AugmentError {
    #[error("a generation prompt needs 1 to {MAX_PROMPT_FEATURES} features, got {0}")]
    FeatureCount(usize),
    #[error("n must be at least 1")]
    ZeroImages,
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error(transparent)]
    Template(#[from] RenderError),
    #[error(transparent)]
    Filter(#[from] FilterError),
}

/// Instantiates the generation template with the concept name and one
/// `- feature` line per feature.
pub fn build_prompt(concept_name: &str, features: &[&str]) -> Result<String, AugmentError> {
    if features.is_empty() || features.len() > MAX_PROMPT_FEATURES {
        return Err(AugmentError::FeatureCount(features.len()));
    }
    let listing = features.iter().map(|f| format!("- {f}")).collect::<Vec<_>>().join("\n");
    Ok(templates::GENERATE.render(&[("target", concept_name), ("features", &listing)])?)
}

fn extension(bytes: &[u8]) -> &'static str {
    match sniff_mime(bytes) {
        "image/png" => "png",
        "image/jpeg" => "jpg",
        "image/webp" => "webp",
        "image/gif" => "gif",
        _ => "img",
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub assets: Vec<ImageAsset>,
    pub rejections: Vec<Rejection>,
    /// Images dropped because their bytes repeated an earlier one.
    pub duplicates: usize,
    /// `n` minus the number of distinct assets.
    pub shortfall: usize,
}

/// Generates `n` images and writes them to `<root>/_synthetic/<concept>/`.
pub fn generate_candidates(
    gateway: &Gateway,
    root: &Path,
    concept: &str,
    prompt: &str,
    feature_ids: &[String],
    n: usize,
    seed: u64,
) -> Result<Generated, AugmentError> {
    if n == 0 {
        return Err(AugmentError::ZeroImages);
    }
    let out = gateway.generate_image(prompt, n, seed)?;
    let mut seen = BTreeSet::new();
    let mut assets = Vec::new();
    let mut duplicates = 0;
    for bytes in out.images {
        let id = sha256_hex(&bytes);
        if !seen.insert(id.clone()) {
            duplicates += 1;
            continue;
        }
        let rel = format!("{SYNTHETIC_DIR}/{concept}/{id}.{}", extension(&bytes));
        let path = root.join(&rel);
        if fs::read(&path).map(|existing| existing != bytes).unwrap_or(true) {
            records::write_atomic(&path, &bytes)?;
        }
        assets.push(ImageAsset {
            id,
            concept: concept.to_string(),
            path: rel,
            provenance: Provenance::Synthetic,
            source_features: feature_ids.to_vec(),
            satisfaction: None,
            extra: Default::default(),
        });
    }
    if duplicates > 0 {
        tracing::warn!(concept, duplicates, "generator returned duplicate images");
    }
    let shortfall = n - assets.len();
    Ok(Generated { assets, rejections: out.rejections, duplicates, shortfall })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum VerifyMode {
    /// Strict yes/no reading of the reply.
    #[default]
    Boolean,
    /// Yes with a stated confidence of at least `threshold`.
    Confidence { threshold: f64 },
}

/// Leading yes/no of a reply, ignoring case, quotes and markdown emphasis.
pub fn parse_yes_no(reply: &str) -> Option<bool> {
    let s = reply.trim_start_matches(|c: char| c.is_whitespace() || matches!(c, '*' | '"' | '\'' | '`'));
    let word: String = s.chars().take_while(char::is_ascii_alphabetic).collect::<String>().to_ascii_lowercase();
    match word.as_str() {
        "yes" => Some(true),
        "no" => Some(false),
        _ => None,
    }
}

/// Number following the word `confidence`, if any.
pub fn parse_confidence(reply: &str) -> Option<f64> {
    let lower = reply.to_ascii_lowercase();
    let at = lower.find("confidence")? + "confidence".len();
    let rest = lower[at..].trim_start_matches(|c: char| c == ':' || c == '=' || c.is_whitespace());
    let num: String = rest.chars().take_while(|c| c.is_ascii_digit() || *c == '.').collect();
    num.trim_end_matches('.').parse().ok().filter(|v: &f64| (0.0..=1.0).contains(v))
}

/// Whether the verifier recognized a feature. Unreadable replies count as no.
pub fn judge(reply: &str, mode: VerifyMode) -> bool {
    match (parse_yes_no(reply), mode) {
        (Some(true), VerifyMode::Boolean) => true,
        (Some(true), VerifyMode::Confidence { threshold }) => parse_confidence(reply).is_some_and(|c| c >= threshold),
        _ => false,
    }
}

/// `S = (#features recognized) / |F|`, one vision call per feature.
pub fn satisfaction(
    gateway: &Gateway,
    image: &[u8],
    features: &[&str],
    mode: VerifyMode,
    decode: &DecodeParams,
) -> Result<f64, AugmentError> {
    if features.is_empty() {
        return Err(AugmentError::FeatureCount(0));
    }
    let template = match mode {
        VerifyMode::Boolean => templates::VERIFY,
        VerifyMode::Confidence { .. } => templates::VERIFY_CONFIDENCE,
    };
    let mut yes = 0usize;
    for f in features {
        let prompt = template.render(&[("feature", f)])?;
        let reply = gateway.vision_chat(purpose::VERIFY, image, vec![Message::user(prompt)], decode)?;
        yes += usize::from(judge(&reply, mode));
    }
    Ok(yes as f64 / features.len() as f64)
}

/// Ids of candidates with `S = 1`, sorted.
pub fn filter_images(candidates: &[ImageAsset]) -> Vec<String> {
    let mut kept: Vec<String> =
        candidates.iter().filter(|a| a.satisfaction == Some(1.0)).map(|a| a.id.clone()).collect();
    kept.sort();
    kept
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankingMode {
    /// Mean similarity to the selected features, descending; ties by id.
    #[default]
    MeanSimilarity,
    /// Ids sorted, then shuffled with the batch seed.
    Seeded,
}

/// Orders kept images, best first.
pub fn rank_kept(
    kept: &[ImageData],
    features: &[&str],
    mode: RankingMode,
    seed: u64,
    sim: &dyn Similarity,
) -> Result<Vec<String>, AugmentError> {
    let mut ids: Vec<&ImageData> = kept.iter().collect();
    ids.sort_by(|a, b| a.id.cmp(&b.id));
    match mode {
        RankingMode::Seeded => {
            let mut out: Vec<String> = ids.iter().map(|i| i.id.clone()).collect();
            SplitMix64::for_label(seed, "ranking").shuffle(&mut out);
            Ok(out)
        }
        RankingMode::MeanSimilarity => {
            let mut scored = ids
                .par_iter()
                .map(|img| {
                    let mut sum = 0.0;
                    for f in features {
                        sum += sim.similarity(f, img)?;
                    }
                    Ok((sum / features.len().max(1) as f64, img.id.clone()))
                })
                .collect::<Result<Vec<_>, FilterError>>()?;
            scored.sort_by(|a, b| b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1)));
            Ok(scored.into_iter().map(|(_, id)| id).collect())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub n: usize,
    pub verify: VerifyMode,
    pub ranking: RankingMode,
    #[serde(default)]
    pub decode: DecodeParams,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self { n: 50, verify: VerifyMode::Boolean, ranking: RankingMode::MeanSimilarity, decode: DecodeParams::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationBatch {
    pub pair: ConfusablePair,
    /// Selected feature ids, in rank order.
    pub features: Vec<String>,
    pub prompt: String,
    pub prompt_template_hash: String,
    pub seed: u64,
    /// Every generated asset with its satisfaction rate. Images whose
    /// verification failed have none and are listed in `unverified`.
    pub candidates: Vec<ImageAsset>,
    /// Ids with `S = 1`, sorted.
    pub kept: Vec<String>,
    /// Kept ids, best first.
    pub ranking: Vec<String>,
    pub ranking_mode: RankingMode,
    #[serde(default)]
    pub rejections: Vec<Rejection>,
    #[serde(default)]
    pub duplicates: usize,
    #[serde(default)]
    pub unverified: Vec<String>,
}

impl AugmentationBatch {
    /// Asset of a kept or candidate id.
    pub fn candidate(&self, id: &str) -> Option<&ImageAsset> {
        self.candidates.iter().find(|a| a.id == id)
    }
}

/// Generates, verifies and ranks synthetic images for one pair.
#[allow(clippy::too_many_arguments)]
pub fn augment_pair(
    gateway: &Gateway,
    root: &Path,
    target: &Concept,
    pair: &ConfusablePair,
    selected: &[&Feature],
    params: &AugmentParams,
    seed: u64,
    sim: &dyn Similarity,
) -> Result<AugmentationBatch, AugmentError> {
    let texts: Vec<&str> = selected.iter().map(|f| f.text.as_str()).collect();
    let ids: Vec<String> = selected.iter().map(|f| f.id.clone()).collect();
    let prompt = build_prompt(&target.canonical_name, &texts)?;
    let batch_seed = derive_seed(seed, &format!("augment:{}:{}", pair.target, pair.misidentified));
    let generated = generate_candidates(gateway, root, &target.id, &prompt, &ids, params.n, batch_seed)?;

    let verified: Vec<(ImageAsset, Result<f64, String>, Option<ImageData>)> = generated
        .assets
        .into_par_iter()
        .map(|mut asset| {
            let bytes = match fs::read(asset.full_path(root)) {
                Ok(b) => b,
                Err(e) => return (asset, Err(e.to_string()), None),
            };
            match satisfaction(gateway, &bytes, &texts, params.verify, &params.decode) {
                Ok(s) => {
                    asset.satisfaction = Some(s);
                    (asset, Ok(s), Some(ImageData::new(bytes)))
                }
                Err(e) => (asset, Err(e.to_string()), None),
            }
        })
        .collect();

    let mut candidates = Vec::new();
    let mut unverified = Vec::new();
    let mut kept_data = Vec::new();
    for (asset, outcome, data) in verified {
        match outcome {
            Ok(1.0) => kept_data.extend(data),
            Ok(_) => {}
            Err(e) => {
                tracing::warn!(image = %asset.id, error = %e, "verification failed");
                unverified.push(asset.id.clone());
            }
        }
        candidates.push(asset);
    }
    let kept = filter_images(&candidates);
    if kept.is_empty() {
        tracing::warn!(target = %pair.target, "no generated image satisfied every feature");
    }
    let ranking = rank_kept(&kept_data, &texts, params.ranking, batch_seed, sim)?;
    Ok(AugmentationBatch {
        pair: pair.clone(),
        features: ids,
        prompt,
        prompt_template_hash: templates::GENERATE.hash(),
        seed: batch_seed,
        candidates,
        kept,
        ranking,
        ranking_mode: params.ranking,
        rejections: generated.rejections,
        duplicates: generated.duplicates,
        unverified,
    })
}

/// Generates images for generability scoring from a one-feature prompt.
/// Nothing is written to disk.
pub struct GatewayGenerability<'a> {
    pub gateway: &'a Gateway,
    pub concept_name: String,
    pub seed: u64,
}

impl GenerabilitySupplier for GatewayGenerability<'_> {
    fn synthetic(&self, feature: &Feature, n: usize) -> Result<Option<Vec<ImageData>>, FilterError> {
        let prompt =
            build_prompt(&self.concept_name, &[&feature.text]).map_err(|e| FilterError::Supplier(e.to_string()))?;
        let seed = derive_seed(self.seed, &format!("generability:{}", feature.id));
        match self.gateway.generate_image(&prompt, n, seed) {
            Ok(out) => Ok(Some(out.images.into_iter().map(ImageData::new).collect())),
            Err(GatewayError::NoImages { .. }) => Ok(None),
            Err(e) => Err(e.into()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prompt_names_concept_and_features() {
        let p = build_prompt("Lear's Macaw", &["blue plumage", "yellow eye-ring"]).unwrap();
        assert!(p.contains("Lear's Macaw") && p.contains("blue plumage") && p.contains("yellow eye-ring"));
        assert_eq!(p, build_prompt("Lear's Macaw", &["blue plumage", "yellow eye-ring"]).unwrap());
        assert!(matches!(build_prompt("x", &[]), Err(AugmentError::FeatureCount(0))));
        assert!(matches!(build_prompt("x", &["a", "b", "c", "d", "e", "f"]), Err(AugmentError::FeatureCount(6))));
    }

    #[test]
    fn yes_no_parsing() {
        assert_eq!(parse_yes_no("Yes."), Some(true));
        assert_eq!(parse_yes_no("  **no**, it is not"), Some(false));
        assert_eq!(parse_yes_no("YES"), Some(true));
        assert_eq!(parse_yes_no("Yesterday"), None);
        assert_eq!(parse_yes_no("Maybe"), None);
        assert!(!judge("I can't tell", VerifyMode::Boolean));
    }

    #[test]
    fn confidence_mode() {
        let m = VerifyMode::Confidence { threshold: 0.85 };
        assert!(judge("Yes. Confidence: 0.9", m));
        assert!(judge("Yes. Confidence: 0.85", m));
        assert!(!judge("Yes. Confidence: 0.84", m));
        assert!(!judge("Yes.", m));
        assert!(!judge("No. Confidence: 0.99", m));
    }

    fn asset(id: &str, s: f64) -> ImageAsset {
        let mut a = ImageAsset::real(id.into(), "c".into(), id.into());
        a.provenance = Provenance::Synthetic;
        a.satisfaction = Some(s);
        a
    }

    #[test]
    fn keeps_only_full_satisfaction() {
        let c = vec![asset("b", 1.0), asset("a", 0.75), asset("c", 1.0)];
        assert_eq!(filter_images(&c), vec!["b", "c"]);
        assert!(filter_images(&[asset("a", 0.5)]).is_empty());
    }
}
