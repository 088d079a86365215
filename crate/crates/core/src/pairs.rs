//! Confusable-pair discovery.
//!
//! The vision model answers multiple-choice questions over random subsets
//! of concepts, using validation images. A pair of concepts is flagged when
//! the misclassification rate in either direction is strictly above the
//! threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::choice;
use crate::dataset::{CorpusManifest, DatasetError, VAL};
use crate::gateway::{purpose, DecodeParams, Gateway, GatewayError, Message};
use crate::rng::SplitMix64;
use crate::templates::{self, RenderError};

/// Sentinel prediction for replies that name no option.
pub const UNPARSED: &str = "unparsed";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub image: String,
    pub gold: String,
    /// Concept ids in presentation order.
    pub options: Vec<String>,
    /// A concept id from `options`, or [`UNPARSED`].
    pub predicted: String,
    #[serde(default)]
    pub reply: String,
    #[serde(default)]
    pub round: usize,
}

impl ProbeResult {
    pub fn is_parsed(&self) -> bool {
        self.predicted != UNPARSED
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusablePair {
    pub target: String,
    pub misidentified: String,
    pub rate_t_to_m: f64,
    pub rate_m_to_t: f64,
    /// Probes whose gold concept is either member, unparsed ones included.
    pub probe_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscoveryParams {
    pub subset_size: usize,
    pub threshold: f64,
    pub images_per_concept: usize,
    pub rounds: usize,
    #[serde(default)]
    pub decode: DecodeParams,
}

impl Default for DiscoveryParams {
    fn default() -> Self {
        Self { subset_size: 15, threshold: 0.2, images_per_concept: 5, rounds: 1, decode: DecodeParams::default() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PairError {
    #[error("a probe subset needs at least 2 concepts, got {0}")]
    TooFewConcepts(usize),
    #[error("probe subset of {got} concepts exceeds the subset size {max}")]
    SubsetTooLarge { got: usize, max: usize },
    #[error("concept `{concept}` has {have} validation images, {need} needed for probing")]
    TooFewProbeImages { concept: String, have: usize, need: usize },
    #[error("invalid discovery parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Template(#[from] RenderError),
}

struct Job<'a> {
    gold: &'a str,
    image: String,
    bytes: Vec<u8>,
    options: Vec<String>,
}

/// Probes every `(concept, image)` of one subset with a multiple-choice
/// question over all subset concepts. Probe images are the first
/// `images_per_concept` of each concept's validation split. Option order is
/// a seeded shuffle per image.
pub fn probe_subset(
    gateway: &Gateway,
    manifest: &CorpusManifest,
    root: &Path,
    concepts: &[String],
    params: &DiscoveryParams,
    seed: u64,
    round: usize,
) -> Result<Vec<ProbeResult>, PairError> {
    let mut ids: Vec<String> = concepts.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(PairError::TooFewConcepts(ids.len()));
    }
    if ids.len() > params.subset_size {
        return Err(PairError::SubsetTooLarge { got: ids.len(), max: params.subset_size });
    }
    let mut names = BTreeMap::new();
    let mut jobs = Vec::new();
    for id in &ids {
        names.insert(id.as_str(), manifest.require_concept(id)?.canonical_name.as_str());
    }
    for id in &ids {
        let val = manifest.split_assets(id, VAL)?;
        if val.len() < params.images_per_concept {
            return Err(PairError::TooFewProbeImages {
                concept: id.clone(),
                have: val.len(),
                need: params.images_per_concept,
            });
        }
        for asset in &val[..params.images_per_concept] {
            let mut options = ids.clone();
            SplitMix64::for_label(seed, &format!("probe-options:{round}:{id}:{}", asset.id)).shuffle(&mut options);
            jobs.push(Job { gold: id, image: asset.id.clone(), bytes: asset.read_bytes(root)?, options });
        }
    }

    let mut results = jobs
        .into_par_iter()
        .map(|job| {
            let option_names: Vec<&str> = job.options.iter().map(|o| names[o.as_str()]).collect();
            let prompt = templates::PROBE.render(&[("options", &choice::render_options(&option_names))])?;
            let reply = gateway.vision_chat(purpose::PROBE, &job.bytes, vec![Message::user(prompt)], &params.decode)?;
            let predicted = match choice::parse_choice(&reply, &option_names) {
                Some(i) => job.options[i].clone(),
                None => UNPARSED.to_string(),
            };
            Ok(ProbeResult { image: job.image, gold: job.gold.to_string(), options: job.options, predicted, reply, round })
        })
        .collect::<Result<Vec<_>, PairError>>()?;
    results.sort_by(|a, b| (&a.gold, &a.image).cmp(&(&b.gold, &b.image)));
    Ok(results)
}

/// Confusion counts: `(gold, predicted) -> n` over parsed probes, plus
/// parsed and total probe counts per gold concept.
#[derive(Debug, Default)]
struct Confusion<'a> {
    counts: BTreeMap<(&'a str, &'a str), usize>,
    parsed: BTreeMap<&'a str, usize>,
    total: BTreeMap<&'a str, usize>,
}

impl<'a> Confusion<'a> {
    fn from_results(results: &'a [ProbeResult]) -> Self {
        let mut c = Confusion::default();
        for r in results {
            *c.total.entry(&r.gold).or_default() += 1;
            if r.is_parsed() {
                *c.parsed.entry(&r.gold).or_default() += 1;
                *c.counts.entry((&r.gold, &r.predicted)).or_default() += 1;
            }
        }
        c
    }

    fn rate(&self, from: &str, to: &str) -> f64 {
        let parsed = self.parsed.get(from).copied().unwrap_or(0);
        if parsed == 0 {
            return 0.0;
        }
        self.counts.get(&(from, to)).copied().unwrap_or(0) as f64 / parsed as f64
    }
}

/// Flags concept pairs whose misclassification rate in either direction is
/// strictly above `threshold`. Each unordered pair appears once; the target
/// is the member with the higher outgoing rate, ties going to the smaller id.
/// Output is sorted by `(target, misidentified)`.
pub fn flag_pairs(results: &[ProbeResult], threshold: f64) -> Vec<ConfusablePair> {
    let confusion = Confusion::from_results(results);
    let candidates: BTreeSet<(&str, &str)> = confusion
        .counts
        .keys()
        .filter(|(g, p)| g != p)
        .map(|&(g, p)| if g < p { (g, p) } else { (p, g) })
        .collect();
    let mut out = Vec::new();
    for (a, b) in candidates {
        let ab = confusion.rate(a, b);
        let ba = confusion.rate(b, a);
        if ab.max(ba) <= threshold {
            continue;
        }
        let probe_count = confusion.total.get(a).copied().unwrap_or(0) + confusion.total.get(b).copied().unwrap_or(0);
        let (target, misidentified, t_m, m_t) = if ab >= ba { (a, b, ab, ba) } else { (b, a, ba, ab) };
        out.push(ConfusablePair {
            target: target.to_string(),
            misidentified: misidentified.to_string(),
            rate_t_to_m: t_m,
            rate_m_to_t: m_t,
            probe_count,
        });
    }
    out.sort_by(|x, y| (&x.target, &x.misidentified).cmp(&(&y.target, &y.misidentified)));
    out
}

/// Splits `n` items into the fewest chunks of at most `max`, with sizes
/// differing by at most one.
pub fn balanced_chunks(n: usize, max: usize) -> Vec<usize> {
    if n == 0 || max == 0 {
        return Vec::new();
    }
    let k = n.div_ceil(max);
    (0..k).map(|i| n / k + usize::from(i < n % k)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Discovery {
    pub probes: Vec<ProbeResult>,
    pub pairs: Vec<ConfusablePair>,
}

/// Runs `params.rounds` rounds. Each round shuffles the concepts, partitions
/// them into balanced subsets of at most `subset_size`, probes every subset
/// and flags pairs within the round. A pair found in several rounds keeps
/// its earliest measurement.
pub fn discover(
    gateway: &Gateway,
    manifest: &CorpusManifest,
    root: &Path,
    concepts: &[String],
    params: &DiscoveryParams,
    seed: u64,
) -> Result<Discovery, PairError> {
    if params.subset_size < 2 {
        return Err(PairError::InvalidParams("subset size must be at least 2".into()));
    }
    if !(0.0..=1.0).contains(&params.threshold) {
        return Err(PairError::InvalidParams(format!("threshold {} outside [0, 1]", params.threshold)));
    }
    let mut ids = concepts.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() < 2 {
        return Err(PairError::TooFewConcepts(ids.len()));
    }
    let mut probes = Vec::new();
    let mut pairs: BTreeMap<(String, String), ConfusablePair> = BTreeMap::new();
    for round in 0..params.rounds {
        let mut order = ids.clone();
        SplitMix64::for_label(seed, &format!("round:{round}")).shuffle(&mut order);
        let mut round_probes = Vec::new();
        let mut start = 0;
        for size in balanced_chunks(order.len(), params.subset_size) {
            let subset = &order[start..start + size];
            start += size;
            round_probes.extend(probe_subset(gateway, manifest, root, subset, params, seed, round)?);
        }
        for pair in flag_pairs(&round_probes, params.threshold) {
            let key = if pair.target < pair.misidentified {
                (pair.target.clone(), pair.misidentified.clone())
            } else {
                (pair.misidentified.clone(), pair.target.clone())
            };
            pairs.entry(key).or_insert(pair);
        }
        round_probes.sort_by(|a, b| (&a.gold, &a.image).cmp(&(&b.gold, &b.image)));
        probes.extend(round_probes);
    }
    let mut pairs: Vec<ConfusablePair> = pairs.into_values().collect();
    pairs.sort_by(|x, y| (&x.target, &x.misidentified).cmp(&(&y.target, &y.misidentified)));
    Ok(Discovery { probes, pairs })
}
