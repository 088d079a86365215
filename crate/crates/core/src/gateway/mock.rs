//! Deterministic mock backend serving all four roles.
//!
//! The mock is a pure function of `(request, mock seed, world)`. Concepts are
//! identified in strings by tags of the form `concept:<id>` (matched
//! case-insensitively). The embedding geometry is:
//!
//! * every concept id `c` has a fixed unit vector `v_c`;
//! * a text mentioning tag `c` embeds as `α·v_c + (1−α)·h(text)`, untagged text as `h(text)`;
//! * an image whose bytes carry tag `c` embeds as `v_c + γ·h(bytes)`;
//!
//! where `h` is a hash-seeded unit vector, `α = feature_weight` and
//! `γ = image_noise`. Raw vectors are returned unnormalized; the gateway
//! normalizes them.
//!
//! Generated images are [`StubImage`] records (`MOCKIMG1\n` followed by
//! JSON) holding the concept tag, the ids of the features the mock
//! "rendered", the prompt hash, the seed and the index. Verification
//! queries answer yes exactly for rendered features.
//!
//! Which behaviour a chat or vision request gets is chosen by its purpose
//! (see [`super::purpose`]); concept names in prompts are resolved through
//! the [`MockWorld`].

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};

use super::{purpose, Backend, BackendError, ImageOutcome, Message, Request, Response};
use crate::records::{self, sha256_hex, RecordError};
use crate::rng::SplitMix64;
use crate::text;

pub const STUB_MAGIC: &[u8] = b"MOCKIMG1\n";

const COLORS: &[&str] = &[
    "crimson", "cobalt", "ochre", "ivory", "slate grey", "emerald", "amber", "russet", "jet black", "pale blue",
    "golden", "olive", "rose", "chestnut", "silver", "teal",
];
const PARTS: &[&str] = &[
    "crest", "tail feathers", "eye-ring", "throat patch", "wing bars", "dorsal stripe", "snout", "ear tufts",
    "belly scales", "leg bands", "mantle", "cheek spots", "bill", "forehead", "flank markings", "rump",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockConcept {
    pub id: String,
    pub name: String,
    /// Novel concepts are unknown to the mock vision model.
    #[serde(default)]
    pub novel: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
}

fn default_dim() -> usize {
    128
}
fn default_feature_weight() -> f64 {
    0.9
}
fn default_image_noise() -> f64 {
    0.3
}
fn default_render_rate() -> f64 {
    0.95
}
fn default_features_per_reply() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MockWorld {
    pub concepts: Vec<MockConcept>,
    #[serde(default = "default_dim")]
    pub dim: usize,
    /// α: weight of the concept direction in a tagged text embedding.
    #[serde(default = "default_feature_weight")]
    pub feature_weight: f64,
    /// γ: weight of the per-image noise direction.
    #[serde(default = "default_image_noise")]
    pub image_noise: f64,
    /// Probability that a generated image renders each requested feature.
    #[serde(default = "default_render_rate")]
    pub render_rate: f64,
    /// Probability that the generator refuses one image.
    #[serde(default)]
    pub reject_rate: f64,
    #[serde(default = "default_features_per_reply")]
    pub features_per_reply: usize,
}

impl Default for MockWorld {
    fn default() -> Self {
        Self::new(Vec::new())
    }
}

impl MockWorld {
    pub fn new(concepts: Vec<MockConcept>) -> Self {
        Self {
            concepts,
            dim: default_dim(),
            feature_weight: default_feature_weight(),
            image_noise: default_image_noise(),
            render_rate: default_render_rate(),
            reject_rate: 0.0,
            features_per_reply: default_features_per_reply(),
        }
    }

    /// `n` concepts `species_00..`, every second one novel, supercategories rotating.
    pub fn species(n: usize) -> Self {
        const SUPER: [&str; 3] = ["Birds", "Mammals", "Reptiles"];
        let width = n.saturating_sub(1).to_string().len().max(2);
        let concepts = (0..n)
            .map(|i| MockConcept {
                id: format!("species_{i:0width$}"),
                name: format!("Species {i:0width$}"),
                novel: i % 2 == 0,
                supercategory: Some(SUPER[i % 3].to_string()),
            })
            .collect();
        Self::new(concepts)
    }

    pub fn concept(&self, id: &str) -> Option<&MockConcept> {
        self.concepts.iter().find(|c| c.id.eq_ignore_ascii_case(id))
    }

    fn by_name(&self, name: &str) -> Option<&MockConcept> {
        self.concepts.iter().find(|c| c.name == name)
    }

    /// Concepts whose names occur in `text`, ordered by first occurrence;
    /// at equal positions the longer name wins.
    pub fn mentions(&self, text: &str) -> Vec<&MockConcept> {
        let mut hits: Vec<(usize, std::cmp::Reverse<usize>, &MockConcept)> = self
            .concepts
            .iter()
            .filter(|c| !c.name.is_empty())
            .flat_map(|c| text.match_indices(c.name.as_str()).map(move |(p, _)| (p, std::cmp::Reverse(c.name.len()), c)))
            .collect();
        hits.sort_by_key(|h| (h.0, h.1));
        let mut covered_until = 0;
        let mut out = Vec::new();
        for (pos, std::cmp::Reverse(len), c) in hits {
            if pos < covered_until {
                continue;
            }
            covered_until = pos + len;
            if !out.iter().any(|o: &&MockConcept| o.id == c.id) {
                out.push(c);
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), RecordError> {
        records::write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self, RecordError> {
        records::read_json(path)
    }

    /// Writes `<root>/<id>/NNN.img` files whose bytes carry the concept tag,
    /// plus a `concept.json` with name and supercategory.
    pub fn write_corpus(&self, root: &Path, images_per_concept: usize) -> Result<(), RecordError> {
        for c in &self.concepts {
            let dir = root.join(&c.id);
            fs::create_dir_all(&dir).map_err(|e| RecordError::io(&dir, e))?;
            for i in 0..images_per_concept {
                let path = dir.join(format!("{i:03}.img"));
                let bytes = format!("MOCKREAL concept:{} photo {i}\n", c.id);
                fs::write(&path, bytes).map_err(|e| RecordError::io(&path, e))?;
            }
            let meta = serde_json::json!({ "canonical_name": c.name, "supercategory": c.supercategory });
            records::write_json(&dir.join("concept.json"), &meta)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StubImage {
    pub tag: String,
    pub features: Vec<String>,
    pub prompt: String,
    pub seed: u64,
    pub index: usize,
}

impl StubImage {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = STUB_MAGIC.to_vec();
        out.extend(serde_json::to_vec(self).expect("stub serializes"));
        out
    }

    pub fn parse(bytes: &[u8]) -> Option<Self> {
        bytes.strip_prefix(STUB_MAGIC).and_then(|rest| serde_json::from_slice(rest).ok())
    }
}

fn tag_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"concept:([A-Za-z0-9_\-]+)").expect("tag regex"))
}

fn option_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(?m)^\s*([A-Z]{1,3})\.\s+(.+?)\s*$").expect("option regex"))
}

/// Concept tags in `text`, lowercased, in order of appearance.
pub fn tags_in(text: &str) -> Vec<String> {
    tag_regex().captures_iter(text).map(|c| c[1].to_lowercase()).collect()
}

/// Raw (case-preserving) first tag carried by image bytes.
fn raw_image_tag(bytes: &[u8]) -> Option<String> {
    if let Some(stub) = StubImage::parse(bytes) {
        return tag_regex().captures(&stub.tag).map(|c| c[1].to_string());
    }
    let text = String::from_utf8_lossy(&bytes[..bytes.len().min(4096)]);
    tag_regex().captures(&text).map(|c| c[1].to_string())
}

pub fn image_concept(bytes: &[u8]) -> Option<String> {
    raw_image_tag(bytes).map(|t| t.to_lowercase())
}

fn prompt_text(messages: &[Message]) -> String {
    messages.iter().map(|m| m.content.as_str()).collect::<Vec<_>>().join("\n")
}

/// Strips a list marker (`1.`, `1)`, `-`, `*`, `•`) from a line.
fn strip_marker(line: &str) -> Option<&str> {
    let t = line.trim();
    for m in ["- ", "* ", "• "] {
        if let Some(rest) = t.strip_prefix(m) {
            return Some(rest.trim());
        }
    }
    let digits = t.chars().take_while(char::is_ascii_digit).count();
    if digits > 0 {
        let rest = &t[digits..];
        if let Some(r) = rest.strip_prefix('.').or_else(|| rest.strip_prefix(')')) {
            return Some(r.trim());
        }
    }
    None
}

pub struct MockBackend {
    seed: u64,
    world: MockWorld,
}

impl MockBackend {
    pub fn new(seed: u64, world: MockWorld) -> Self {
        Self { seed, world }
    }

    pub fn world(&self) -> &MockWorld {
        &self.world
    }

    fn rng(&self, label: &str) -> SplitMix64 {
        SplitMix64::for_label(self.seed, label)
    }

    fn unit(&self, label: &str) -> Vec<f64> {
        let mut rng = self.rng(label);
        let v: Vec<f64> = (0..self.world.dim).map(|_| rng.next_f64() * 2.0 - 1.0).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / norm).collect()
    }

    pub fn concept_vector(&self, id: &str) -> Vec<f64> {
        self.unit(&format!("concept:{}", id.to_lowercase()))
    }

    fn text_vector(&self, t: &str) -> Vec<f64> {
        let h = self.unit(&format!("text:{t}"));
        match tags_in(t).first() {
            Some(c) => {
                let a = self.world.feature_weight;
                let v = self.concept_vector(c);
                v.iter().zip(&h).map(|(x, y)| a * x + (1.0 - a) * y).collect()
            }
            None => h,
        }
    }

    fn image_vector(&self, bytes: &[u8]) -> Vec<f64> {
        let h = self.unit(&format!("image:{}", sha256_hex(bytes)));
        match image_concept(bytes) {
            Some(c) => {
                let g = self.world.image_noise;
                self.concept_vector(&c).iter().zip(&h).map(|(x, y)| x + g * y).collect()
            }
            None => h,
        }
    }

    fn phrase(&self, label: &str) -> String {
        let mut rng = self.rng(label);
        let color = COLORS[rng.below(COLORS.len() as u64) as usize];
        let part = PARTS[rng.below(PARTS.len() as u64) as usize];
        format!("{color} {part}")
    }

    fn textual_features(&self, prompt: &str) -> String {
        let mentioned = self.world.mentions(prompt);
        let subject = mentioned.first();
        let against = mentioned.get(1);
        let key = sha256_hex(prompt.as_bytes());
        let mut lines = Vec::new();
        for i in 0..self.world.features_per_reply {
            let phrase = self.phrase(&format!("textual:{key}:{i}"));
            let tag = match (i % 4, subject, against) {
                (0 | 1, Some(s), _) => Some(&s.id),
                (2, _, Some(a)) => Some(&a.id),
                _ => None,
            };
            lines.push(match tag {
                Some(id) => format!("{}. {phrase} (concept:{id})", i + 1),
                None => format!("{}. {phrase}", i + 1),
            });
        }
        let name = subject.map(|s| s.name.as_str()).unwrap_or("the subject");
        format!(
            "Step 1: recall what {name} looks like.\nStep 2: keep only visible traits.\n\nFeatures:\n{}\n",
            lines.join("\n")
        )
    }

    fn visual_features(&self, image: &[u8]) -> String {
        let key = sha256_hex(image);
        let mut lines = Vec::new();
        if let Some(c) = image_concept(image) {
            let mut pool: Vec<usize> = (0..6).collect();
            self.rng(&format!("visual-pick:{key}")).shuffle(&mut pool);
            for j in &pool[..3] {
                lines.push(format!("- {} (concept:{c})", self.phrase(&format!("pool:{c}:{j}"))));
            }
        }
        lines.push(format!("- {}", self.phrase(&format!("visual-noise:{key}"))));
        format!("Features:\n{}\n", lines.join("\n"))
    }

    fn merge(&self, prompt: &str) -> String {
        let body = prompt
            .split_once("BEGIN FEATURES")
            .map(|(_, rest)| rest.split("END FEATURES").next().unwrap_or(rest))
            .unwrap_or("");
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for line in body.lines() {
            if let Some(item) = strip_marker(line) {
                if !item.is_empty() && seen.insert(text::normalize(item)) {
                    out.push(format!("{}. {item}", out.len() + 1));
                }
            }
        }
        format!("Features:\n{}\n", out.join("\n"))
    }

    fn choose(&self, prompt: &str, image: &[u8], evaluate: bool) -> String {
        let options: Vec<(String, String)> = option_regex()
            .captures_iter(prompt)
            .map(|c| (c[1].to_string(), c[2].to_string()))
            .collect();
        let Some(first) = options.first() else {
            return "I am not sure.".into();
        };
        let ids: Vec<Option<&MockConcept>> = options.iter().map(|(_, n)| self.world.by_name(n)).collect();
        let gold = image_concept(image);
        let gold_pos = gold
            .as_ref()
            .and_then(|g| ids.iter().position(|c| c.is_some_and(|c| c.id.eq_ignore_ascii_case(g))));
        let answer = |pos: usize| format!("{}. {}", options[pos].0, options[pos].1);
        let fallback = format!("{}. {}", first.0, first.1);
        let (Some(gold), Some(gold_pos)) = (gold, gold_pos) else {
            return fallback;
        };
        let novel = self.world.concept(&gold).map(|c| c.novel).unwrap_or(false);
        if evaluate {
            if tags_in(prompt).contains(&gold) || !novel {
                return answer(gold_pos);
            }
            return fallback;
        }
        if !novel {
            return answer(gold_pos);
        }
        // Novel concepts are mistaken for the closest option, known concepts first.
        let confuser = ids
            .iter()
            .enumerate()
            .filter_map(|(i, c)| c.map(|c| (i, c)))
            .filter(|(i, _)| *i != gold_pos)
            .min_by_key(|(_, c)| (c.novel, self.rng(&format!("affinity:{gold}:{}", c.id.to_lowercase())).next_u64()));
        match confuser {
            Some((i, _)) => answer(i),
            None => answer(gold_pos),
        }
    }

    fn verify(&self, prompt: &str, image: &[u8]) -> String {
        let feature = prompt.split('"').nth(1).unwrap_or("");
        let present = match StubImage::parse(image) {
            Some(stub) => stub.features.contains(&text::feature_id(feature)),
            None => image_concept(image).is_some_and(|c| tags_in(feature).contains(&c)),
        };
        let mut reply = if present { "Yes." } else { "No." }.to_string();
        if prompt.to_lowercase().contains("confidence") {
            let u = self.rng(&format!("confidence:{}:{}", sha256_hex(image), sha256_hex(feature.as_bytes()))).next_f64();
            let conf = if present { 0.8 + 0.2 * u } else { 0.05 + 0.25 * u };
            reply.push_str(&format!(" Confidence: {conf:.2}"));
        }
        reply
    }

    fn generate(&self, prompt: &str, n: usize, seed: u64) -> Vec<ImageOutcome> {
        let features: Vec<&str> = prompt
            .lines()
            .filter_map(|l| l.trim().strip_prefix("- ").map(str::trim))
            .collect();
        let concept = self.world.mentions(prompt).first().map(|c| c.id.to_lowercase()).or_else(|| {
            let tags: Vec<String> = features.iter().flat_map(|f| tags_in(f)).collect();
            let mut counts = std::collections::BTreeMap::<&String, usize>::new();
            for t in &tags {
                *counts.entry(t).or_default() += 1;
            }
            counts.into_iter().max_by_key(|(t, n)| (*n, std::cmp::Reverse(*t))).map(|(t, _)| t.clone())
        });
        let tag = format!("concept:{}", concept.as_deref().unwrap_or("unknown"));
        let key = sha256_hex(prompt.as_bytes());
        (0..n)
            .map(|index| {
                if self.rng(&format!("reject:{key}:{seed}:{index}")).next_f64() < self.world.reject_rate {
                    return ImageOutcome::Rejected("content policy violation".into());
                }
                let mut rendered: Vec<String> = features
                    .iter()
                    .map(|f| text::feature_id(f))
                    .filter(|fid| {
                        self.rng(&format!("render:{key}:{seed}:{index}:{fid}")).next_f64() < self.world.render_rate
                    })
                    .collect();
                rendered.sort();
                rendered.dedup();
                let stub = StubImage { tag: tag.clone(), features: rendered, prompt: key.clone(), seed, index };
                ImageOutcome::Image(stub.to_bytes())
            })
            .collect()
    }
}

impl Backend for MockBackend {
    fn call(&self, request: &Request) -> Result<Response, BackendError> {
        Ok(match request {
            Request::Chat { purpose: p, messages, .. } => {
                let prompt = prompt_text(messages);
                Response::Text(match p.as_str() {
                    purpose::EXTRACT_TEXTUAL => self.textual_features(&prompt),
                    purpose::MERGE_FEATURES => self.merge(&prompt),
                    _ => format!("mock reply {}", &sha256_hex(prompt.as_bytes())[..8]),
                })
            }
            Request::Vision { purpose: p, image, messages, .. } => {
                let prompt = prompt_text(messages);
                Response::Text(match p.as_str() {
                    purpose::EXTRACT_VISUAL => self.visual_features(image),
                    purpose::PROBE => self.choose(&prompt, image, false),
                    purpose::EVALUATE => self.choose(&prompt, image, true),
                    purpose::VERIFY => self.verify(&prompt, image),
                    _ => match raw_image_tag(image) {
                        Some(tag) => format!("This image shows {tag}."),
                        None => "I cannot tell what this image shows.".into(),
                    },
                })
            }
            Request::EmbedText { text } => Response::Vector(self.text_vector(text)),
            Request::EmbedImage { image } => Response::Vector(self.image_vector(image)),
            Request::GenerateImage { prompt, n, seed } => Response::Images(self.generate(prompt, *n, *seed)),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{BackendConfig, Cache, DecodeParams, Gateway, Role};
    use std::sync::Arc;

    fn gateway(world: MockWorld) -> Gateway {
        let backend = Arc::new(MockBackend::new(7, world));
        let mut g = Gateway::new(Cache::in_memory());
        for role in Role::ALL {
            g = g.with_backend(BackendConfig::new(role, format!("mock-{role}")), backend.clone()).unwrap();
        }
        g
    }

    #[test]
    fn vision_reports_image_token() {
        let g = gateway(MockWorld::default());
        let reply = g
            .vision_chat(purpose::GENERAL, b"... concept:A ...", vec![Message::user("what is this")], &DecodeParams::default())
            .unwrap();
        assert!(reply.contains('A'), "{reply}");
    }

    #[test]
    fn mock_text_is_reproducible_across_instances() {
        let msgs = vec![Message::user("describe")];
        let a = gateway(MockWorld::default()).chat(purpose::GENERAL, msgs.clone(), &DecodeParams::default()).unwrap();
        let b = gateway(MockWorld::default()).chat(purpose::GENERAL, msgs, &DecodeParams::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tagged_text_is_closer_to_own_concept_images() {
        let g = gateway(MockWorld::default());
        let t = g.embed_text("concept:A").unwrap();
        let ia = g.embed_image(b"MOCKREAL concept:A photo 1").unwrap();
        let ib = g.embed_image(b"MOCKREAL concept:B photo 1").unwrap();
        assert!(t.dot(&ia).unwrap() > t.dot(&ib).unwrap());
    }

    #[test]
    fn embeddings_unit_norm_and_stable() {
        let g = gateway(MockWorld::default());
        for s in ["concept:a red crest", "plain text", ""] {
            let e = g.embed_text(s).unwrap();
            let n: f64 = e.vector.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
            assert_eq!(e, g.embed_text(s).unwrap());
        }
    }

    #[test]
    fn generation_is_deterministic_and_distinct() {
        let g = gateway(MockWorld::species(4));
        let a = g.generate_image("Species 00\n- red crest", 3, 11).unwrap();
        let b = gateway(MockWorld::species(4)).generate_image("Species 00\n- red crest", 3, 11).unwrap();
        assert_eq!(a, b);
        let hashes: BTreeSet<_> = a.images.iter().map(|i| sha256_hex(i)).collect();
        assert_eq!(hashes.len(), 3);
        let stub = StubImage::parse(&a.images[0]).unwrap();
        assert_eq!(stub.tag, "concept:species_00");
    }

    #[test]
    fn mentions_prefers_first_and_longest() {
        let world = MockWorld::new(vec![
            MockConcept { id: "m".into(), name: "Macaw".into(), novel: false, supercategory: None },
            MockConcept { id: "lm".into(), name: "Lear's Macaw".into(), novel: true, supercategory: None },
        ]);
        let found: Vec<_> = world.mentions("Is this Lear's Macaw or a Macaw?").iter().map(|c| c.id.clone()).collect();
        assert_eq!(found, vec!["lm", "m"]);
    }

    #[test]
    fn probe_confuses_novel_with_known() {
        let world = MockWorld::species(4);
        let backend = MockBackend::new(3, world);
        let prompt = "A. Species 00\nB. Species 01\nC. Species 02\n";
        let novel = backend.choose(prompt, b"concept:species_00", false);
        assert!(novel.starts_with("B."), "{novel}");
        let known = backend.choose(prompt, b"concept:species_01", false);
        assert!(known.starts_with("B."), "{known}");
    }
}
