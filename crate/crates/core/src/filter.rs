//! Discriminability and generability scoring.
//!
//! With `s(f, i) = (1 + cos(embed(f), embed(i))) / 2` and index-paired
//! image lists,
//!
//! ```text
//! D(f) = mean_i  s(f, t_i) / (s(f, t_i) + s(f, m_i))
//! G(f) = mean_i  s(f, g_i) / (s(f, g_i) + s(f, m_i))
//! ```
//!
//! where `t_i` are target reals, `m_i` misidentified reals and `g_i`
//! synthetic images generated from a prompt containing `f`. A term whose
//! denominator is zero counts as 0.5. Features with `D` below the threshold
//! are rejected before any image is generated for them; survivors are ranked
//! by `G` (then `D`, then id) and the top `k` are selected.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::features::{Feature, FeatureError, FeatureStatus};
use crate::gateway::{Embedding, Gateway, GatewayError};
use crate::records::sha256_hex;
use crate::rng::SplitMix64;

/// Default cap on image pairs per score.
pub const DEFAULT_PAIR_COUNT: usize = 5;

/// Image bytes with their content hash.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageData {
    pub id: String,
    pub bytes: Arc<Vec<u8>>,
}

impl ImageData {
    pub fn new(bytes: Vec<u8>) -> Self {
        Self { id: sha256_hex(&bytes), bytes: Arc::new(bytes) }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum FilterError {
    #[error("scoring needs nonempty image lists (target {target}, misidentified {misidentified})")]
    EmptyImages { target: usize, misidentified: usize },
    #[error("no synthetic images for feature {0}")]
    NoSynthetic(String),
    #[error("similarity {value} outside [0, 1] for feature `{text}`")]
    OutOfRange { text: String, value: f64 },
    #[error("no similarity known for feature `{text}` and image {image}")]
    Unknown { text: String, image: String },
    #[error("synthetic image supplier failed: {0}")]
    Supplier(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Feature(#[from] FeatureError),
}

/// Text–image similarity in `[0, 1]`.
pub trait Similarity: Sync {
    fn similarity(&self, text: &str, image: &ImageData) -> Result<f64, FilterError>;
}

/// Maps a cosine to `[0, 1]`. Clamped against rounding just outside ±1.
pub fn shifted_cosine(cos: f64) -> f64 {
    ((1.0 + cos) / 2.0).clamp(0.0, 1.0)
}

/// Similarity from the gateway's embedding role, memoized per text and per
/// image hash.
pub struct EmbeddingSimilarity<'a> {
    gateway: &'a Gateway,
    texts: Mutex<HashMap<String, Arc<Embedding>>>,
    images: Mutex<HashMap<String, Arc<Embedding>>>,
}

impl<'a> EmbeddingSimilarity<'a> {
    pub fn new(gateway: &'a Gateway) -> Self {
        Self { gateway, texts: Mutex::default(), images: Mutex::default() }
    }

    fn text(&self, text: &str) -> Result<Arc<Embedding>, FilterError> {
        if let Some(e) = self.texts.lock().expect("memo lock").get(text) {
            return Ok(e.clone());
        }
        let e = Arc::new(self.gateway.embed_text(text)?);
        self.texts.lock().expect("memo lock").insert(text.to_string(), e.clone());
        Ok(e)
    }

    fn image(&self, image: &ImageData) -> Result<Arc<Embedding>, FilterError> {
        if let Some(e) = self.images.lock().expect("memo lock").get(&image.id) {
            return Ok(e.clone());
        }
        let e = Arc::new(self.gateway.embed_image(&image.bytes)?);
        self.images.lock().expect("memo lock").insert(image.id.clone(), e.clone());
        Ok(e)
    }
}

impl Similarity for EmbeddingSimilarity<'_> {
    fn similarity(&self, text: &str, image: &ImageData) -> Result<f64, FilterError> {
        let cos = self.text(text)?.dot(&*self.image(image)?)?;
        Ok(shifted_cosine(cos))
    }
}

/// Fixed table of similarities keyed by `(text, image id)`.
#[derive(Debug, Clone, Default)]
pub struct TableSimilarity {
    pub values: HashMap<(String, String), f64>,
}

impl TableSimilarity {
    pub fn insert(&mut self, text: &str, image: &str, value: f64) {
        self.values.insert((text.to_string(), image.to_string()), value);
    }
}

impl Similarity for TableSimilarity {
    fn similarity(&self, text: &str, image: &ImageData) -> Result<f64, FilterError> {
        self.values
            .get(&(text.to_string(), image.id.clone()))
            .copied()
            .ok_or_else(|| FilterError::Unknown { text: text.to_string(), image: image.id.clone() })
    }
}

/// Target and misidentified real images, shuffled with the pair seed and
/// truncated to a common length `pair_count`.
#[derive(Debug, Clone)]
pub struct ScoringContext {
    pub target_real: Vec<ImageData>,
    pub misident_real: Vec<ImageData>,
    pub pair_count: usize,
    pub seed: u64,
}

impl ScoringContext {
    /// `max_pairs` caps `|I|`; the effective count is the smallest of it
    /// and both list lengths.
    pub fn new(
        mut target_real: Vec<ImageData>,
        mut misident_real: Vec<ImageData>,
        max_pairs: usize,
        seed: u64,
    ) -> Result<Self, FilterError> {
        if target_real.is_empty() || misident_real.is_empty() || max_pairs == 0 {
            return Err(FilterError::EmptyImages { target: target_real.len(), misidentified: misident_real.len() });
        }
        SplitMix64::for_label(seed, "pairing:target").shuffle(&mut target_real);
        SplitMix64::for_label(seed, "pairing:misidentified").shuffle(&mut misident_real);
        let pair_count = max_pairs.min(target_real.len()).min(misident_real.len());
        target_real.truncate(pair_count);
        misident_real.truncate(pair_count);
        Ok(Self { target_real, misident_real, pair_count, seed })
    }

    /// Swaps the roles of the two image sets.
    pub fn swapped(&self) -> Self {
        Self {
            target_real: self.misident_real.clone(),
            misident_real: self.target_real.clone(),
            pair_count: self.pair_count,
            seed: self.seed,
        }
    }
}

fn checked(sim: &dyn Similarity, text: &str, image: &ImageData) -> Result<f64, FilterError> {
    let v = sim.similarity(text, image)?;
    if !(0.0..=1.0).contains(&v) {
        return Err(FilterError::OutOfRange { text: text.to_string(), value: v });
    }
    Ok(v)
}

/// `a / (a + b)`, or 0.5 when both are zero.
pub fn ratio(a: f64, b: f64) -> f64 {
    let d = a + b;
    if d == 0.0 {
        0.5
    } else {
        a / d
    }
}

/// Mean ratio over index-paired lists, truncated to the shorter one.
fn paired_mean(
    sim: &dyn Similarity,
    text: &str,
    numer: &[ImageData],
    other: &[ImageData],
) -> Result<f64, FilterError> {
    let n = numer.len().min(other.len());
    if n == 0 {
        return Err(FilterError::EmptyImages { target: numer.len(), misidentified: other.len() });
    }
    let mut sum = 0.0;
    for i in 0..n {
        sum += ratio(checked(sim, text, &numer[i])?, checked(sim, text, &other[i])?);
    }
    Ok(sum / n as f64)
}

pub fn discriminability(sim: &dyn Similarity, text: &str, ctx: &ScoringContext) -> Result<f64, FilterError> {
    paired_mean(sim, text, &ctx.target_real, &ctx.misident_real)
}

/// Synthetic images are shuffled with a seed derived from the feature text,
/// then paired with the misidentified reals.
pub fn generability(
    sim: &dyn Similarity,
    text: &str,
    synthetic: &[ImageData],
    ctx: &ScoringContext,
) -> Result<f64, FilterError> {
    let mut syn = synthetic.to_vec();
    SplitMix64::for_label(ctx.seed, &format!("pairing:synthetic:{text}")).shuffle(&mut syn);
    paired_mean(sim, text, &syn, &ctx.misident_real)
}

/// Supplies synthetic images rendered from a prompt containing one feature.
pub trait GenerabilitySupplier: Sync {
    /// `Ok(None)` means the generator produced nothing usable for this
    /// feature; the feature then cannot be selected.
    fn synthetic(&self, feature: &Feature, n: usize) -> Result<Option<Vec<ImageData>>, FilterError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectParams {
    pub d_threshold: f64,
    pub top_k: usize,
}

impl Default for SelectParams {
    fn default() -> Self {
        Self { d_threshold: 0.6, top_k: 5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Selected in rank order, then other survivors in rank order, then
    /// rejected features by id.
    pub features: Vec<Feature>,
    pub warnings: Vec<String>,
}

impl Selection {
    pub fn selected(&self) -> impl Iterator<Item = &Feature> {
        self.features.iter().filter(|f| f.status == FeatureStatus::Selected)
    }
}

fn rank(a: &Feature, b: &Feature) -> std::cmp::Ordering {
    let g = |f: &Feature| f.g_score.unwrap_or(f64::NEG_INFINITY);
    let d = |f: &Feature| f.d_score.unwrap_or(f64::NEG_INFINITY);
    g(b).total_cmp(&g(a)).then_with(|| d(b).total_cmp(&d(a))).then_with(|| a.id.cmp(&b.id))
}

/// Scores every feature, rejects those with `D < d_threshold`, computes `G`
/// for the survivors only, and selects the top `k`.
pub fn filter_and_select(
    features: Vec<Feature>,
    ctx: &ScoringContext,
    sim: &dyn Similarity,
    params: &SelectParams,
    gen: &dyn GenerabilitySupplier,
) -> Result<Selection, FilterError> {
    let scored: Vec<Feature> = features
        .into_par_iter()
        .map(|mut f| {
            let d = discriminability(sim, &f.text, ctx)?;
            f.d_score = Some(d);
            if d < params.d_threshold {
                f.advance(FeatureStatus::Rejected)?;
            } else {
                f.advance(FeatureStatus::PassedD)?;
            }
            Ok(f)
        })
        .collect::<Result<_, FilterError>>()?;

    let (survivors, mut rejected): (Vec<Feature>, Vec<Feature>) =
        scored.into_iter().partition(|f| f.status == FeatureStatus::PassedD);
    let mut warnings = Vec::new();
    let mut survivors: Vec<(Feature, Option<String>)> = survivors
        .into_par_iter()
        .map(|mut f| {
            let note = match gen.synthetic(&f, ctx.pair_count)? {
                Some(images) if !images.is_empty() => {
                    f.g_score = Some(generability(sim, &f.text, &images, ctx)?);
                    None
                }
                _ => Some(format!("feature {} ({}): no synthetic images, not selectable", f.id, f.text)),
            };
            Ok((f, note))
        })
        .collect::<Result<_, FilterError>>()?;
    survivors.sort_by(|a, b| rank(&a.0, &b.0));
    let mut out = Vec::new();
    let mut rest = Vec::new();
    for (mut f, note) in survivors {
        if let Some(n) = note {
            warnings.push(n);
        }
        if f.g_score.is_some() && out.len() < params.top_k {
            f.advance(FeatureStatus::Selected)?;
            out.push(f);
        } else {
            rest.push(f);
        }
    }
    if out.is_empty() {
        warnings.push("no feature survived filtering".into());
    }
    rejected.sort_by(|a, b| a.id.cmp(&b.id));
    out.extend(rest);
    out.extend(rejected);
    Ok(Selection { features: out, warnings })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureKind;
    use proptest::prelude::*;

    fn img(tag: &str) -> ImageData {
        ImageData::new(tag.as_bytes().to_vec())
    }

    fn ctx(t: &[&str], m: &[&str]) -> ScoringContext {
        ScoringContext::new(t.iter().map(|x| img(x)).collect(), m.iter().map(|x| img(x)).collect(), 5, 1).unwrap()
    }

    struct NoGen;
    impl GenerabilitySupplier for NoGen {
        fn synthetic(&self, _: &Feature, _: usize) -> Result<Option<Vec<ImageData>>, FilterError> {
            Ok(None)
        }
    }

    #[test]
    fn shifted_cosine_endpoints() {
        assert_eq!(shifted_cosine(1.0), 1.0);
        assert_eq!(shifted_cosine(0.0), 0.5);
        assert_eq!(shifted_cosine(-1.0), 0.0);
    }

    #[test]
    fn single_pair_value() {
        let c = ctx(&["t"], &["m"]);
        let mut s = TableSimilarity::default();
        s.insert("f", &img("t").id, 1.0);
        s.insert("f", &img("m").id, 0.5);
        assert!((discriminability(&s, "f", &c).unwrap() - 1.0 / 1.5).abs() < 1e-15);
        s.insert("f", &img("g").id, 0.9);
        s.insert("f", &img("m").id, 0.3);
        assert!((generability(&s, "f", &[img("g")], &c).unwrap() - 0.75).abs() < 1e-15);
    }

    #[test]
    fn degenerate_term_is_half() {
        let c = ctx(&["t"], &["m"]);
        let mut s = TableSimilarity::default();
        s.insert("f", &img("t").id, 0.0);
        s.insert("f", &img("m").id, 0.0);
        assert_eq!(discriminability(&s, "f", &c).unwrap(), 0.5);
    }

    #[test]
    fn out_of_range_similarity_is_refused() {
        let c = ctx(&["t"], &["m"]);
        let mut s = TableSimilarity::default();
        s.insert("f", &img("t").id, 1.2);
        s.insert("f", &img("m").id, 0.5);
        assert!(matches!(discriminability(&s, "f", &c), Err(FilterError::OutOfRange { .. })));
    }

    #[test]
    fn threshold_keeps_exactly_point_six() {
        // One pair: D = a / (a + b). Pick b so D hits 0.59, 0.60, 0.61.
        let c = ctx(&["t"], &["m"]);
        let mut s = TableSimilarity::default();
        let mut feats = Vec::new();
        for (text, d) in [("f59", 0.59), ("f60", 0.6), ("f61", 0.61)] {
            // a = d, b = 1 - d gives a / (a + b) = d exactly for these values.
            s.insert(text, &img("t").id, d);
            s.insert(text, &img("m").id, 1.0 - d);
            feats.push(Feature::new(text, FeatureKind::Textual, "t", None).unwrap());
        }
        let sel = filter_and_select(feats, &c, &s, &SelectParams::default(), &NoGen).unwrap();
        let passed: Vec<_> = sel
            .features
            .iter()
            .filter(|f| f.status != FeatureStatus::Rejected)
            .map(|f| f.text.as_str())
            .collect();
        assert_eq!(passed.len(), 2);
        assert!(passed.contains(&"f60") && passed.contains(&"f61"));
    }

    proptest! {
        #[test]
        fn swap_complements(vals in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..6)) {
            let t: Vec<String> = (0..vals.len()).map(|i| format!("t{i}")).collect();
            let m: Vec<String> = (0..vals.len()).map(|i| format!("m{i}")).collect();
            let c = ScoringContext::new(
                t.iter().map(|x| img(x)).collect(),
                m.iter().map(|x| img(x)).collect(),
                5,
                9,
            ).unwrap();
            let mut s = TableSimilarity::default();
            for (i, (a, b)) in vals.iter().enumerate() {
                s.insert("f", &img(&t[i]).id, *a);
                s.insert("f", &img(&m[i]).id, *b);
            }
            let d = discriminability(&s, "f", &c).unwrap();
            let d2 = discriminability(&s, "f", &c.swapped()).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
            prop_assert!((d + d2 - 1.0).abs() < 1e-12);
        }

        #[test]
        fn raising_target_similarity_never_lowers_d(
            vals in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1..6),
            which in 0usize..6,
            bump in 0.0f64..=1.0,
        ) {
            let n = vals.len();
            let t: Vec<String> = (0..n).map(|i| format!("t{i}")).collect();
            let m: Vec<String> = (0..n).map(|i| format!("m{i}")).collect();
            let c = ScoringContext::new(t.iter().map(|x| img(x)).collect(), m.iter().map(|x| img(x)).collect(), 5, 2).unwrap();
            let mut s = TableSimilarity::default();
            for (i, (a, b)) in vals.iter().enumerate() {
                s.insert("f", &img(&t[i]).id, *a);
                s.insert("f", &img(&m[i]).id, *b);
            }
            let before = discriminability(&s, "f", &c).unwrap();
            let k = which % n;
            let raised = (vals[k].0 + bump).min(1.0);
            s.insert("f", &img(&t[k]).id, raised);
            let after = discriminability(&s, "f", &c).unwrap();
            prop_assert!(after >= before - 1e-15);
        }
    }
}
