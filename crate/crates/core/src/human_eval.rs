//! Human evaluation of image–feature pairs.
//!
//! A session is a seeded sample of (image, feature) items under one
//! condition. Annotators answer yes/no per item; agreement is summarized by
//! the positive rate and two-category Fleiss' kappa.
//!
//! Storage is one append-only JSON-lines file per session: a `session`
//! record followed by `annotation` records.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::augment::AugmentationBatch;
use crate::dataset::CorpusManifest;
use crate::features::{Feature, FeatureStatus};
use crate::records::{self, RecordError};
use crate::rng::SplitMix64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    /// Target-concept feature on a real target image.
    RealTarget,
    /// Target-concept feature on a real image of the misidentified concept.
    RealMisidentified,
    /// Target-concept feature on a kept synthetic image generated with it.
    SyntheticTarget,
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::RealTarget => "real_target",
            Condition::RealMisidentified => "real_misidentified",
            Condition::SyntheticTarget => "synthetic_target",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionItem {
    pub image: String,
    pub feature: String,
    pub image_path: String,
    pub feature_text: String,
    /// Concept shown in the image.
    pub concept: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationSession {
    pub id: String,
    pub condition: Condition,
    pub items: Vec<SessionItem>,
    pub annotators: Vec<String>,
    pub seed: u64,
    /// Whether annotation clients may display concept names.
    #[serde(default)]
    pub show_concept: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Judgment {
    Yes,
    No,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub session: String,
    pub annotator: String,
    pub item_index: usize,
    pub judgment: Judgment,
    pub timestamp: DateTime<Utc>,
}

#[derive(Debug, thiserror::Error)]
pub enum HumanEvalError {
    #[error("only {available} eligible items for {condition}, {requested} requested")]
    InsufficientPool { condition: Condition, requested: usize, available: usize },
    #[error("session `{0}` already exists")]
    SessionExists(String),
    #[error("session `{0}` not found")]
    UnknownSession(String),
    #[error("invalid session id `{0}`")]
    BadSessionId(String),
    #[error("item index {index} out of range for {len} items")]
    BadItem { index: usize, len: usize },
    #[error("annotator `{0}` is not part of this session")]
    UnknownAnnotator(String),
    #[error("item {item_index} already judged {stored:?} by `{annotator}`")]
    Conflict { annotator: String, item_index: usize, stored: Judgment },
    #[error("items without a judgment from every annotator: {0:?}")]
    Incomplete(Vec<usize>),
    #[error("kappa needs at least 2 annotators and 1 item")]
    TooSmall,
    #[error("kappa undefined")]
    KappaUndefined,
    #[error("malformed session file {path}: {message}")]
    Malformed { path: PathBuf, message: String },
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Builds the eligible pool for a condition, in canonical order.
pub fn eligible_items(
    manifest: &CorpusManifest,
    features: &[Feature],
    batches: &[AugmentationBatch],
    condition: Condition,
) -> Vec<SessionItem> {
    let selected: Vec<&Feature> = features.iter().filter(|f| f.status == FeatureStatus::Selected).collect();
    let mut pool = BTreeSet::new();
    let mut add = |concept: &str, image: &str, path: &str, f: &Feature| {
        pool.insert(SessionItem {
            image: image.to_string(),
            feature: f.id.clone(),
            image_path: path.to_string(),
            feature_text: f.text.clone(),
            concept: concept.to_string(),
        });
    };
    match condition {
        Condition::RealTarget | Condition::RealMisidentified => {
            for f in &selected {
                let concept = match condition {
                    Condition::RealTarget => Some(&f.target),
                    _ => f.against.as_ref(),
                };
                let Some(concept) = concept else { continue };
                for a in manifest.assets.iter().filter(|a| &a.concept == concept) {
                    add(concept, &a.id, &a.path, f);
                }
            }
        }
        Condition::SyntheticTarget => {
            let by_id: HashMap<&str, &Feature> = selected.iter().map(|f| (f.id.as_str(), *f)).collect();
            for b in batches {
                for kept in &b.kept {
                    let Some(asset) = b.candidate(kept) else { continue };
                    for fid in &b.features {
                        if let Some(f) = by_id.get(fid.as_str()).filter(|f| f.target == b.pair.target) {
                            add(&b.pair.target, &asset.id, &asset.path, f);
                        }
                    }
                }
            }
        }
    }
    pool.into_iter().collect()
}

/// Samples `n_items` distinct items from the eligible pool with a seeded
/// shuffle.
#[allow(clippy::too_many_arguments)]
pub fn create_session(
    id: &str,
    manifest: &CorpusManifest,
    features: &[Feature],
    batches: &[AugmentationBatch],
    condition: Condition,
    n_items: usize,
    annotators: Vec<String>,
    seed: u64,
) -> Result<AnnotationSession, HumanEvalError> {
    let mut pool = eligible_items(manifest, features, batches, condition);
    if n_items > pool.len() {
        return Err(HumanEvalError::InsufficientPool { condition, requested: n_items, available: pool.len() });
    }
    SplitMix64::for_label(seed, &format!("session:{condition}")).shuffle(&mut pool);
    pool.truncate(n_items);
    Ok(AnnotationSession { id: id.to_string(), condition, items: pool, annotators, seed, show_concept: false })
}

/// Outcome of [`SessionStore::record`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Recorded {
    Stored(AnnotationRecord),
    /// An identical judgment was already stored; nothing was written.
    Replayed(AnnotationRecord),
}

impl Recorded {
    pub fn record(&self) -> &AnnotationRecord {
        match self {
            Recorded::Stored(r) | Recorded::Replayed(r) => r,
        }
    }
}

/// Session files under one directory, with writes serialized per session.
#[derive(Debug)]
pub struct SessionStore {
    dir: PathBuf,
    locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
}

#[derive(Serialize)]
struct Tagged<'a, T> {
    record: &'a str,
    #[serde(flatten)]
    body: &'a T,
}

fn valid_id(id: &str) -> bool {
    !id.is_empty() && id.chars().all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_')
}

impl SessionStore {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into(), locks: Mutex::default() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn path(&self, id: &str) -> PathBuf {
        self.dir.join(format!("{id}.jsonl"))
    }

    fn lock(&self, id: &str) -> Arc<Mutex<()>> {
        self.locks.lock().expect("store lock").entry(id.to_string()).or_default().clone()
    }

    pub fn create(&self, session: &AnnotationSession) -> Result<(), HumanEvalError> {
        if !valid_id(&session.id) {
            return Err(HumanEvalError::BadSessionId(session.id.clone()));
        }
        let lock = self.lock(&session.id);
        let _guard = lock.lock().expect("session lock");
        let path = self.path(&session.id);
        if path.exists() {
            return Err(HumanEvalError::SessionExists(session.id.clone()));
        }
        let line = serde_json::to_string(&Tagged { record: "session", body: session }).map_err(RecordError::from)?;
        records::write_atomic(&path, format!("{line}\n").as_bytes())?;
        Ok(())
    }

    /// Ids of all stored sessions, sorted.
    pub fn list(&self) -> Result<Vec<String>, HumanEvalError> {
        let entries = match fs::read_dir(&self.dir) {
            Ok(e) => e,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
            Err(e) => return Err(RecordError::io(&self.dir, e).into()),
        };
        let mut ids: Vec<String> = entries
            .filter_map(Result::ok)
            .filter_map(|e| e.file_name().to_str()?.strip_suffix(".jsonl").map(str::to_string))
            .filter(|id| valid_id(id))
            .collect();
        ids.sort();
        Ok(ids)
    }

    /// The session and its records. A trailing partial line (from an
    /// interrupted append) is ignored.
    pub fn load(&self, id: &str) -> Result<(AnnotationSession, Vec<AnnotationRecord>), HumanEvalError> {
        if !valid_id(id) {
            return Err(HumanEvalError::UnknownSession(id.to_string()));
        }
        let path = self.path(id);
        let text = match fs::read_to_string(&path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(HumanEvalError::UnknownSession(id.to_string()))
            }
            Err(e) => return Err(RecordError::io(&path, e).into()),
        };
        let complete = match text.rfind('\n') {
            Some(i) => &text[..=i],
            None => "",
        };
        if complete.len() < text.len() {
            tracing::warn!(path = %path.display(), "ignoring partial trailing record");
        }
        let malformed = |message: String| HumanEvalError::Malformed { path: path.clone(), message };
        let mut session = None;
        let mut recs = Vec::new();
        for (n, line) in complete.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut v: Value = serde_json::from_str(line).map_err(|e| malformed(format!("line {}: {e}", n + 1)))?;
            let kind = v.as_object_mut().and_then(|m| m.remove("record"));
            match kind.as_ref().and_then(Value::as_str) {
                Some("session") if session.is_none() => {
                    session = Some(serde_json::from_value::<AnnotationSession>(v).map_err(|e| malformed(e.to_string()))?)
                }
                Some("annotation") => recs.push(serde_json::from_value(v).map_err(|e| malformed(e.to_string()))?),
                other => return Err(malformed(format!("line {}: unexpected record {other:?}", n + 1))),
            }
        }
        let session = session.ok_or_else(|| malformed("no session record".into()))?;
        Ok((session, recs))
    }

    /// Stores a judgment. Replaying an identical judgment is accepted without
    /// writing; a different judgment for the same key is a conflict.
    pub fn record(
        &self,
        id: &str,
        annotator: &str,
        item_index: usize,
        judgment: Judgment,
    ) -> Result<Recorded, HumanEvalError> {
        let lock = self.lock(id);
        let _guard = lock.lock().expect("session lock");
        let (session, recs) = self.load(id)?;
        if item_index >= session.items.len() {
            return Err(HumanEvalError::BadItem { index: item_index, len: session.items.len() });
        }
        if !session.annotators.iter().any(|a| a == annotator) {
            return Err(HumanEvalError::UnknownAnnotator(annotator.to_string()));
        }
        if let Some(existing) = recs.iter().find(|r| r.annotator == annotator && r.item_index == item_index) {
            if existing.judgment == judgment {
                return Ok(Recorded::Replayed(existing.clone()));
            }
            return Err(HumanEvalError::Conflict {
                annotator: annotator.to_string(),
                item_index,
                stored: existing.judgment,
            });
        }
        let rec = AnnotationRecord {
            session: id.to_string(),
            annotator: annotator.to_string(),
            item_index,
            judgment,
            timestamp: Utc::now(),
        };
        let line = serde_json::to_string(&Tagged { record: "annotation", body: &rec }).map_err(RecordError::from)?;
        let path = self.path(id);
        let existing = fs::read(&path).map_err(|e| RecordError::io(&path, e))?;
        let complete = existing.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        if complete < existing.len() {
            // Drop the partial tail so the new record starts on its own line.
            let f = OpenOptions::new().write(true).open(&path).map_err(|e| RecordError::io(&path, e))?;
            f.set_len(complete as u64).map_err(|e| RecordError::io(&path, e))?;
        }
        let mut file = OpenOptions::new().append(true).open(&path).map_err(|e| RecordError::io(&path, e))?;
        file.write_all(format!("{line}\n").as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|e| RecordError::io(&path, e))?;
        Ok(Recorded::Stored(rec))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Kappa {
    pub value: f64,
    /// All judgments fell in one category; `value` is 1 by convention.
    pub degenerate: bool,
}

/// Two-category Fleiss' kappa. Each row is `[yes, no]` counts for one item;
/// every row must sum to the same number of raters `n ≥ 2`.
pub fn fleiss_kappa(table: &[[usize; 2]]) -> Result<Kappa, HumanEvalError> {
    let Some(first) = table.first() else { return Err(HumanEvalError::TooSmall) };
    let n = first[0] + first[1];
    if n < 2 {
        return Err(HumanEvalError::TooSmall);
    }
    if let Some(i) = table.iter().position(|r| r[0] + r[1] != n) {
        return Err(HumanEvalError::Incomplete(vec![i]));
    }
    let items = table.len() as f64;
    let nf = n as f64;
    let yes: usize = table.iter().map(|r| r[0]).sum();
    let total = table.len() * n;
    if yes == 0 || yes == total {
        // Every item is unanimous, so observed agreement is 1.
        return Ok(Kappa { value: 1.0, degenerate: true });
    }
    let p_bar = table
        .iter()
        .map(|r| ((r[0] * r[0] + r[1] * r[1]) as f64 - nf) / (nf * (nf - 1.0)))
        .sum::<f64>()
        / items;
    let p_yes = yes as f64 / total as f64;
    let p_e = p_yes * p_yes + (1.0 - p_yes) * (1.0 - p_yes);
    if p_e >= 1.0 {
        return Err(HumanEvalError::KappaUndefined);
    }
    Ok(Kappa { value: (p_bar - p_e) / (1.0 - p_e), degenerate: false })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementStats {
    pub session: String,
    pub items: usize,
    pub annotators: usize,
    pub judgments: usize,
    pub positive_rate: f64,
    pub fleiss_kappa: f64,
    pub degenerate: bool,
}

/// Positive rate and kappa over a complete session.
pub fn agreement_stats(
    session: &AnnotationSession,
    records: &[AnnotationRecord],
) -> Result<AgreementStats, HumanEvalError> {
    let annotators: BTreeSet<&str> = session.annotators.iter().map(String::as_str).collect();
    let mut judged: BTreeMap<(usize, &str), Judgment> = BTreeMap::new();
    for r in records.iter().filter(|r| annotators.contains(r.annotator.as_str())) {
        judged.entry((r.item_index, &r.annotator)).or_insert(r.judgment);
    }
    let mut table = Vec::with_capacity(session.items.len());
    let mut incomplete = Vec::new();
    for i in 0..session.items.len() {
        let mut row = [0usize; 2];
        for a in &annotators {
            match judged.get(&(i, *a)) {
                Some(Judgment::Yes) => row[0] += 1,
                Some(Judgment::No) => row[1] += 1,
                None => {}
            }
        }
        if row[0] + row[1] < annotators.len() {
            incomplete.push(i);
        }
        table.push(row);
    }
    if !incomplete.is_empty() {
        return Err(HumanEvalError::Incomplete(incomplete));
    }
    let kappa = fleiss_kappa(&table)?;
    let judgments = table.len() * annotators.len();
    let yes: usize = table.iter().map(|r| r[0]).sum();
    Ok(AgreementStats {
        session: session.id.clone(),
        items: table.len(),
        annotators: annotators.len(),
        judgments,
        positive_rate: yes as f64 / judgments as f64,
        fleiss_kappa: kappa.value,
        degenerate: kappa.degenerate,
    })
}
