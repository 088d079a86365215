//! Corpus layout, manifest records, and deterministic splits.
//!
//! A corpus lives under one root directory:
//!
//! ```text
//! <root>/<concept-id>/<image-file>
//! <root>/<concept-id>/concept.json          (optional metadata)
//! <root>/_synthetic/<concept-id>/<hash>.<ext>
//! ```
//!
//! The manifest is a line-record file. The first line is the header
//! (`"record": "header"`, `version`, `seed`), followed by one `"concept"`
//! record per concept and then one `"asset"` record per image. Concepts are
//! sorted by id and assets by `(concept, id)`. Fields not known to this
//! version are kept in `extra` and written back unchanged.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::records::{self, sha256_hex, RecordError};
use crate::rng::SplitMix64;

pub const MANIFEST_VERSION: u32 = 1;
pub const SYNTHETIC_DIR: &str = "_synthetic";
pub const TRAIN: &str = "train";
pub const VAL: &str = "val";
pub const TEST: &str = "test";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageAsset {
    /// Hex SHA-256 of the file bytes.
    pub id: String,
    pub concept: String,
    /// Path relative to the corpus root, `/`-separated.
    pub path: String,
    pub provenance: Provenance,
    #[serde(default)]
    pub source_features: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<f64>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl ImageAsset {
    pub fn real(id: String, concept: String, path: String) -> Self {
        Self {
            id,
            concept,
            path,
            provenance: Provenance::Real,
            source_features: Vec::new(),
            satisfaction: None,
            extra: Map::new(),
        }
    }

    pub fn full_path(&self, root: &Path) -> PathBuf {
        root.join(&self.path)
    }

    pub fn read_bytes(&self, root: &Path) -> Result<Vec<u8>, DatasetError> {
        let path = self.full_path(root);
        fs::read(&path).map_err(|e| DatasetError::Unreadable { path, source: e })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub canonical_name: String,
    #[serde(default)]
    pub aliases: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub supercategory: Option<String>,
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub splits: BTreeMap<String, Vec<String>>,
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Concept {
    pub fn split(&self, name: &str) -> &[String] {
        self.splits.get(name).map(Vec::as_slice).unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub version: u32,
    pub seed: u64,
    pub concepts: Vec<Concept>,
    pub assets: Vec<ImageAsset>,
    pub header_extra: Map<String, Value>,
}

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("cannot read {path}: {source}")]
    Unreadable {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("concepts with too few images for a {need}-image split: {}", .concepts.join(", "))]
    TooFewImages { need: usize, concepts: Vec<String> },
    #[error("malformed manifest: {0}")]
    Malformed(String),
    #[error("unknown concept `{0}`")]
    UnknownConcept(String),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// How concept directories are interpreted during ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IngestLayout {
    /// Lowercase file extensions accepted as images. Empty accepts all files.
    pub extensions: Vec<String>,
    /// Derive the display name from the directory name by replacing `_` with spaces.
    pub underscores_as_spaces: bool,
    /// Optional per-concept metadata file with `canonical_name`, `aliases`, `supercategory`.
    pub metadata_file: String,
}

impl Default for IngestLayout {
    fn default() -> Self {
        Self {
            extensions: ["jpg", "jpeg", "png", "webp", "gif", "bmp", "tif", "tiff"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            underscores_as_spaces: true,
            metadata_file: "concept.json".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IngestWarning {
    EmptyConcept { concept: String },
    DuplicateImage { concept: String, path: String, duplicate_of: String },
}

impl std::fmt::Display for IngestWarning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::EmptyConcept { concept } => write!(f, "concept `{concept}` has no images, skipped"),
            Self::DuplicateImage { concept, path, duplicate_of } => {
                write!(f, "{path} duplicates {duplicate_of} in `{concept}`, ignored")
            }
        }
    }
}

#[derive(Debug)]
pub struct Ingested {
    pub manifest: CorpusManifest,
    pub warnings: Vec<IngestWarning>,
}

#[derive(Debug, Default, Deserialize)]
struct ConceptMeta {
    canonical_name: Option<String>,
    #[serde(default)]
    aliases: Vec<String>,
    supercategory: Option<String>,
}

fn is_skipped_name(name: &str) -> bool {
    name.starts_with('.') || name.starts_with('_')
}

/// Scans `root` for concept directories and registers every image by content hash.
pub fn ingest(root: &Path, layout: &IngestLayout, seed: u64) -> Result<Ingested, DatasetError> {
    let unreadable = |path: &Path, source| DatasetError::Unreadable { path: path.to_path_buf(), source };
    let mut dirs = Vec::new();
    for entry in fs::read_dir(root).map_err(|e| unreadable(root, e))? {
        let entry = entry.map_err(|e| unreadable(root, e))?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if is_skipped_name(&name) {
            continue;
        }
        if entry.file_type().map_err(|e| unreadable(&entry.path(), e))?.is_dir() {
            dirs.push(name);
        }
    }
    dirs.sort();

    // (concept, relative path, absolute path)
    let mut files: Vec<(String, String, PathBuf)> = Vec::new();
    let mut metas: BTreeMap<String, ConceptMeta> = BTreeMap::new();
    for concept in &dirs {
        let dir = root.join(concept);
        let mut names = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| unreadable(&dir, e))? {
            let entry = entry.map_err(|e| unreadable(&dir, e))?;
            let name = entry.file_name().to_string_lossy().into_owned();
            if name.starts_with('.') || !entry.file_type().map_err(|e| unreadable(&entry.path(), e))?.is_file() {
                continue;
            }
            if name == layout.metadata_file {
                let meta_path = entry.path();
                let meta: ConceptMeta = records::read_json(&meta_path)?;
                metas.insert(concept.clone(), meta);
                continue;
            }
            if accepts_extension(layout, &name) {
                names.push(name);
            }
        }
        names.sort();
        files.extend(names.into_iter().map(|n| (concept.clone(), format!("{concept}/{n}"), dir.join(&n))));
    }

    let hashed: Vec<(String, String, String)> = files
        .par_iter()
        .map(|(concept, rel, abs)| {
            let bytes = fs::read(abs).map_err(|e| unreadable(abs, e))?;
            Ok((concept.clone(), rel.clone(), sha256_hex(&bytes)))
        })
        .collect::<Result<_, DatasetError>>()?;

    let mut warnings = Vec::new();
    let mut by_concept: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
    for (concept, rel, hash) in hashed {
        let slot = by_concept.entry(concept.clone()).or_default();
        match slot.get(&hash) {
            Some(first) => warnings.push(IngestWarning::DuplicateImage {
                concept,
                path: rel,
                duplicate_of: first.clone(),
            }),
            None => {
                slot.insert(hash, rel);
            }
        }
    }

    let mut concepts = Vec::new();
    let mut assets = Vec::new();
    for id in &dirs {
        let images = by_concept.remove(id).unwrap_or_default();
        if images.is_empty() {
            warnings.push(IngestWarning::EmptyConcept { concept: id.clone() });
            continue;
        }
        let meta = metas.remove(id).unwrap_or_default();
        let canonical_name = meta.canonical_name.unwrap_or_else(|| {
            if layout.underscores_as_spaces {
                id.replace('_', " ")
            } else {
                id.clone()
            }
        });
        concepts.push(Concept {
            id: id.clone(),
            canonical_name,
            aliases: meta.aliases,
            supercategory: meta.supercategory,
            images: images.keys().cloned().collect(),
            splits: BTreeMap::new(),
            extra: Map::new(),
        });
        assets.extend(images.into_iter().map(|(hash, rel)| ImageAsset::real(hash, id.clone(), rel)));
    }
    for w in &warnings {
        tracing::warn!("{w}");
    }

    Ok(Ingested {
        manifest: CorpusManifest {
            version: MANIFEST_VERSION,
            seed,
            concepts,
            assets,
            header_extra: Map::new(),
        },
        warnings,
    })
}

fn accepts_extension(layout: &IngestLayout, name: &str) -> bool {
    if layout.extensions.is_empty() {
        return true;
    }
    let ext = Path::new(name)
        .extension()
        .map(|e| e.to_string_lossy().to_lowercase())
        .unwrap_or_default();
    layout.extensions.iter().any(|e| e.eq_ignore_ascii_case(&ext))
}

/// Assigns train/val/test per concept from one seeded shuffle of its image ids.
pub fn split(
    manifest: &CorpusManifest,
    train_n: usize,
    val_n: usize,
    test_n: usize,
) -> Result<CorpusManifest, DatasetError> {
    let need = train_n + val_n + test_n;
    let short: Vec<String> = manifest
        .concepts
        .iter()
        .filter(|c| c.images.len() < need)
        .map(|c| c.id.clone())
        .collect();
    if !short.is_empty() {
        return Err(DatasetError::TooFewImages { need, concepts: short });
    }
    let mut out = manifest.clone();
    for concept in &mut out.concepts {
        let mut order = concept.images.clone();
        order.sort();
        SplitMix64::for_label(manifest.seed, &format!("split:{}", concept.id)).shuffle(&mut order);
        let mut splits = BTreeMap::new();
        splits.insert(TRAIN.to_string(), order[..train_n].to_vec());
        splits.insert(VAL.to_string(), order[train_n..train_n + val_n].to_vec());
        splits.insert(TEST.to_string(), order[train_n + val_n..need].to_vec());
        concept.splits = splits;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub enum Violation {
    DuplicateConcept { concept: String },
    MissingFile { path: String },
    HashMismatch { path: String, expected: String, actual: String },
    UnknownImage { concept: String, image: String },
    SplitMemberNotInImages { concept: String, split: String, image: String },
    SplitOverlap { concept: String, image: String },
    RealWithSyntheticFields { path: String },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::DuplicateConcept { concept } => write!(f, "duplicate concept id `{concept}`"),
            Self::MissingFile { path } => write!(f, "missing file {path}"),
            Self::HashMismatch { path, expected, actual } => {
                write!(f, "hash mismatch for {path}: manifest {expected}, file {actual}")
            }
            Self::UnknownImage { concept, image } => write!(f, "`{concept}` lists unregistered image {image}"),
            Self::SplitMemberNotInImages { concept, split, image } => {
                write!(f, "`{concept}` {split} split holds {image}, which is not one of its images")
            }
            Self::SplitOverlap { concept, image } => write!(f, "`{concept}` has {image} in more than one split"),
            Self::RealWithSyntheticFields { path } => {
                write!(f, "real image {path} carries source features or a satisfaction score")
            }
        }
    }
}

/// Checks file presence, hashes, and manifest invariants. Empty means clean.
pub fn verify(manifest: &CorpusManifest, root: &Path) -> Vec<Violation> {
    let mut violations = Vec::new();
    let mut seen = BTreeSet::new();
    let registered: BTreeSet<(&str, &str)> =
        manifest.assets.iter().map(|a| (a.concept.as_str(), a.id.as_str())).collect();
    for concept in &manifest.concepts {
        if !seen.insert(concept.id.as_str()) {
            violations.push(Violation::DuplicateConcept { concept: concept.id.clone() });
        }
        let images: BTreeSet<&str> = concept.images.iter().map(String::as_str).collect();
        for image in &concept.images {
            if !registered.contains(&(concept.id.as_str(), image.as_str())) {
                violations.push(Violation::UnknownImage { concept: concept.id.clone(), image: image.clone() });
            }
        }
        let mut owner: HashMap<&str, &str> = HashMap::new();
        for (split, members) in &concept.splits {
            for image in members {
                if !images.contains(image.as_str()) {
                    violations.push(Violation::SplitMemberNotInImages {
                        concept: concept.id.clone(),
                        split: split.clone(),
                        image: image.clone(),
                    });
                }
                if owner.insert(image.as_str(), split.as_str()).is_some() {
                    violations.push(Violation::SplitOverlap { concept: concept.id.clone(), image: image.clone() });
                }
            }
        }
    }
    let file_checks: Vec<Option<Violation>> = manifest
        .assets
        .par_iter()
        .map(|asset| match fs::read(asset.full_path(root)) {
            Err(_) => Some(Violation::MissingFile { path: asset.path.clone() }),
            Ok(bytes) => {
                let actual = sha256_hex(&bytes);
                (actual != asset.id).then(|| Violation::HashMismatch {
                    path: asset.path.clone(),
                    expected: asset.id.clone(),
                    actual,
                })
            }
        })
        .collect();
    violations.extend(file_checks.into_iter().flatten());
    for asset in &manifest.assets {
        if asset.provenance == Provenance::Real && (!asset.source_features.is_empty() || asset.satisfaction.is_some()) {
            violations.push(Violation::RealWithSyntheticFields { path: asset.path.clone() });
        }
    }
    violations.sort();
    violations
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    seed: u64,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

fn tagged<T: Serialize>(tag: &str, value: &T) -> Result<Value, DatasetError> {
    let mut v = serde_json::to_value(value).map_err(RecordError::from)?;
    if let Value::Object(map) = &mut v {
        map.insert("record".into(), Value::String(tag.into()));
    }
    Ok(v)
}

impl CorpusManifest {
    pub fn concept(&self, id: &str) -> Option<&Concept> {
        self.concepts.iter().find(|c| c.id == id)
    }

    pub fn require_concept(&self, id: &str) -> Result<&Concept, DatasetError> {
        self.concept(id).ok_or_else(|| DatasetError::UnknownConcept(id.to_string()))
    }

    pub fn asset(&self, concept: &str, id: &str) -> Option<&ImageAsset> {
        self.assets.iter().find(|a| a.concept == concept && a.id == id)
    }

    /// Assets of one split, in split order.
    pub fn split_assets(&self, concept: &str, split: &str) -> Result<Vec<&ImageAsset>, DatasetError> {
        let c = self.require_concept(concept)?;
        c.split(split)
            .iter()
            .map(|id| {
                self.asset(concept, id)
                    .ok_or_else(|| DatasetError::Malformed(format!("`{concept}` references unregistered image {id}")))
            })
            .collect()
    }

    /// Puts concepts and assets in canonical order.
    pub fn canonicalize(&mut self) {
        self.concepts.sort_by(|a, b| a.id.cmp(&b.id));
        self.assets.sort_by(|a, b| (&a.concept, &a.id).cmp(&(&b.concept, &b.id)));
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>, DatasetError> {
        let mut c = self.clone();
        c.canonicalize();
        let mut rows = vec![tagged(
            "header",
            &Header { version: c.version, seed: c.seed, extra: c.header_extra.clone() },
        )?];
        for concept in &c.concepts {
            rows.push(tagged("concept", concept)?);
        }
        for asset in &c.assets {
            rows.push(tagged("asset", asset)?);
        }
        Ok(records::to_lines(&rows)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        Ok(records::write_atomic(path, &self.to_bytes()?)?)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let rows: Vec<Value> = records::read_lines(path)?;
        let mut rows = rows.into_iter();
        let header = match rows.next() {
            Some(Value::Object(mut map)) if map.get("record").and_then(Value::as_str) == Some("header") => {
                map.remove("record");
                serde_json::from_value::<Header>(Value::Object(map)).map_err(RecordError::from)?
            }
            _ => return Err(DatasetError::Malformed("first record must be the header".into())),
        };
        let mut manifest = CorpusManifest {
            version: header.version,
            seed: header.seed,
            concepts: Vec::new(),
            assets: Vec::new(),
            header_extra: header.extra,
        };
        for row in rows {
            let Value::Object(mut map) = row else {
                return Err(DatasetError::Malformed("record is not an object".into()));
            };
            let tag = map.remove("record");
            match tag.as_ref().and_then(Value::as_str) {
                Some("concept") => manifest
                    .concepts
                    .push(serde_json::from_value(Value::Object(map)).map_err(RecordError::from)?),
                Some("asset") => manifest
                    .assets
                    .push(serde_json::from_value(Value::Object(map)).map_err(RecordError::from)?),
                other => return Err(DatasetError::Malformed(format!("unexpected record type {other:?}"))),
            }
        }
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn write_concept(root: &Path, id: &str, n: usize) {
        let dir = root.join(id);
        fs::create_dir_all(&dir).unwrap();
        for i in 0..n {
            fs::write(dir.join(format!("{i:03}.jpg")), format!("{id}-{i}")).unwrap();
        }
    }

    fn corpus(concepts: &[(&str, usize)]) -> (tempfile::TempDir, CorpusManifest) {
        let dir = tempfile::tempdir().unwrap();
        for (id, n) in concepts {
            write_concept(dir.path(), id, *n);
        }
        let m = ingest(dir.path(), &IngestLayout::default(), 42).unwrap().manifest;
        (dir, m)
    }

    #[test]
    fn ingest_counts_concepts_and_assets() {
        let (_dir, m) = corpus(&[("a", 35), ("b", 35)]);
        assert_eq!(m.concepts.len(), 2);
        assert_eq!(m.assets.len(), 70);
        assert!(m.concepts.iter().all(|c| c.splits.is_empty()));
    }

    #[test]
    fn ingest_skips_empty_directory_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        write_concept(dir.path(), "a", 3);
        fs::create_dir_all(dir.path().join("empty")).unwrap();
        let out = ingest(dir.path(), &IngestLayout::default(), 1).unwrap();
        assert_eq!(out.manifest.concepts.len(), 1);
        assert_eq!(out.warnings, vec![IngestWarning::EmptyConcept { concept: "empty".into() }]);
    }

    #[test]
    fn ingest_dedups_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let c = dir.path().join("a");
        fs::create_dir_all(&c).unwrap();
        fs::write(c.join("x.jpg"), b"same").unwrap();
        fs::write(c.join("y.jpg"), b"same").unwrap();
        let out = ingest(dir.path(), &IngestLayout::default(), 1).unwrap();
        assert_eq!(out.manifest.assets.len(), 1);
        assert_eq!(out.manifest.assets[0].path, "a/x.jpg");
        assert!(matches!(out.warnings[0], IngestWarning::DuplicateImage { .. }));
    }

    #[test]
    fn ingest_reads_metadata_and_skips_synthetic_tree() {
        let dir = tempfile::tempdir().unwrap();
        write_concept(dir.path(), "lears_macaw", 2);
        write_concept(dir.path(), "_synthetic", 2);
        fs::write(
            dir.path().join("lears_macaw/concept.json"),
            r#"{"canonical_name":"Lear's Macaw","aliases":["Anodorhynchus leari"],"supercategory":"Birds"}"#,
        )
        .unwrap();
        let m = ingest(dir.path(), &IngestLayout::default(), 1).unwrap().manifest;
        assert_eq!(m.concepts.len(), 1);
        assert_eq!(m.concepts[0].canonical_name, "Lear's Macaw");
        assert_eq!(m.concepts[0].supercategory.as_deref(), Some("Birds"));
        assert_eq!(m.concepts[0].images.len(), 2);
    }

    #[cfg(unix)]
    #[test]
    fn ingest_unreadable_file_names_path() {
        use std::os::unix::fs::PermissionsExt;
        let dir = tempfile::tempdir().unwrap();
        write_concept(dir.path(), "a", 1);
        let file = dir.path().join("a/000.jpg");
        fs::set_permissions(&file, fs::Permissions::from_mode(0o000)).unwrap();
        if fs::read(&file).is_ok() {
            return; // running as root
        }
        let err = ingest(dir.path(), &IngestLayout::default(), 1).unwrap_err();
        assert!(err.to_string().contains("000.jpg"), "{err}");
    }

    #[test]
    fn split_5_15_15_disjoint() {
        let (_dir, m) = corpus(&[("a", 35), ("b", 35)]);
        let s = split(&m, 5, 15, 15).unwrap();
        for c in &s.concepts {
            assert_eq!(c.split(TRAIN).len(), 5);
            assert_eq!(c.split(VAL).len(), 15);
            assert_eq!(c.split(TEST).len(), 15);
            let all: BTreeSet<_> = c.splits.values().flatten().collect();
            assert_eq!(all.len(), 35);
        }
    }

    #[test]
    fn split_all_test() {
        let (_dir, m) = corpus(&[("a", 35)]);
        let s = split(&m, 0, 0, 35).unwrap();
        assert_eq!(s.concepts[0].split(TEST).len(), 35);
        assert!(s.concepts[0].split(TRAIN).is_empty());
    }

    #[test]
    fn split_too_few_lists_concepts_and_writes_nothing() {
        let (_dir, m) = corpus(&[("a", 35), ("b", 10), ("c", 3)]);
        match split(&m, 5, 15, 15) {
            Err(DatasetError::TooFewImages { concepts, .. }) => assert_eq!(concepts, vec!["b", "c"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn split_is_deterministic_and_nested_stable() {
        let (_dir, m) = corpus(&[("a", 35)]);
        let a = split(&m, 5, 15, 15).unwrap();
        let b = split(&m, 5, 15, 15).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
        let small = split(&m, 3, 5, 5).unwrap();
        assert_eq!(small.concepts[0].split(TRAIN), &a.concepts[0].split(TRAIN)[..3]);
    }

    #[test]
    fn verify_pristine_missing_and_altered() {
        let (dir, m) = corpus(&[("a", 4)]);
        let m = split(&m, 1, 1, 2).unwrap();
        assert!(verify(&m, dir.path()).is_empty());

        fs::remove_file(dir.path().join("a/000.jpg")).unwrap();
        let v = verify(&m, dir.path());
        assert_eq!(v, vec![Violation::MissingFile { path: "a/000.jpg".into() }]);

        fs::write(dir.path().join("a/000.jpg"), b"a-0").unwrap();
        fs::write(dir.path().join("a/001.jpg"), b"tampered").unwrap();
        let v = verify(&m, dir.path());
        assert_eq!(v.len(), 1);
        assert!(matches!(&v[0], Violation::HashMismatch { path, .. } if path == "a/001.jpg"));
    }

    #[test]
    fn verify_flags_split_overlap() {
        let (dir, m) = corpus(&[("a", 4)]);
        let mut m = split(&m, 1, 1, 2).unwrap();
        let first = m.concepts[0].split(TRAIN)[0].clone();
        m.concepts[0].splits.get_mut(TEST).unwrap().push(first);
        let v = verify(&m, dir.path());
        assert!(v.iter().any(|x| matches!(x, Violation::SplitOverlap { .. })));
    }

    #[test]
    fn manifest_round_trip_preserves_unknown_fields() {
        let (dir, m) = corpus(&[("a", 2)]);
        let path = dir.path().join("manifest.jsonl");
        m.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let first = text.lines().next().unwrap();
        assert!(first.contains("\"record\":\"header\""));
        let edited = text.replacen("\"record\":\"concept\"", "\"record\":\"concept\",\"license\":\"cc-by\"", 1);
        fs::write(&path, &edited).unwrap();
        let back = CorpusManifest::load(&path).unwrap();
        assert_eq!(back.concepts[0].extra.get("license"), Some(&Value::String("cc-by".into())));
        back.save(&path).unwrap();
        assert!(fs::read_to_string(&path).unwrap().contains("\"license\":\"cc-by\""));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn split_sizes_and_disjointness(total in 1usize..40, a in 0usize..15, b in 0usize..15, seed in any::<u64>()) {
            let c = a.min(total);
            let v = b.min(total - c);
            let t = total - c - v;
            let images: Vec<String> = (0..total).map(|i| format!("{i:04x}")).collect();
            let m = CorpusManifest {
                version: 1,
                seed,
                concepts: vec![Concept {
                    id: "x".into(),
                    canonical_name: "x".into(),
                    aliases: vec![],
                    supercategory: None,
                    images: images.clone(),
                    splits: BTreeMap::new(),
                    extra: Map::new(),
                }],
                assets: vec![],
                header_extra: Map::new(),
            };
            let s = split(&m, c, v, t).unwrap();
            let con = &s.concepts[0];
            prop_assert_eq!(con.split(TRAIN).len(), c);
            prop_assert_eq!(con.split(VAL).len(), v);
            prop_assert_eq!(con.split(TEST).len(), t);
            let all: BTreeSet<_> = con.splits.values().flatten().cloned().collect();
            prop_assert_eq!(all.len(), total);
            prop_assert!(all.iter().all(|i| images.contains(i)));
        }
    }
}
