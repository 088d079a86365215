//! Per-output run metadata, written next to each artifact as
//! `<file>.meta.json`.
//!
//! Paths are stored relative to the metadata file so that a tree moved or
//! produced elsewhere yields identical metadata. Nothing time-dependent is
//! recorded.

use std::collections::BTreeMap;
use std::path::{Component, Path, PathBuf};

use anyhow::{bail, Context, Result};
use contrastaug_core::gateway::{Gateway, Role};
use contrastaug_core::records::{self, sha256_file};
use contrastaug_core::templates::{self, Template, TEMPLATE_VERSION};
use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FileRef {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunMeta {
    pub stage: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Corpus root relative to the metadata file, when the stage reads it.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub corpus: Option<String>,
    pub inputs: Vec<FileRef>,
    pub outputs: Vec<FileRef>,
    pub params: Value,
    pub models: BTreeMap<String, String>,
    pub template_version: u32,
    pub templates: BTreeMap<String, String>,
    pub warnings: Vec<String>,
}

impl RunMeta {
    pub fn new(stage: &str, seed: Option<u64>, params: Value) -> Self {
        Self {
            stage: stage.to_string(),
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            corpus: None,
            inputs: Vec::new(),
            outputs: Vec::new(),
            params,
            models: BTreeMap::new(),
            template_version: TEMPLATE_VERSION,
            templates: BTreeMap::new(),
            warnings: Vec::new(),
        }
    }

    pub fn models(mut self, gateway: &Gateway, roles: &[Role]) -> Self {
        for role in roles {
            if let Some(id) = gateway.model_id(*role) {
                self.models.insert(role.as_str().to_string(), id.to_string());
            }
        }
        self
    }

    pub fn templates(mut self, used: &[Template]) -> Self {
        self.templates = templates::hashes(used);
        self
    }

    pub fn input(mut self, path: &Path) -> Self {
        self.inputs.push(FileRef { path: path.display().to_string(), sha256: String::new() });
        self
    }

    pub fn corpus(mut self, root: &Path) -> Self {
        self.corpus = Some(root.display().to_string());
        self
    }

    pub fn warn(&mut self, w: impl Into<String>) {
        self.warnings.push(w.into());
    }

    /// Hashes inputs and outputs, relativizes paths and writes
    /// `<primary>.meta.json`. `outputs` must already be on disk.
    pub fn write(mut self, primary: &Path, extra_outputs: &[&Path]) -> Result<PathBuf> {
        let meta_path = meta_path(primary);
        let base = absolute(meta_path.parent().unwrap_or(Path::new("")))?;
        for r in &mut self.inputs {
            let p = PathBuf::from(&r.path);
            r.sha256 = sha256_file(&p)?;
            r.path = relative_to(&absolute(&p)?, &base);
        }
        for p in std::iter::once(primary).chain(extra_outputs.iter().copied()) {
            self.outputs.push(FileRef { path: relative_to(&absolute(p)?, &base), sha256: sha256_file(p)? });
        }
        if let Some(c) = &self.corpus {
            self.corpus = Some(relative_to(&absolute(Path::new(c))?, &base));
        }
        records::write_json(&meta_path, &self)?;
        Ok(meta_path)
    }
}

pub fn meta_path(primary: &Path) -> PathBuf {
    let mut name = primary.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".meta.json");
    primary.with_file_name(name)
}

fn absolute(p: &Path) -> Result<PathBuf> {
    let p = if p.as_os_str().is_empty() { Path::new(".") } else { p };
    let abs = std::path::absolute(p).with_context(|| format!("cannot resolve {}", p.display()))?;
    let mut out = PathBuf::new();
    for c in abs.components() {
        match c {
            Component::ParentDir => {
                out.pop();
            }
            Component::CurDir => {}
            other => out.push(other),
        }
    }
    Ok(out)
}

/// Lexical relative path from directory `base` to `path`, `/`-separated.
pub fn relative_to(path: &Path, base: &Path) -> String {
    let p: Vec<Component> = path.components().collect();
    let b: Vec<Component> = base.components().collect();
    let common = p.iter().zip(&b).take_while(|(x, y)| x == y).count();
    let mut parts: Vec<String> = vec!["..".to_string(); b.len() - common];
    parts.extend(p[common..].iter().map(|c| c.as_os_str().to_string_lossy().into_owned()));
    if parts.is_empty() {
        ".".to_string()
    } else {
        parts.join("/")
    }
}

/// Fails with a message naming `path` when an upstream artifact is absent.
pub fn require(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("missing input: {what} `{}` does not exist (run the upstream stage first)", path.display());
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_paths() {
        assert_eq!(relative_to(Path::new("/a/b/c.txt"), Path::new("/a/b")), "c.txt");
        assert_eq!(relative_to(Path::new("/a/x/c.txt"), Path::new("/a/b")), "../x/c.txt");
        assert_eq!(relative_to(Path::new("/a/b"), Path::new("/a/b")), ".");
        assert_eq!(meta_path(Path::new("out/pairs.jsonl")), PathBuf::from("out/pairs.jsonl.meta.json"));
    }

    #[test]
    fn require_names_the_file() {
        let err = require(Path::new("/nonexistent/features.jsonl"), "features").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/features.jsonl"), "{err}");
    }
}
