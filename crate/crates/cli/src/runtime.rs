//! Resolved global settings and backend construction shared by all stages.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use anyhow::{Context, Result};
use clap::Args;
use contrastaug_core::dataset::CorpusManifest;
use contrastaug_core::gateway::http::HttpBackend;
use contrastaug_core::gateway::mock::{MockBackend, MockConcept, MockWorld};
use contrastaug_core::gateway::{BackendConfig, Cache, DecodeParams, Gateway, Role};

use crate::config::RunConfig;
use crate::meta::require;

/// File in the corpus root describing the mock world, if any.
pub const MOCK_WORLD_FILE: &str = "mock_world.json";

#[derive(Debug, Clone, Args)]
pub struct ManifestArgs {
    /// Corpus manifest (record stream).
    #[arg(long)]
    pub manifest: PathBuf,
    /// Corpus root; defaults to the config's `corpus`, then the manifest's directory.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
}

impl ManifestArgs {
    pub fn new(manifest: impl Into<PathBuf>) -> Self {
        Self { manifest: manifest.into(), corpus: None }
    }
}

pub struct Runtime {
    pub config: RunConfig,
    seed: Option<u64>,
    pub mock: bool,
    pub cache_dir: Option<PathBuf>,
    gateway: Mutex<Option<(PathBuf, Arc<Gateway>)>>,
}

impl Runtime {
    pub fn new(config: RunConfig, seed: Option<u64>, mock: bool, cache_dir: Option<PathBuf>) -> Self {
        let mock = mock || config.mock;
        let cache_dir = cache_dir.or_else(|| config.cache_dir.clone());
        let seed = seed.or(config.seed);
        Self { config, seed, mock, cache_dir, gateway: Mutex::new(None) }
    }

    /// The global seed, or `fallback` (normally the manifest seed).
    pub fn seed_or(&self, fallback: u64) -> u64 {
        self.seed.unwrap_or(fallback)
    }

    pub fn decode(&self) -> DecodeParams {
        self.config.decode.clone().unwrap_or_default()
    }

    pub fn load_manifest(&self, args: &ManifestArgs) -> Result<(CorpusManifest, PathBuf)> {
        require(&args.manifest, "manifest")?;
        let manifest = CorpusManifest::load(&args.manifest)?;
        let corpus = args
            .corpus
            .clone()
            .or_else(|| self.config.corpus.clone())
            .unwrap_or_else(|| match args.manifest.parent() {
                Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
                _ => PathBuf::from("."),
            });
        Ok((manifest, corpus))
    }

    /// One gateway per corpus root, reused across stages of a process.
    pub fn gateway(&self, corpus: &Path, manifest: &CorpusManifest) -> Result<Arc<Gateway>> {
        let mut slot = self.gateway.lock().expect("gateway slot");
        if let Some((root, g)) = slot.as_ref() {
            if root == corpus {
                return Ok(g.clone());
            }
        }
        let cache = match &self.cache_dir {
            Some(dir) => Cache::on_disk(dir),
            None => Cache::in_memory(),
        };
        let mut gateway = Gateway::new(cache);
        if self.mock {
            let world = mock_world(corpus, manifest)?;
            let backend = Arc::new(MockBackend::new(self.seed_or(manifest.seed), world));
            for role in Role::ALL {
                gateway = gateway.with_backend(BackendConfig::new(role, format!("mock-{role}")), backend.clone())?;
            }
        } else {
            for cfg in &self.config.backends {
                let backend = HttpBackend::new(cfg.clone())?;
                gateway = gateway.with_backend(cfg.clone(), Arc::new(backend))?;
            }
        }
        let gateway = Arc::new(gateway);
        *slot = Some((corpus.to_path_buf(), gateway.clone()));
        Ok(gateway)
    }
}

/// Reads `<corpus>/mock_world.json`, or derives a world in which every
/// manifest concept is novel to the mock vision model.
pub fn mock_world(corpus: &Path, manifest: &CorpusManifest) -> Result<MockWorld> {
    let path = corpus.join(MOCK_WORLD_FILE);
    if path.is_file() {
        return MockWorld::load(&path).with_context(|| format!("invalid mock world {}", path.display()));
    }
    let concepts = manifest
        .concepts
        .iter()
        .map(|c| MockConcept {
            id: c.id.clone(),
            name: c.canonical_name.clone(),
            novel: true,
            supercategory: c.supercategory.clone(),
        })
        .collect();
    Ok(MockWorld::new(concepts))
}

/// `name` in the directory of `path`.
pub fn sibling(path: &Path, name: &str) -> PathBuf {
    path.with_file_name(name)
}
