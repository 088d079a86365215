//! Run configuration: one TOML file with `${VAR}` interpolation.
//!
//! Every stage section is optional; a command-line flag overrides the file,
//! and the file overrides the built-in default. Effective values are written
//! to each stage's metadata.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use anyhow::{bail, Context, Result};
use contrastaug_core::gateway::{BackendConfig, DecodeParams};
use regex::Regex;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    pub cache_dir: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub mock: bool,
    pub backends: Vec<BackendConfig>,
    pub decode: Option<DecodeParams>,
    pub discovery: DiscoverySection,
    pub extract: ExtractSection,
    pub filter: FilterSection,
    pub augment: AugmentSection,
    pub evaluate: EvaluateSection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscoverySection {
    pub subset_size: Option<usize>,
    pub threshold: Option<f64>,
    pub images_per_concept: Option<usize>,
    pub rounds: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub max_features: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    pub d_threshold: Option<f64>,
    pub top_k: Option<usize>,
    pub max_pairs: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentSection {
    pub n: Option<usize>,
    pub confidence_threshold: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    pub option_pool: Option<String>,
}

fn var_regex() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}").expect("valid regex"))
}

/// Replaces `${NAME}` with the value of the environment variable `NAME`.
pub fn interpolate(text: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let mut missing = Vec::new();
    let out = var_regex().replace_all(text, |c: &regex::Captures| match lookup(&c[1]) {
        Some(v) => v,
        None => {
            missing.push(c[1].to_string());
            String::new()
        }
    });
    if !missing.is_empty() {
        bail!("unset environment variables in config: {}", missing.join(", "));
    }
    Ok(out.into_owned())
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let text = interpolate(text, |k| std::env::var(k).ok())?;
        Ok(toml::from_str(&text)?)
    }

    /// Loads a config file. Relative `corpus` and `cache_dir` are resolved
    /// against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        let mut cfg = Self::parse(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.corpus, &mut cfg.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interpolation_substitutes_and_reports_missing() {
        let lookup = |k: &str| (k == "KEY").then(|| "secret".to_string());
        assert_eq!(interpolate("a=${KEY} b=$KEY", lookup).unwrap(), "a=secret b=$KEY");
        let err = interpolate("${NOPE} ${ALSO}", lookup).unwrap_err().to_string();
        assert!(err.contains("NOPE") && err.contains("ALSO"), "{err}");
    }

    #[test]
    fn parses_sections_and_backends() {
        let cfg = RunConfig::parse(
            r#"
seed = 11
[[backends]]
role = "chat"
base_url = "https://example.invalid/v1"
model_id = "chat-model"
api_key_env = "CHAT_KEY"

[filter]
d_threshold = 0.65
"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(11));
        assert_eq!(cfg.backends.len(), 1);
        assert_eq!(cfg.backends[0].max_concurrent, BackendConfig::new(cfg.backends[0].role, "x").max_concurrent);
        assert_eq!(cfg.filter.d_threshold, Some(0.65));
        assert_eq!(cfg.filter.top_k, None);
        assert!(RunConfig::parse("unknown_key = 1").is_err());
    }
}
