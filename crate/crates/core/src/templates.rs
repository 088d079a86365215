//! Versioned prompt templates.
//!
//! Templates are plain text files compiled into the binary. Placeholders are
//! `{name}`; rendering fails if a placeholder is left unfilled. The SHA-256
//! of the template text is recorded in run metadata.

use std::collections::BTreeMap;

use crate::records::sha256_hex;

pub const TEMPLATE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Template {
    pub name: &'static str,
    pub text: &'static str,
}

macro_rules! template {
    ($ident:ident, $name:literal) => {
        pub const $ident: Template = Template { name: $name, text: include_str!(concat!("../templates/", $name, ".txt")) };
    };
}

template!(TEXTUAL, "textual");
template!(TEXTUAL_CONTRASTIVE, "textual_contrastive");
template!(VISUAL, "visual");
template!(VISUAL_CONTRASTIVE, "visual_contrastive");
template!(MERGE, "merge");
template!(PROBE, "probe");
template!(VERIFY, "verify");
template!(VERIFY_CONFIDENCE, "verify_confidence");
template!(GENERATE, "generate");
template!(EVALUATE, "evaluate");
template!(EVALUATE_FEATURES, "evaluate_features");
template!(FINETUNE_INSTRUCTION, "finetune_instruction");

pub const ALL: &[Template] = &[
    TEXTUAL,
    TEXTUAL_CONTRASTIVE,
    VISUAL,
    VISUAL_CONTRASTIVE,
    MERGE,
    PROBE,
    VERIFY,
    VERIFY_CONFIDENCE,
    GENERATE,
    EVALUATE,
    EVALUATE_FEATURES,
    FINETUNE_INSTRUCTION,
];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("template `{template}` has unfilled placeholder `{placeholder}`")]
pub struct RenderError {
    pub template: &'static str,
    pub placeholder: String,
}

impl Template {
    pub fn hash(&self) -> String {
        sha256_hex(self.text.as_bytes())
    }

    /// Substitutes `{key}` placeholders in a single pass, so values that
    /// themselves contain braces are left alone.
    pub fn render(&self, vars: &[(&str, &str)]) -> Result<String, RenderError> {
        let mut out = String::with_capacity(self.text.len() + 64);
        let mut rest = self.text;
        while let Some(start) = rest.find('{') {
            out.push_str(&rest[..start]);
            let after = &rest[start + 1..];
            match after.find('}') {
                Some(end) if is_placeholder(&after[..end]) => {
                    let key = &after[..end];
                    let value = vars.iter().find(|(k, _)| *k == key).map(|(_, v)| *v).ok_or_else(|| {
                        RenderError { template: self.name, placeholder: key.to_string() }
                    })?;
                    out.push_str(value);
                    rest = &after[end + 1..];
                }
                _ => {
                    out.push('{');
                    rest = after;
                }
            }
        }
        out.push_str(rest);
        Ok(out)
    }
}

fn is_placeholder(s: &str) -> bool {
    !s.is_empty() && s.chars().all(|c| c.is_ascii_lowercase() || c == '_')
}

/// Name → hash for a set of templates, for run metadata.
pub fn hashes(templates: &[Template]) -> BTreeMap<String, String> {
    templates.iter().map(|t| (t.name.to_string(), t.hash())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_fills_and_rejects_missing() {
        let out = VERIFY.render(&[("feature", "red {crest}")]).unwrap();
        assert!(out.contains("\"red {crest}\""));
        let err = TEXTUAL.render(&[("target", "x")]).unwrap_err();
        assert_eq!(err.placeholder, "max_features");
    }

    #[test]
    fn every_template_has_distinct_hash() {
        let h = hashes(ALL);
        assert_eq!(h.len(), ALL.len());
        let mut values: Vec<_> = h.values().collect();
        values.dedup();
        assert_eq!(values.len(), ALL.len());
    }
}
