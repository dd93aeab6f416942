//! Prompt templates shipped with the crate.
//!
//! Templates use `{Name}` placeholders. Every template has a fixed,
//! documented placeholder set and loading a template whose placeholders
//! differ from that set is an error. Substitution is single pass, so values
//! that happen to contain `{Name}` are inserted literally.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PromptError {
    #[error("template {name}: expected placeholders {expected:?}, found {found:?}")]
    PlaceholderMismatch { name: &'static str, expected: Vec<String>, found: Vec<String> },
    #[error("template {name}: no value supplied for {{{placeholder}}}")]
    MissingValue { name: &'static str, placeholder: String },
    #[error("reading template {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn is_placeholder_name(s: &str) -> bool {
    let mut chars = s.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic()) && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Splits a template into literal text and placeholder names, in order.
fn segments(text: &str) -> Vec<Segment<'_>> {
    let mut out = Vec::new();
    let mut rest = text;
    while let Some(open) = rest.find('{') {
        let after = &rest[open + 1..];
        match after.find('}') {
            Some(close) if is_placeholder_name(&after[..close]) => {
                out.push(Segment::Literal(&rest[..open]));
                out.push(Segment::Placeholder(&after[..close]));
                rest = &after[close + 1..];
            }
            _ => {
                out.push(Segment::Literal(&rest[..=open]));
                rest = after;
            }
        }
    }
    out.push(Segment::Literal(rest));
    out
}

enum Segment<'a> {
    Literal(&'a str),
    Placeholder(&'a str),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Template {
    name: &'static str,
    text: String,
}

impl Template {
    /// Builds a template and checks its placeholder set against `expected`.
    pub fn new(name: &'static str, text: impl Into<String>, expected: &[&str]) -> Result<Self, PromptError> {
        let text = text.into();
        let found: BTreeSet<String> = segments(&text)
            .into_iter()
            .filter_map(|s| match s {
                Segment::Placeholder(p) => Some(p.to_owned()),
                Segment::Literal(_) => None,
            })
            .collect();
        let expected_set: BTreeSet<String> = expected.iter().map(|s| s.to_string()).collect();
        if found != expected_set {
            return Err(PromptError::PlaceholderMismatch {
                name,
                expected: expected_set.into_iter().collect(),
                found: found.into_iter().collect(),
            });
        }
        Ok(Self { name, text })
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn render(&self, values: &[(&str, &str)]) -> Result<String, PromptError> {
        let mut out = String::with_capacity(self.text.len());
        for seg in segments(&self.text) {
            match seg {
                Segment::Literal(s) => out.push_str(s),
                Segment::Placeholder(p) => {
                    let value = values
                        .iter()
                        .find(|(k, _)| *k == p)
                        .map(|(_, v)| *v)
                        .ok_or_else(|| PromptError::MissingValue { name: self.name, placeholder: p.to_owned() })?;
                    out.push_str(value);
                }
            }
        }
        Ok(out)
    }
}

pub const ORTE_FILE: &str = "orte_initial.txt";
pub const KR_FILE: &str = "knowledge_restoration.txt";
pub const NLI_FILE: &str = "nli.txt";
pub const FEEDBACK_FILE: &str = "feedback.txt";
pub const GUIDANCE_FILE: &str = "guidance.txt";
pub const UPDATE_FILE: &str = "update.txt";
pub const RC_FILE: &str = "rc_decision.txt";

pub const KR_PLACEHOLDERS: &[&str] = &["Subject", "Relation", "Object"];
pub const NLI_PLACEHOLDERS: &[&str] = &["Premise", "Hypothesis"];
pub const FEEDBACK_PLACEHOLDERS: &[&str] = &["Triplets", "Metrics"];
pub const GUIDANCE_PLACEHOLDERS: &[&str] = &["Prompt", "Sentence", "Triplets", "Feedback"];
pub const UPDATE_PLACEHOLDERS: &[&str] = &["Prompt", "Context"];
pub const RC_PLACEHOLDERS: &[&str] = &["Text", "Triplet", "QueryRelation", "QuerySchema", "Choices"];

/// The full set of prompts the pipeline needs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptAssets {
    pub initial_orte_prompt: String,
    pub kr: Template,
    pub nli: Template,
    pub feedback: Template,
    pub guidance: Template,
    pub update: Template,
    pub rc_decision: Template,
}

impl PromptAssets {
    fn from_sources(source: impl Fn(&'static str) -> Result<String, PromptError>) -> Result<Self, PromptError> {
        Ok(Self {
            initial_orte_prompt: source(ORTE_FILE)?.trim().to_owned(),
            kr: Template::new("knowledge_restoration", source(KR_FILE)?.trim_end(), KR_PLACEHOLDERS)?,
            nli: Template::new("nli", source(NLI_FILE)?.trim_end(), NLI_PLACEHOLDERS)?,
            feedback: Template::new("feedback", source(FEEDBACK_FILE)?.trim_end(), FEEDBACK_PLACEHOLDERS)?,
            guidance: Template::new("guidance", source(GUIDANCE_FILE)?.trim_end(), GUIDANCE_PLACEHOLDERS)?,
            update: Template::new("update", source(UPDATE_FILE)?.trim_end(), UPDATE_PLACEHOLDERS)?,
            rc_decision: Template::new("rc_decision", source(RC_FILE)?.trim_end(), RC_PLACEHOLDERS)?,
        })
    }

    pub fn builtin() -> Self {
        Self::from_sources(|name| Ok(builtin_source(name).to_owned())).expect("builtin prompt templates are valid")
    }

    /// Loads templates from `dir`. Files missing from the directory fall
    /// back to the builtin version.
    pub fn from_dir(dir: &Path) -> Result<Self, PromptError> {
        Self::from_sources(|name| {
            let path = dir.join(name);
            if path.exists() {
                fs::read_to_string(&path).map_err(|source| PromptError::Io { path: path.display().to_string(), source })
            } else {
                Ok(builtin_source(name).to_owned())
            }
        })
    }
}

impl Default for PromptAssets {
    fn default() -> Self {
        Self::builtin()
    }
}

fn builtin_source(name: &str) -> &'static str {
    match name {
        ORTE_FILE => include_str!("../prompts/orte_initial.txt"),
        KR_FILE => include_str!("../prompts/knowledge_restoration.txt"),
        NLI_FILE => include_str!("../prompts/nli.txt"),
        FEEDBACK_FILE => include_str!("../prompts/feedback.txt"),
        GUIDANCE_FILE => include_str!("../prompts/guidance.txt"),
        UPDATE_FILE => include_str!("../prompts/update.txt"),
        RC_FILE => include_str!("../prompts/rc_decision.txt"),
        other => unreachable!("unknown prompt asset {other}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_assets_validate() {
        let assets = PromptAssets::builtin();
        assert!(assets
            .initial_orte_prompt
            .starts_with("Your task is to transform the given text into a semantic graph"));
        assert!(assets.nli.text().contains("\"label\""));
    }

    #[test]
    fn placeholder_mismatch_is_rejected() {
        let err = Template::new("feedback", "Given {Triplets} only", FEEDBACK_PLACEHOLDERS).unwrap_err();
        assert!(matches!(err, PromptError::PlaceholderMismatch { .. }));
        let err = Template::new("feedback", "{Triplets} {Metrics} {Extra}", FEEDBACK_PLACEHOLDERS).unwrap_err();
        assert!(matches!(err, PromptError::PlaceholderMismatch { .. }));
    }

    #[test]
    fn json_braces_are_not_placeholders() {
        let t = Template::new("x", "{\n \"label\": 1 }\n{A}", &["A"]).unwrap();
        assert_eq!(t.render(&[("A", "v")]).unwrap(), "{\n \"label\": 1 }\nv");
    }

    #[test]
    fn substitution_is_single_pass() {
        let t = Template::new("x", "{A}-{B}", &["A", "B"]).unwrap();
        assert_eq!(t.render(&[("A", "{B}"), ("B", "b")]).unwrap(), "{B}-b");
        assert!(matches!(t.render(&[("A", "a")]), Err(PromptError::MissingValue { .. })));
    }

    #[test]
    fn from_dir_overrides_and_validates() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(ORTE_FILE), "Custom prompt\n").unwrap();
        let assets = PromptAssets::from_dir(dir.path()).unwrap();
        assert_eq!(assets.initial_orte_prompt, "Custom prompt");
        fs::write(dir.path().join(UPDATE_FILE), "no placeholders").unwrap();
        assert!(PromptAssets::from_dir(dir.path()).is_err());
    }
}
