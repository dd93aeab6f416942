//! Memory-backed relation canonicalization.
//!
//! Each extracted relation is described by a schema: its restored sentence
//! with the subject and object masked. The schema is scored against every
//! relation already in memory, the best `K` candidates are offered to a
//! decision function, and the relation is either mapped onto the chosen
//! candidate or added to memory as a new canonical relation.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, RetryPolicy, Role, TransportError};
use crate::model::{CanonicalTriplet, SentenceRecord, Triplet};
use crate::prompts::{PromptAssets, PromptError};
use crate::util::write_atomic;

pub const SUBJECT_MASK: &str = "[SUBJECT]";
pub const OBJECT_MASK: &str = "[OBJECT]";
pub const DEFAULT_TOP_K: usize = 5;
const SEED_PROVENANCE: &str = "seed";

#[derive(Debug, Error)]
pub enum MemoryError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Json { path: PathBuf, source: serde_json::Error },
    #[error("seed file line {line}: {reason}")]
    Seed { line: usize, reason: String },
    #[error("relation {0:?} is already in memory")]
    Duplicate(String),
    #[error("schema text must contain {SUBJECT_MASK} and {OBJECT_MASK} exactly once: {0:?}")]
    InvalidSchema(String),
}

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("remote scorer unavailable after {attempts} attempts: {reason}")]
    Unavailable { attempts: u32, reason: String },
    #[error("remote scorer returned an invalid response: {0}")]
    InvalidResponse(String),
}

#[derive(Debug, Error)]
pub enum CanonError {
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationSchema {
    pub relation: String,
    pub schema_text: String,
    pub created_at_sentence: String,
    pub use_count: u64,
}

fn valid_schema_text(text: &str) -> bool {
    text.matches(SUBJECT_MASK).count() == 1 && text.matches(OBJECT_MASK).count() == 1
}

/// Canonical relations discovered so far, in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SchemaMemory {
    entries: Vec<RelationSchema>,
}

impl SchemaMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[RelationSchema] {
        &self.entries
    }

    /// Case-insensitive lookup by relation name.
    pub fn get(&self, relation: &str) -> Option<&RelationSchema> {
        self.position(relation).map(|i| &self.entries[i])
    }

    fn position(&self, relation: &str) -> Option<usize> {
        let wanted = relation.to_lowercase();
        self.entries.iter().position(|e| e.relation.to_lowercase() == wanted)
    }

    pub fn add(&mut self, schema: RelationSchema) -> Result<(), MemoryError> {
        if self.position(&schema.relation).is_some() {
            return Err(MemoryError::Duplicate(schema.relation));
        }
        if !valid_schema_text(&schema.schema_text) {
            return Err(MemoryError::InvalidSchema(schema.schema_text));
        }
        self.entries.push(schema);
        Ok(())
    }

    /// Increments the use count and returns the stored relation name.
    pub fn record_use(&mut self, relation: &str) -> Option<&str> {
        let i = self.position(relation)?;
        self.entries[i].use_count += 1;
        Some(&self.entries[i].relation)
    }

    fn from_entries(entries: Vec<RelationSchema>) -> Result<Self, MemoryError> {
        let mut memory = Self::new();
        for entry in entries {
            memory.add(entry)?;
        }
        Ok(memory)
    }

    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(&self.entries).expect("memory serializes");
        out.push('\n');
        out
    }

    pub fn save(&self, path: &Path) -> Result<(), MemoryError> {
        write_atomic(path, self.to_json().as_bytes())
            .map_err(|source| MemoryError::Io { path: path.to_owned(), source })
    }

    pub fn load(path: &Path) -> Result<Self, MemoryError> {
        let text = std::fs::read_to_string(path).map_err(|source| MemoryError::Io { path: path.to_owned(), source })?;
        let entries: Vec<RelationSchema> =
            serde_json::from_str(&text).map_err(|source| MemoryError::Json { path: path.to_owned(), source })?;
        Self::from_entries(entries)
    }

    /// Parses a seed ontology: one `relation<TAB>schema text` per line,
    /// blank lines and `#` comments ignored.
    pub fn parse_seed(text: &str) -> Result<Self, MemoryError> {
        let mut memory = Self::new();
        for (i, line) in text.lines().enumerate() {
            let seed_err = |reason: String| MemoryError::Seed { line: i + 1, reason };
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let (relation, schema) = line
                .split_once('\t')
                .ok_or_else(|| seed_err("expected relation and schema separated by a tab".into()))?;
            let (relation, schema) = (relation.trim(), schema.trim());
            if relation.is_empty() {
                return Err(seed_err("empty relation name".into()));
            }
            memory
                .add(RelationSchema {
                    relation: relation.to_owned(),
                    schema_text: schema.to_owned(),
                    created_at_sentence: SEED_PROVENANCE.to_owned(),
                    use_count: 0,
                })
                .map_err(|e| seed_err(e.to_string()))?;
        }
        Ok(memory)
    }

    pub fn load_seed(path: &Path) -> Result<Self, MemoryError> {
        let text = std::fs::read_to_string(path).map_err(|source| MemoryError::Io { path: path.to_owned(), source })?;
        Self::parse_seed(&text)
    }
}

/// Byte range of the first case-insensitive occurrence of `needle` that does
/// not overlap `skip`.
fn find_case_insensitive(hay: &str, needle: &str, skip: Option<(usize, usize)>) -> Option<(usize, usize)> {
    let needle: Vec<char> = needle.chars().flat_map(char::to_lowercase).collect();
    if needle.is_empty() {
        return None;
    }
    for (start, _) in hay.char_indices() {
        let mut lowered = hay[start..].char_indices().flat_map(|(i, c)| c.to_lowercase().map(move |l| (i, c, l)));
        let mut end = None;
        let mut matched = 0;
        for (i, c, l) in lowered.by_ref() {
            if l != needle[matched] {
                break;
            }
            matched += 1;
            if matched == needle.len() {
                end = Some(start + i + c.len_utf8());
                break;
            }
        }
        if let Some(end) = end {
            // Partial matches of a multi-char lowercase expansion are not split.
            let overlaps = skip.is_some_and(|(s, e)| start < e && s < end);
            if !overlaps && hay.is_char_boundary(end) {
                return Some((start, end));
            }
        }
    }
    None
}

/// Replaces the subject and object in a restored sentence with mask tokens.
///
/// The first occurrence of each entity is masked, subject first. An entity
/// that cannot be found is appended as a suffix, separated by a spaced dash,
/// so the result always carries both tokens exactly once.
pub fn mask_entities(restored: &str, subject: &str, object: &str) -> String {
    assert!(!restored.trim().is_empty(), "restored sentence must not be empty");
    let mut text = restored.replace(SUBJECT_MASK, "SUBJECT").replace(OBJECT_MASK, "OBJECT");
    let mut suffix = String::new();

    let subject_range = match find_case_insensitive(&text, subject, None) {
        Some((s, e)) => {
            text.replace_range(s..e, SUBJECT_MASK);
            Some((s, s + SUBJECT_MASK.len()))
        }
        None => {
            suffix.push_str(" \u{2014} ");
            suffix.push_str(SUBJECT_MASK);
            None
        }
    };
    match find_case_insensitive(&text, object, subject_range) {
        Some((s, e)) => text.replace_range(s..e, OBJECT_MASK),
        None => {
            suffix.push_str(" \u{2014} ");
            suffix.push_str(OBJECT_MASK);
        }
    }
    text.push_str(&suffix);
    text
}

fn trigrams(s: &str) -> HashSet<[char; 3]> {
    let chars: Vec<char> = s.chars().flat_map(char::to_lowercase).collect();
    chars.windows(3).map(|w| [w[0], w[1], w[2]]).collect()
}

/// Dice coefficient over the character trigram sets of the lowercased inputs.
pub fn lexical_fallback_score(a: &str, b: &str) -> f64 {
    if a.to_lowercase() == b.to_lowercase() {
        return 1.0;
    }
    let (ta, tb) = (trigrams(a), trigrams(b));
    if ta.is_empty() || tb.is_empty() {
        return 0.0;
    }
    let shared = ta.intersection(&tb).count();
    2.0 * shared as f64 / (ta.len() + tb.len()) as f64
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    query: &'a str,
    candidates: &'a [&'a str],
}

#[derive(Deserialize)]
struct ScoreResponse {
    scores: Vec<f64>,
}

/// Client for a cross-encoder scoring service (`POST {base}/score`).
#[derive(Debug, Clone)]
pub struct RemoteScorer {
    url: String,
    agent: ureq::Agent,
    retry: RetryPolicy,
}

impl RemoteScorer {
    pub const TIMEOUT: Duration = Duration::from_secs(10);

    pub fn new(base_url: &str) -> Self {
        let base = base_url.trim_end_matches('/');
        let url = if base.ends_with("/score") { base.to_owned() } else { format!("{base}/score") };
        Self {
            url,
            agent: ureq::AgentBuilder::new().timeout(Self::TIMEOUT).build(),
            retry: RetryPolicy { max_attempts: 3, ..RetryPolicy::default() },
        }
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    fn post(&self, body: &ScoreRequest<'_>) -> Result<ScoreResponse, TransportError> {
        match self.agent.post(&self.url).send_json(body) {
            Ok(resp) => {
                resp.into_json::<ScoreResponse>().map_err(|e| TransportError::Fatal(format!("undecodable body: {e}")))
            }
            Err(ureq::Error::Status(code, _)) if code == 429 || code >= 500 => {
                Err(TransportError::Transient(format!("HTTP {code}")))
            }
            Err(ureq::Error::Status(code, _)) => Err(TransportError::Fatal(format!("HTTP {code}"))),
            Err(e) => Err(TransportError::Transient(e.to_string())),
        }
    }

    pub fn score(&self, query: &str, candidates: &[&str]) -> Result<Vec<f64>, ScorerError> {
        if candidates.is_empty() {
            return Ok(Vec::new());
        }
        let body = ScoreRequest { query, candidates };
        let response = self
            .retry
            .run(|| self.post(&body))
            .map_err(|e| ScorerError::Unavailable { attempts: self.retry.max_attempts, reason: e.to_string() })?;
        if response.scores.len() != candidates.len() {
            return Err(ScorerError::InvalidResponse(format!(
                "{} scores for {} candidates",
                response.scores.len(),
                candidates.len()
            )));
        }
        if let Some(bad) = response.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
            return Err(ScorerError::InvalidResponse(format!("score {bad} outside [0, 1]")));
        }
        Ok(response.scores)
    }
}

#[derive(Debug, Clone)]
pub enum ScorerBackend {
    Lexical,
    Remote(RemoteScorer),
}

impl ScorerBackend {
    pub fn score(&self, query: &str, candidates: &[&str]) -> Result<Vec<f64>, ScorerError> {
        match self {
            ScorerBackend::Lexical => Ok(candidates.iter().map(|c| lexical_fallback_score(query, c)).collect()),
            ScorerBackend::Remote(remote) => remote.score(query, candidates),
        }
    }
}

/// Scores `query_schema` against every memory entry, in memory order.
pub fn score_candidates(
    query_schema: &str,
    memory: &SchemaMemory,
    backend: &ScorerBackend,
) -> Result<Vec<(String, f64)>, ScorerError> {
    let texts: Vec<&str> = memory.entries().iter().map(|e| e.schema_text.as_str()).collect();
    let scores = backend.score(query_schema, &texts)?;
    Ok(memory.entries().iter().map(|e| e.relation.clone()).zip(scores).collect())
}

/// The `k` best-scored relations, highest first, ties by relation name.
pub fn top_k(scored: &[(String, f64)], k: usize) -> Vec<(String, f64)> {
    assert!(k >= 1, "K must be positive");
    let mut sorted = scored.to_vec();
    sorted.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    sorted.truncate(k);
    sorted
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub relation: String,
    pub schema_text: String,
    pub score: f64,
}

/// Everything a decision function sees for one triplet.
#[derive(Debug, Clone, Copy)]
pub struct DecisionRequest<'a> {
    pub sentence: &'a SentenceRecord,
    pub triplet: &'a Triplet,
    pub query_schema: &'a str,
    pub candidates: &'a [Candidate],
}

/// Chooses which candidate, if any, should replace the triplet's relation.
pub trait RelationDecider: Sync {
    fn decide(&self, request: &DecisionRequest<'_>) -> Option<String>;
}

impl<F> RelationDecider for F
where
    F: Fn(&DecisionRequest<'_>) -> Option<String> + Sync,
{
    fn decide(&self, request: &DecisionRequest<'_>) -> Option<String> {
        self(request)
    }
}

/// Renders numbered choices, ending with the "None of the above" option.
pub fn render_choices(candidates: &[Candidate]) -> String {
    let mut lines: Vec<String> = candidates
        .iter()
        .enumerate()
        .map(|(i, c)| format!("{}. {} \u{2014} {}", i + 1, c.relation, c.schema_text))
        .collect();
    lines.push(format!("{}. None of the above", candidates.len() + 1));
    lines.join("\n")
}

fn clean_answer(text: &str) -> &str {
    let first = text.lines().map(str::trim).find(|l| !l.is_empty()).unwrap_or("");
    let first = first.strip_prefix("Output:").unwrap_or(first).trim();
    first.trim_matches(|c: char| c == '"' || c == '\'' || c == '`' || c == '*' || c == '.' || c.is_whitespace())
}

/// Maps a free-text decision onto a candidate name, or `None`.
pub fn parse_decision(response: &str, candidates: &[Candidate]) -> Option<String> {
    let answer = clean_answer(response);
    let lower = answer.to_lowercase();
    if let Some(c) = candidates.iter().find(|c| c.relation.to_lowercase() == lower) {
        return Some(c.relation.clone());
    }
    let digits: String = answer.chars().take_while(char::is_ascii_digit).collect();
    if let Ok(n) = digits.parse::<usize>() {
        return (1..=candidates.len()).contains(&n).then(|| candidates[n - 1].relation.clone());
    }
    if lower.contains("none of the above") || lower == "none" {
        return None;
    }
    let full = response.to_lowercase();
    candidates
        .iter()
        .filter_map(|c| full.find(&c.relation.to_lowercase()).map(|pos| (pos, std::cmp::Reverse(c.relation.len()), c)))
        .min_by_key(|(pos, len, _)| (*pos, *len))
        .map(|(_, _, c)| c.relation.clone())
}

/// Asks the language model to pick a replacement relation.
pub struct LlmDecider<'a> {
    gateway: &'a Gateway,
    assets: &'a PromptAssets,
}

impl<'a> LlmDecider<'a> {
    pub fn new(gateway: &'a Gateway, assets: &'a PromptAssets) -> Self {
        Self { gateway, assets }
    }

    pub fn render(&self, request: &DecisionRequest<'_>) -> Result<String, PromptError> {
        self.assets.rc_decision.render(&[
            ("Text", &request.sentence.text),
            ("Triplet", &request.triplet.to_string()),
            ("QueryRelation", request.triplet.relation()),
            ("QuerySchema", request.query_schema),
            ("Choices", &render_choices(request.candidates)),
        ])
    }
}

impl RelationDecider for LlmDecider<'_> {
    fn decide(&self, request: &DecisionRequest<'_>) -> Option<String> {
        if request.candidates.is_empty() {
            return None;
        }
        let prompt = match self.render(request) {
            Ok(p) => p,
            Err(e) => {
                tracing::warn!("decision prompt failed to render: {e}");
                return None;
            }
        };
        match self.gateway.complete(&ChatRequest::new(Role::RcDecide, None, prompt)) {
            Ok(response) => parse_decision(&response.text, request.candidates),
            Err(e) => {
                tracing::warn!(sentence = %request.sentence.id, "relation decision failed: {e}");
                None
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Decision {
    /// Mapped onto a candidate chosen by the decision function.
    Mapped(String),
    /// No candidate chosen, but the relation name was already in memory.
    Existing(String),
    /// Added to memory as a new canonical relation.
    Expanded,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalizationOutcome {
    pub triplet: CanonicalTriplet,
    pub query_schema: String,
    pub ranked: Vec<(String, f64)>,
    pub decision: Decision,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanonicalizerConfig {
    pub top_k: usize,
    /// Use lexical scores when the remote scorer is unreachable.
    pub fallback_to_lexical: bool,
}

impl Default for CanonicalizerConfig {
    fn default() -> Self {
        Self { top_k: DEFAULT_TOP_K, fallback_to_lexical: true }
    }
}

pub struct Canonicalizer<'a> {
    memory: SchemaMemory,
    scorer: ScorerBackend,
    decider: Box<dyn RelationDecider + 'a>,
    config: CanonicalizerConfig,
}

impl<'a> Canonicalizer<'a> {
    pub fn new(
        memory: SchemaMemory,
        scorer: ScorerBackend,
        decider: Box<dyn RelationDecider + 'a>,
        config: CanonicalizerConfig,
    ) -> Self {
        assert!(config.top_k >= 1, "K must be positive");
        Self { memory, scorer, decider, config }
    }

    pub fn memory(&self) -> &SchemaMemory {
        &self.memory
    }

    pub fn into_memory(self) -> SchemaMemory {
        self.memory
    }

    fn score(&self, query_schema: &str) -> Result<Vec<(String, f64)>, ScorerError> {
        match score_candidates(query_schema, &self.memory, &self.scorer) {
            Err(e) if self.config.fallback_to_lexical && !matches!(self.scorer, ScorerBackend::Lexical) => {
                tracing::warn!("{e}; falling back to lexical scoring");
                Ok(score_candidates(query_schema, &self.memory, &ScorerBackend::Lexical)
                    .expect("lexical scoring is infallible"))
            }
            other => other,
        }
    }

    /// Maps the triplet's relation onto memory or expands memory with it.
    pub fn canonicalize(
        &mut self,
        sentence: &SentenceRecord,
        triplet: &Triplet,
        restored: &str,
    ) -> Result<CanonicalizationOutcome, CanonError> {
        let query_schema = mask_entities(restored, triplet.subject(), triplet.object());
        let ranked = top_k(&self.score(&query_schema)?, self.config.top_k);
        let candidates: Vec<Candidate> = ranked
            .iter()
            .map(|(relation, score)| Candidate {
                relation: relation.clone(),
                schema_text: self.memory.get(relation).expect("ranked relation is in memory").schema_text.clone(),
                score: *score,
            })
            .collect();
        let chosen = if candidates.is_empty() {
            None
        } else {
            let request = DecisionRequest { sentence, triplet, query_schema: &query_schema, candidates: &candidates };
            self.decider.decide(&request).filter(|name| candidates.iter().any(|c| &c.relation == name))
        };

        let (relation, decision) = match chosen {
            Some(name) => {
                let stored = self.memory.record_use(&name).expect("chosen relation is in memory").to_owned();
                (stored.clone(), Decision::Mapped(stored))
            }
            None => match self.memory.record_use(triplet.relation()) {
                Some(existing) => {
                    let existing = existing.to_owned();
                    (existing.clone(), Decision::Existing(existing))
                }
                None => {
                    self.memory.add(RelationSchema {
                        relation: triplet.relation().to_owned(),
                        schema_text: query_schema.clone(),
                        created_at_sentence: sentence.id.clone(),
                        use_count: 1,
                    })?;
                    (triplet.relation().to_owned(), Decision::Expanded)
                }
            },
        };
        tracing::debug!(sentence = %sentence.id, raw = triplet.relation(), canonical = %relation, "canonicalized");
        Ok(CanonicalizationOutcome {
            triplet: CanonicalTriplet {
                subject: triplet.subject().to_owned(),
                relation,
                object: triplet.object().to_owned(),
                raw_relation: triplet.relation().to_owned(),
                sentence_id: sentence.id.clone(),
            },
            query_schema,
            ranked,
            decision,
        })
    }
}
