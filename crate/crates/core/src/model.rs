//! Shared data model: sentences, triplets, NLI labels and the optimized
//! prompt state, plus the text normalization used for all comparisons.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;

/// Characters that can never appear inside a triplet field. Square brackets
/// delimit the bracket wire form and a field must stay on one line.
const RESERVED: &[char] = &['[', ']', '\n', '\r'];

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TripletError {
    #[error("malformed triplet {input:?}: {reason}")]
    Malformed { input: String, reason: String },
    #[error("triplet {0} is empty")]
    EmptyField(&'static str),
    #[error("triplet {field} {value:?} contains a reserved delimiter")]
    ReservedDelimiter { field: &'static str, value: String },
}

/// NFC-normalizes `s`. All ingested text passes through here before any
/// comparison takes place.
pub fn nfc(s: &str) -> String {
    s.nfc().collect()
}

fn is_strippable(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(
            c,
            '\u{2018}'
                | '\u{2019}'
                | '\u{201C}'
                | '\u{201D}'
                | '\u{00AB}'
                | '\u{00BB}'
                | '\u{2013}'
                | '\u{2014}'
                | '\u{2026}'
                | '\u{00BF}'
                | '\u{00A1}'
        )
}

/// Token sequence used by every textual comparison: NFC, lowercase, split on
/// whitespace, and leading/trailing punctuation removed from each token.
/// Tokens that consist only of punctuation disappear.
pub fn normalize_text(raw: &str) -> Vec<String> {
    nfc(&nfc(raw).to_lowercase())
        .split_whitespace()
        .map(|tok| tok.trim_matches(is_strippable))
        .filter(|tok| !tok.is_empty())
        .map(str::to_owned)
        .collect()
}

/// [`normalize_text`] joined by single spaces.
pub fn normalize_key(raw: &str) -> String {
    normalize_text(raw).join(" ")
}

/// A (subject, relation, object) fact.
///
/// Fields are NFC-normalized, trimmed and non-empty. On the wire a triplet
/// is a three-element JSON array.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "[String; 3]", into = "[String; 3]")]
pub struct Triplet {
    subject: String,
    relation: String,
    object: String,
}

fn clean_field(field: &'static str, value: &str) -> Result<String, TripletError> {
    let value = nfc(value.trim());
    if value.is_empty() {
        return Err(TripletError::EmptyField(field));
    }
    if value.contains(RESERVED) {
        return Err(TripletError::ReservedDelimiter { field, value });
    }
    Ok(value)
}

impl Triplet {
    pub fn new(
        subject: impl AsRef<str>,
        relation: impl AsRef<str>,
        object: impl AsRef<str>,
    ) -> Result<Self, TripletError> {
        Ok(Self {
            subject: clean_field("subject", subject.as_ref())?,
            relation: clean_field("relation", relation.as_ref())?,
            object: clean_field("object", object.as_ref())?,
        })
    }

    pub fn subject(&self) -> &str {
        &self.subject
    }

    pub fn relation(&self) -> &str {
        &self.relation
    }

    pub fn object(&self) -> &str {
        &self.object
    }

    /// Same subject and object, different relation.
    pub fn with_relation(&self, relation: &str) -> Result<Self, TripletError> {
        Ok(Self {
            subject: self.subject.clone(),
            relation: clean_field("relation", relation)?,
            object: self.object.clone(),
        })
    }
}

impl fmt::Display for Triplet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}, {}, {}]", self.subject, self.relation, self.object)
    }
}

impl TryFrom<[String; 3]> for Triplet {
    type Error = TripletError;

    fn try_from([s, r, o]: [String; 3]) -> Result<Self, Self::Error> {
        Triplet::new(s, r, o)
    }
}

impl From<Triplet> for [String; 3] {
    fn from(t: Triplet) -> Self {
        [t.subject, t.relation, t.object]
    }
}

fn strip_quotes(field: &str) -> &str {
    let field = field.trim();
    for (open, close) in [('"', '"'), ('\'', '\''), ('`', '`'), ('\u{201C}', '\u{201D}')] {
        if field.len() >= 2 && field.starts_with(open) && field.ends_with(close) {
            return field[open.len_utf8()..field.len() - close.len_utf8()].trim();
        }
    }
    field
}

/// Parses one bracketed (`[a, b, c]`) or parenthesized (`(a, b, c)`) tuple.
///
/// Fields are split on commas, trimmed and stripped of matching surrounding
/// quotes. Commas inside entity names are therefore not representable here.
pub fn parse_triplet_literal(text: &str) -> Result<Triplet, TripletError> {
    let malformed = |reason: &str| TripletError::Malformed { input: text.to_owned(), reason: reason.to_owned() };
    let trimmed = text.trim();
    let inner = if let Some(rest) = trimmed.strip_prefix('[') {
        rest.strip_suffix(']')
    } else if let Some(rest) = trimmed.strip_prefix('(') {
        rest.strip_suffix(')')
    } else {
        None
    }
    .ok_or_else(|| malformed("expected a [..] or (..) tuple"))?;

    let fields: Vec<&str> = inner.split(',').map(strip_quotes).collect();
    if fields.len() != 3 {
        return Err(malformed(&format!("expected 3 fields, found {}", fields.len())));
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err(malformed("empty field"));
    }
    Triplet::new(fields[0], fields[1], fields[2]).map_err(|e| malformed(&e.to_string()))
}

/// One input sentence or passage, optionally carrying gold triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold: Option<Vec<Triplet>>,
}

impl SentenceRecord {
    /// Returns `None` when the text is blank.
    pub fn new(id: impl Into<String>, text: &str, gold: Option<Vec<Triplet>>) -> Option<Self> {
        let text = nfc(text);
        if text.trim().is_empty() {
            return None;
        }
        Some(Self { id: id.into(), text, gold })
    }
}

/// A triplet after relation canonicalization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CanonicalTriplet {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub raw_relation: String,
    pub sentence_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NliLabel {
    Entailment,
    Neutral,
    Contradiction,
}

impl NliLabel {
    pub const ALL: [NliLabel; 3] = [NliLabel::Entailment, NliLabel::Neutral, NliLabel::Contradiction];

    pub fn as_str(self) -> &'static str {
        match self {
            NliLabel::Entailment => "entailment",
            NliLabel::Neutral => "neutral",
            NliLabel::Contradiction => "contradiction",
        }
    }
}

impl fmt::Display for NliLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown NLI label {0:?}")]
pub struct UnknownLabel(pub String);

impl FromStr for NliLabel {
    type Err = UnknownLabel;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lowered = s.trim().to_lowercase();
        NliLabel::ALL.into_iter().find(|l| l.as_str() == lowered).ok_or_else(|| UnknownLabel(s.to_owned()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptRevision {
    pub version: u32,
    pub text: String,
    /// Batch whose feedback produced this revision; `None` for the initial prompt.
    pub batch_index: Option<usize>,
}

/// The extraction prompt being optimized, with its full revision history.
///
/// `version == history.len() - 1` always holds and `history[0]` is the
/// initial prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptState {
    text: String,
    version: u32,
    history: Vec<PromptRevision>,
}

impl PromptState {
    pub fn new(initial: impl Into<String>) -> Self {
        let text = initial.into();
        Self { history: vec![PromptRevision { version: 0, text: text.clone(), batch_index: None }], text, version: 0 }
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn history(&self) -> &[PromptRevision] {
        &self.history
    }

    /// Returns the next revision of this prompt.
    pub fn updated(&self, text: impl Into<String>, batch_index: usize) -> Self {
        let text = text.into();
        let version = self.version + 1;
        let mut history = self.history.clone();
        history.push(PromptRevision { version, text: text.clone(), batch_index: Some(batch_index) });
        Self { text, version, history }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_text("Pontiac Rageous"), vec!["pontiac", "rageous"]);
        assert!(normalize_text("").is_empty());
        assert_eq!(normalize_text("  buildDate. "), vec!["builddate"]);
        assert_eq!(normalize_text("\"Detroit,\"  (Michigan)"), vec!["detroit", "michigan"]);
        assert!(normalize_text(" -- ... ").is_empty());
    }

    #[test]
    fn normalize_applies_nfc() {
        // "é" precomposed vs. "e" + combining acute
        assert_eq!(normalize_text("caf\u{e9}"), normalize_text("cafe\u{301}"));
    }

    #[test]
    fn parse_literal_examples() {
        assert_eq!(
            parse_triplet_literal("[Pontiac Rageous, buildDate, 1997]").unwrap(),
            Triplet::new("Pontiac Rageous", "buildDate", "1997").unwrap()
        );
        assert!(matches!(parse_triplet_literal("[a, b]"), Err(TripletError::Malformed { .. })));
        assert_eq!(parse_triplet_literal("(x , y , z)").unwrap(), Triplet::new("x", "y", "z").unwrap());
        assert_eq!(parse_triplet_literal(r#"["a", 'b', c]"#).unwrap(), Triplet::new("a", "b", "c").unwrap());
        assert!(parse_triplet_literal("[a, , c]").is_err());
        assert!(parse_triplet_literal("[a, b, c, d]").is_err());
        assert!(parse_triplet_literal("a, b, c").is_err());
    }

    #[test]
    fn triplet_rejects_blank_and_reserved() {
        assert_eq!(Triplet::new(" ", "r", "o"), Err(TripletError::EmptyField("subject")));
        assert!(matches!(Triplet::new("s", "r[1]", "o"), Err(TripletError::ReservedDelimiter { .. })));
        assert!(Triplet::new("Detroit, Michigan", "r", "o").is_ok());
    }

    #[test]
    fn triplet_serde_is_array() {
        let t = Triplet::new("a", "b", "c").unwrap();
        assert_eq!(serde_json::to_string(&t).unwrap(), r#"["a","b","c"]"#);
        let back: Triplet = serde_json::from_str(r#"[" a ","b","c"]"#).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<Triplet>(r#"["","b","c"]"#).is_err());
    }

    #[test]
    fn nli_label_parsing() {
        assert_eq!("ENTAILMENT".parse::<NliLabel>().unwrap(), NliLabel::Entailment);
        assert_eq!(" Neutral ".parse::<NliLabel>().unwrap(), NliLabel::Neutral);
        assert!("maybe".parse::<NliLabel>().is_err());
    }

    #[test]
    fn prompt_state_versions() {
        let p0 = PromptState::new("p0");
        let p1 = p0.updated("p1", 0);
        let p2 = p1.updated("p2", 1);
        assert_eq!((p1.version(), p2.version()), (1, 2));
        assert_eq!(p2.history().len(), 3);
        assert_eq!(p2.history()[0].text, "p0");
        assert_eq!(p2.version() as usize, p2.history().len() - 1);
        assert_eq!(p0.version(), 0);
    }

    fn field() -> impl Strategy<Value = String> {
        "[A-Za-z0-9 .'-]{0,12}[A-Za-z0-9]".prop_map(|s| s.trim().to_owned())
    }

    proptest! {
        #[test]
        fn literal_round_trip(s in field(), r in field(), o in field()) {
            let t = Triplet::new(&s, &r, &o).unwrap();
            prop_assert_eq!(parse_triplet_literal(&t.to_string()).unwrap(), t);
        }

        #[test]
        fn normalize_idempotent(raw in "\\PC{0,40}") {
            let once = normalize_text(&raw);
            prop_assert_eq!(normalize_text(&once.join(" ")), once);
        }
    }
}
