//! Triplet extraction: prompt assembly, the model call, and a lenient
//! parser for whatever list format the model actually returned.

use std::collections::HashSet;

use thiserror::Error;

use crate::gateway::{ChatRequest, Gateway, GatewayError, Role};
use crate::model::{parse_triplet_literal, PromptState, SentenceRecord, Triplet};

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("sentence {sentence_id}: {source}")]
    Gateway {
        sentence_id: String,
        #[source]
        source: GatewayError,
    },
    /// The model answered with prose and no parseable triplet.
    #[error("sentence {sentence_id}: no triplets in model output ({failures} malformed)")]
    EmptyExtraction { sentence_id: String, raw_output: String, failures: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractionResult {
    pub sentence_id: String,
    /// Model emission order, exact duplicates removed.
    pub triplets: Vec<Triplet>,
    pub raw_output: String,
    pub parse_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ParsedTriplets {
    pub triplets: Vec<Triplet>,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("no triplets parsed from non-empty output ({failures} malformed)")]
pub struct EmptyExtraction {
    pub failures: usize,
}

/// The prompt rides in the system slot and the sentence in the user slot.
pub fn assemble_extraction_prompt(prompt: &PromptState, sentence: &SentenceRecord) -> ChatRequest {
    assert!(!prompt.text().trim().is_empty(), "extraction prompt must not be empty");
    ChatRequest::new(Role::Extract, Some(prompt.text().to_owned()), sentence.text.clone())
}

/// Removes a surrounding Markdown code fence, if any.
fn strip_code_fence(raw: &str) -> &str {
    let t = raw.trim();
    if let Some(rest) = t.strip_prefix("```") {
        let rest = rest.split_once('\n').map(|(_, body)| body).unwrap_or("");
        return rest.trim_end().strip_suffix("```").unwrap_or(rest).trim();
    }
    t
}

fn json_value_to_triplet(v: &serde_json::Value) -> Option<Triplet> {
    let field = |v: &serde_json::Value| match v {
        serde_json::Value::String(s) => Some(s.clone()),
        serde_json::Value::Number(n) => Some(n.to_string()),
        _ => None,
    };
    match v {
        serde_json::Value::Array(items) if items.len() == 3 => {
            Triplet::new(field(&items[0])?, field(&items[1])?, field(&items[2])?).ok()
        }
        serde_json::Value::Object(map) => {
            let get = |keys: &[&str]| keys.iter().find_map(|k| map.get(*k)).and_then(field);
            Triplet::new(
                get(&["subject", "head", "Entity1"])?,
                get(&["relation", "predicate", "Relationship"])?,
                get(&["object", "tail", "Entity2"])?,
            )
            .ok()
        }
        _ => None,
    }
}

/// JSON array of triplets, optionally wrapped as `{"triplets": [...]}`.
fn parse_json_list(raw: &str) -> Option<ParsedTriplets> {
    let value: serde_json::Value = serde_json::from_str(raw).ok()?;
    let items = match &value {
        serde_json::Value::Array(items) => items,
        serde_json::Value::Object(map) => map.get("triplets")?.as_array()?,
        _ => return None,
    };
    // A bare flat triple like ["a","b","c"] is a single triplet.
    if items.len() == 3 && items.iter().all(|v| v.is_string()) {
        return json_value_to_triplet(&value).map(|t| ParsedTriplets { triplets: vec![t], failures: 0 });
    }
    let mut out = ParsedTriplets::default();
    for item in items {
        match json_value_to_triplet(item) {
            Some(t) => out.triplets.push(t),
            None => out.failures += 1,
        }
    }
    Some(out)
}

/// Drops bullets and enumerators: "- ", "* ", "• ", "1. ", "2) ".
fn strip_list_marker(line: &str) -> &str {
    let line = line.trim();
    for marker in ["- ", "* ", "\u{2022} "] {
        if let Some(rest) = line.strip_prefix(marker) {
            return rest.trim_start();
        }
    }
    let digits = line.chars().take_while(|c| c.is_ascii_digit()).count();
    if digits > 0 {
        let rest = &line[digits..];
        if let Some(rest) = rest.strip_prefix(". ").or_else(|| rest.strip_prefix(") ")) {
            return rest.trim_start();
        }
    }
    line
}

/// Innermost `[...]` groups in `line`, in order.
fn bracket_groups(line: &str) -> Vec<&str> {
    let mut groups = Vec::new();
    let mut open = None;
    for (i, c) in line.char_indices() {
        match c {
            '[' => open = Some(i),
            ']' => {
                if let Some(start) = open.take() {
                    groups.push(&line[start..=i]);
                }
            }
            _ => {}
        }
    }
    groups
}

/// Tuple-like segments of one line: innermost bracket groups, or the whole
/// line when it is a single parenthesized tuple.
fn tuple_segments(line: &str) -> Vec<&str> {
    let line = strip_list_marker(line);
    let groups = bracket_groups(line);
    if !groups.is_empty() {
        return groups;
    }
    let candidate = line.trim_end_matches([',', ';', '.']).trim_end();
    if candidate.starts_with('(') && candidate.ends_with(')') && candidate.contains(',') {
        return vec![candidate];
    }
    Vec::new()
}

/// Parses a model's triplet list.
///
/// A JSON array of three-element arrays (or subject/relation/object objects)
/// is tried first. Otherwise every line is scanned for bracketed or
/// parenthesized tuples; lines without one are treated as prose and skipped,
/// tuple-like lines that fail to parse count as failures. Zero triplets from
/// non-empty output that is not an explicit empty list is an
/// [`EmptyExtraction`].
pub fn parse_triplet_list(raw: &str) -> Result<ParsedTriplets, EmptyExtraction> {
    let body = strip_code_fence(raw);
    if body.is_empty() {
        return Ok(ParsedTriplets::default());
    }
    if let Some(parsed) = parse_json_list(body) {
        if !parsed.triplets.is_empty() || parsed.failures == 0 {
            return Ok(parsed);
        }
    }

    let mut out = ParsedTriplets::default();
    for line in body.lines() {
        for segment in tuple_segments(line) {
            // A quoted JSON segment keeps commas inside its elements.
            let json = serde_json::from_str(segment).ok().and_then(|v| json_value_to_triplet(&v));
            match json.map(Ok).unwrap_or_else(|| parse_triplet_literal(segment)) {
                Ok(t) => out.triplets.push(t),
                Err(_) => out.failures += 1,
            }
        }
    }
    if out.triplets.is_empty() {
        return Err(EmptyExtraction { failures: out.failures });
    }
    Ok(out)
}

fn dedup(triplets: Vec<Triplet>) -> Vec<Triplet> {
    let mut seen = HashSet::new();
    triplets.into_iter().filter(|t| seen.insert(t.clone())).collect()
}

pub fn extract_triplets(
    gateway: &Gateway,
    prompt: &PromptState,
    sentence: &SentenceRecord,
) -> Result<ExtractionResult, ExtractError> {
    let request = assemble_extraction_prompt(prompt, sentence);
    let response = gateway
        .complete(&request)
        .map_err(|source| ExtractError::Gateway { sentence_id: sentence.id.clone(), source })?;
    match parse_triplet_list(&response.text) {
        Ok(parsed) => Ok(ExtractionResult {
            sentence_id: sentence.id.clone(),
            triplets: dedup(parsed.triplets),
            raw_output: response.text,
            parse_failures: parsed.failures,
        }),
        Err(EmptyExtraction { failures }) => {
            Err(ExtractError::EmptyExtraction { sentence_id: sentence.id.clone(), raw_output: response.text, failures })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompts::PromptAssets;
    use proptest::prelude::*;

    fn t(s: &str, r: &str, o: &str) -> Triplet {
        Triplet::new(s, r, o).unwrap()
    }

    fn sentence() -> SentenceRecord {
        SentenceRecord::new("s1", "Alice knows Bob.", None).unwrap()
    }

    #[test]
    fn assembles_prompt_into_system_slot() {
        let assets = PromptAssets::builtin();
        let p = PromptState::new(assets.initial_orte_prompt.clone());
        let req = assemble_extraction_prompt(&p, &sentence());
        assert!(req
            .system_text
            .as_deref()
            .unwrap()
            .starts_with("Your task is to transform the given text into a semantic graph"));
        assert_eq!(req.user_text, "Alice knows Bob.");
        assert_eq!(req.role, Role::Extract);
        let updated = p.updated("A different prompt.", 0);
        assert_ne!(req.fingerprint(), assemble_extraction_prompt(&updated, &sentence()).fingerprint());
    }

    #[test]
    #[should_panic(expected = "must not be empty")]
    fn empty_prompt_is_a_precondition_violation() {
        assemble_extraction_prompt(&PromptState::new("  "), &sentence());
    }

    #[test]
    fn parses_bracket_lines() {
        let raw = "[Pontiac Rageous, assembly, Detroit]\n[Pontiac Rageous, buildDate, 1997]\n[Pontiac Rageous, state, Michigan]";
        let parsed = parse_triplet_list(raw).unwrap();
        assert_eq!(parsed.failures, 0);
        assert_eq!(
            parsed.triplets,
            vec![
                t("Pontiac Rageous", "assembly", "Detroit"),
                t("Pontiac Rageous", "buildDate", "1997"),
                t("Pontiac Rageous", "state", "Michigan"),
            ]
        );
    }

    #[test]
    fn parses_json_arrays() {
        let parsed = parse_triplet_list(r#"[["a","b","c"]]"#).unwrap();
        assert_eq!((parsed.triplets, parsed.failures), (vec![t("a", "b", "c")], 0));
        let parsed = parse_triplet_list(r#"[["Detroit, Michigan","state","USA"], ["x"]]"#).unwrap();
        assert_eq!((parsed.triplets, parsed.failures), (vec![t("Detroit, Michigan", "state", "USA")], 1));
        let parsed = parse_triplet_list(r#"{"triplets":[{"subject":"a","relation":"b","object":"c"}]}"#).unwrap();
        assert_eq!(parsed.triplets, vec![t("a", "b", "c")]);
        assert_eq!(parse_triplet_list("[]").unwrap(), ParsedTriplets::default());
    }

    #[test]
    fn skips_prose_and_counts_malformed() {
        let parsed = parse_triplet_list("Here are the triplets:\n[a, b]\n[x, y, z]").unwrap();
        assert_eq!((parsed.triplets, parsed.failures), (vec![t("x", "y", "z")], 1));
    }

    #[test]
    fn handles_markers_fences_and_parens() {
        let raw = "```\n1. [a, b, c]\n- (d, e, f),\n* [g, h, i], [j, k, l]\n```";
        let parsed = parse_triplet_list(raw).unwrap();
        assert_eq!(parsed.triplets, vec![t("a", "b", "c"), t("d", "e", "f"), t("g", "h", "i"), t("j", "k", "l")]);
        let parsed = parse_triplet_list("[[a, b, c], [d, e, f]]").unwrap();
        assert_eq!(parsed.triplets, vec![t("a", "b", "c"), t("d", "e", "f")]);
    }

    #[test]
    fn prose_only_output_is_empty_extraction() {
        assert_eq!(parse_triplet_list("Sorry, I cannot help with that."), Err(EmptyExtraction { failures: 0 }));
        assert_eq!(parse_triplet_list("[only, two]"), Err(EmptyExtraction { failures: 1 }));
        assert_eq!(parse_triplet_list("   \n "), Ok(ParsedTriplets::default()));
    }

    #[test]
    fn dedup_keeps_first_occurrence() {
        let out = dedup(vec![t("a", "b", "c"), t("x", "y", "z"), t(" a ", "b", "c")]);
        assert_eq!(out, vec![t("a", "b", "c"), t("x", "y", "z")]);
    }

    fn field() -> impl Strategy<Value = String> {
        "[a-z]{1,6}( [a-z]{1,6})?"
    }

    fn line() -> impl Strategy<Value = String> {
        prop_oneof![
            (field(), field(), field()).prop_map(|(a, b, c)| format!("[{a}, {b}, {c}]")),
            (field(), field()).prop_map(|(a, b)| format!("[{a}, {b}]")),
            (field(), field(), field(), field()).prop_map(|(a, b, c, d)| format!("[{a}, {b}, {c}, {d}]")),
            field().prop_map(|w| format!("Note {w}")),
        ]
    }

    proptest! {
        #[test]
        fn parsed_plus_failures_cover_tuple_lines(lines in proptest::collection::vec(line(), 0..12)) {
            let raw = lines.join("\n");
            let tuple_lines = lines.iter().filter(|l| l.starts_with('[')).count();
            let (parsed, failures) = match parse_triplet_list(&raw) {
                Ok(p) => (p.triplets.len(), p.failures),
                Err(e) => (0, e.failures),
            };
            prop_assert!(parsed + failures >= tuple_lines);
        }

        #[test]
        fn extraction_order_is_emission_order(fields in proptest::collection::vec((field(), field(), field()), 1..8)) {
            let raw: Vec<String> = fields.iter().map(|(a, b, c)| format!("[{a}, {b}, {c}]")).collect();
            let parsed = parse_triplet_list(&raw.join("\n")).unwrap();
            let expected: Vec<Triplet> = fields.iter().map(|(a, b, c)| t(a, b, c)).collect();
            prop_assert_eq!(parsed.triplets, expected);
        }
    }
}
