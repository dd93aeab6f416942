//! Self-evaluation by knowledge restoration.
//!
//! Each extracted triplet is turned back into a sentence, the sentence is
//! judged against the source text with NLI, and the verdict is mapped to a
//! discrete consistency score. A sentence's score is the sum over its
//! triplets.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extractor::ExtractionResult;
use crate::gateway::{ChatRequest, Gateway, GatewayError, Role};
use crate::model::{NliLabel, SentenceRecord, Triplet};
use crate::prompts::{PromptAssets, PromptError};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("restoration response has no non-empty line")]
    EmptyRestoration,
    #[error("no NLI verdict in response: {0:?}")]
    NliParse(String),
}

/// Score assigned to each NLI label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConsistencyScores {
    pub entailment: f64,
    pub neutral: f64,
    pub contradiction: f64,
}

impl Default for ConsistencyScores {
    fn default() -> Self {
        Self { entailment: 1.0, neutral: 0.0, contradiction: -0.5 }
    }
}

impl ConsistencyScores {
    pub fn score(&self, label: NliLabel) -> f64 {
        match label {
            NliLabel::Entailment => self.entailment,
            NliLabel::Neutral => self.neutral,
            NliLabel::Contradiction => self.contradiction,
        }
    }
}

/// Entailment → 1, neutral → 0, contradiction → −0.5.
pub fn score_label(label: NliLabel) -> f64 {
    ConsistencyScores::default().score(label)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NliVerdict {
    pub label: NliLabel,
    pub confidence: f64,
    pub reasoning: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripletEvaluation {
    pub triplet: Triplet,
    pub restored_text: String,
    pub label: NliLabel,
    pub confidence: f64,
    pub reasoning: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEvaluation {
    pub sentence_id: String,
    pub evaluations: Vec<TripletEvaluation>,
    pub total: f64,
}

impl SentenceEvaluation {
    /// Folds per-triplet results in their original order.
    pub fn from_evaluations(sentence_id: impl Into<String>, evaluations: Vec<TripletEvaluation>) -> Self {
        let total = evaluations.iter().fold(0.0, |acc, e| acc + e.score);
        Self { sentence_id: sentence_id.into(), evaluations, total }
    }

    pub fn empty(sentence_id: impl Into<String>) -> Self {
        Self::from_evaluations(sentence_id, Vec::new())
    }
}

pub struct SelfEvaluator<'a> {
    gateway: &'a Gateway,
    assets: &'a PromptAssets,
    scores: ConsistencyScores,
}

impl<'a> SelfEvaluator<'a> {
    pub fn new(gateway: &'a Gateway, assets: &'a PromptAssets) -> Self {
        Self { gateway, assets, scores: ConsistencyScores::default() }
    }

    pub fn with_scores(mut self, scores: ConsistencyScores) -> Self {
        self.scores = scores;
        self
    }

    /// Returns the first non-empty line of the restoration response.
    pub fn restore_triplet(&self, t: &Triplet) -> Result<String, EvalError> {
        let prompt =
            self.assets.kr.render(&[("Subject", t.subject()), ("Relation", t.relation()), ("Object", t.object())])?;
        let response = self.gateway.complete(&ChatRequest::new(Role::Restore, None, prompt))?;
        response
            .text
            .lines()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_owned)
            .ok_or(EvalError::EmptyRestoration)
    }

    pub fn judge_nli(&self, premise: &str, hypothesis: &str) -> Result<NliVerdict, EvalError> {
        assert!(!premise.trim().is_empty() && !hypothesis.trim().is_empty(), "NLI inputs must be non-empty");
        let prompt = self.assets.nli.render(&[("Premise", premise), ("Hypothesis", hypothesis)])?;
        let response = self.gateway.complete(&ChatRequest::new(Role::Nli, None, prompt))?;
        parse_nli_response(&response.text)
    }

    fn evaluate_triplet(&self, premise: &str, t: &Triplet) -> TripletEvaluation {
        let outcome =
            self.restore_triplet(t).and_then(|restored| self.judge_nli(premise, &restored).map(|v| (restored, v)));
        match outcome {
            Ok((restored_text, verdict)) => TripletEvaluation {
                triplet: t.clone(),
                restored_text,
                label: verdict.label,
                confidence: verdict.confidence,
                reasoning: verdict.reasoning,
                score: self.scores.score(verdict.label),
            },
            Err(e) => {
                tracing::warn!(triplet = %t, "self-evaluation degraded to neutral: {e}");
                TripletEvaluation {
                    triplet: t.clone(),
                    restored_text: String::new(),
                    label: NliLabel::Neutral,
                    confidence: 0.0,
                    reasoning: format!("evaluation failed: {e}"),
                    score: 0.0,
                }
            }
        }
    }

    /// Restores and judges every triplet. A triplet whose restoration or
    /// judgement fails scores 0 with a neutral label.
    pub fn evaluate_sentence(&self, sentence: &SentenceRecord, extraction: &ExtractionResult) -> SentenceEvaluation {
        assert_eq!(extraction.sentence_id, sentence.id, "extraction belongs to another sentence");
        let evaluations = extraction.triplets.iter().map(|t| self.evaluate_triplet(&sentence.text, t)).collect();
        SentenceEvaluation::from_evaluations(sentence.id.clone(), evaluations)
    }
}

/// First balanced `{...}` block, ignoring braces inside JSON strings.
fn first_json_object(text: &str) -> Option<&str> {
    let start = text.find('{')?;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    for (i, c) in text[start..].char_indices() {
        if in_string {
            match c {
                _ if escaped => escaped = false,
                '\\' => escaped = true,
                '"' => in_string = false,
                _ => {}
            }
            continue;
        }
        match c {
            '"' => in_string = true,
            '{' => depth += 1,
            '}' => {
                depth -= 1;
                if depth == 0 {
                    return Some(&text[start..start + i + 1]);
                }
            }
            _ => {}
        }
    }
    None
}

/// Parses a judge response: the first balanced JSON object must carry a
/// legal `label`; confidence is clamped to [0, 1] (0 when absent).
pub fn parse_nli_response(text: &str) -> Result<NliVerdict, EvalError> {
    let err = || EvalError::NliParse(text.to_owned());
    let block = first_json_object(text).ok_or_else(err)?;
    let value: serde_json::Value = serde_json::from_str(block).map_err(|_| err())?;
    let label: NliLabel = value.get("label").and_then(|l| l.as_str()).ok_or_else(err)?.parse().map_err(|_| err())?;
    let confidence = match value.get("confidence") {
        Some(serde_json::Value::Number(n)) => n.as_f64().unwrap_or(0.0),
        Some(serde_json::Value::String(s)) => s.trim().parse().unwrap_or(0.0),
        _ => 0.0,
    };
    let confidence = if confidence.is_nan() { 0.0 } else { confidence.clamp(0.0, 1.0) };
    let reasoning = value.get("reasoning").and_then(|r| r.as_str()).unwrap_or_default().to_owned();
    Ok(NliVerdict { label, confidence, reasoning })
}
