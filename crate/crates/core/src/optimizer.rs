//! Textual-gradient prompt optimization.
//!
//! For every sample the optimizer extracts, self-evaluates, and asks the
//! model for two pieces of feedback: how the extraction could score better
//! (first gradient) and how the prompt should change to get there (second
//! gradient). Second gradients are buffered per batch and a single rewrite
//! call turns the buffer into the next prompt revision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluator::{ConsistencyScores, SelfEvaluator, SentenceEvaluation};
use crate::extractor::{extract_triplets, ExtractError, ExtractionResult};
use crate::gateway::{ChatRequest, Gateway, GatewayError, Role};
use crate::model::{PromptState, SentenceRecord, Triplet};
use crate::prompts::{PromptAssets, PromptError};

pub const DEFAULT_BATCH_SIZE: usize = 5;
pub const DEFAULT_CONTEXT_BUDGET: usize = 12_000;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error("{0} response was empty")]
    GradientEmpty(Role),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub sentence_id: String,
    pub sentence_text: String,
    pub triplets: Vec<Triplet>,
    pub metrics_total: f64,
    pub grad1: String,
    pub grad2: String,
}

/// Second gradients collected over one batch.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackBuffer {
    pub batch_index: usize,
    capacity: usize,
    entries: Vec<GradientRecord>,
}

impl FeedbackBuffer {
    pub fn new(batch_index: usize, capacity: usize) -> Self {
        assert!(capacity >= 1, "buffer capacity must be at least 1");
        Self { batch_index, capacity, entries: Vec::with_capacity(capacity) }
    }

    pub fn push(&mut self, record: GradientRecord) {
        assert!(self.entries.len() < self.capacity, "feedback buffer is full");
        self.entries.push(record);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries ordered by sentence id, independent of fill order.
    pub fn sorted_entries(&self) -> Vec<&GradientRecord> {
        let mut entries: Vec<&GradientRecord> = self.entries.iter().collect();
        entries.sort_by(|a, b| a.sentence_id.cmp(&b.sentence_id));
        entries
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleStatus {
    Ok,
    /// The model returned prose without triplets; scored 0, gradients still generated.
    EmptyExtraction,
    /// The extraction call itself failed; the sample contributes no gradient.
    ExtractFailed,
    GradientFailed,
}

/// One line of the optimization trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    pub batch: usize,
    pub sentence_id: String,
    pub prompt_version: u32,
    pub status: SampleStatus,
    pub metrics_total: f64,
    pub triplets: Vec<Triplet>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub context_budget: usize,
    /// Reverts the previous update when the following batch scores worse.
    /// Not part of the plain algorithm, which always accepts updates.
    pub guarded_updates: bool,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            batch_size: DEFAULT_BATCH_SIZE,
            epochs: 1,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            guarded_updates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizationOutcome {
    pub prompt: PromptState,
    pub trace: Vec<TraceRow>,
}

struct SampleOutcome {
    row: TraceRow,
    record: Option<GradientRecord>,
}

fn render_triplet_list(triplets: &[Triplet], sep: &str) -> String {
    if triplets.is_empty() {
        return "(none)".to_owned();
    }
    triplets.iter().map(ToString::to_string).collect::<Vec<_>>().join(sep)
}

/// `{Triplets}` block for the feedback instruction: one triplet per line
/// with its verdict.
pub fn render_evaluated_triplets(evaluation: &SentenceEvaluation) -> String {
    if evaluation.evaluations.is_empty() {
        return "(none)".to_owned();
    }
    evaluation
        .evaluations
        .iter()
        .map(|e| format!("{} (label: {}, score: {})", e.triplet, e.label, e.score))
        .collect::<Vec<_>>()
        .join("\n")
}

/// `{Metrics}` block: per-triplet scores followed by the total.
pub fn render_metrics(evaluation: &SentenceEvaluation) -> String {
    let mut lines: Vec<String> = evaluation
        .evaluations
        .iter()
        .enumerate()
        .map(|(i, e)| format!("Triplet {}: {} ({})", i + 1, e.score, e.label))
        .collect();
    lines.push(format!("Total: {}", evaluation.total));
    lines.join("\n")
}

fn truncate_chars(s: &str, max: usize) -> &str {
    match s.char_indices().nth(max) {
        Some((idx, _)) => &s[..idx],
        None => s,
    }
}

/// Largest per-entry cap such that the capped lengths fit in `available`.
fn equal_share_cap(lengths: &[usize], available: usize) -> usize {
    let fits = |cap: usize| lengths.iter().map(|l| (*l).min(cap)).sum::<usize>() <= available;
    let (mut lo, mut hi) = (0, lengths.iter().copied().max().unwrap_or(0));
    while lo < hi {
        let mid = lo + (hi - lo).div_ceil(2);
        if fits(mid) {
            lo = mid;
        } else {
            hi = mid - 1;
        }
    }
    lo
}

/// Renders the batch context for the rewrite instruction.
///
/// Blocks appear in sentence-id order. When the result would exceed
/// `budget` characters every guidance text is cut to a common maximum
/// length, so long guidance loses its tail first and short guidance is kept
/// whole.
pub fn build_context(buffer: &FeedbackBuffer, budget: usize) -> String {
    assert!(!buffer.is_empty(), "cannot build context from an empty buffer");
    const SEP: &str = "\n\n";
    let entries = buffer.sorted_entries();
    let heads: Vec<String> = entries
        .iter()
        .map(|e| {
            format!(
                "### Sample {}\nSentence: {}\nTriplets: {}\nGuidance: ",
                e.sentence_id,
                e.sentence_text,
                render_triplet_list(&e.triplets, "; ")
            )
        })
        .collect();
    let guidance_lens: Vec<usize> = entries.iter().map(|e| e.grad2.chars().count()).collect();
    let overhead = heads.iter().map(|h| h.chars().count()).sum::<usize>() + SEP.len() * (entries.len() - 1);
    let cap = equal_share_cap(&guidance_lens, budget.saturating_sub(overhead));

    let context = heads
        .iter()
        .zip(&entries)
        .map(|(head, e)| format!("{head}{}", truncate_chars(&e.grad2, cap)))
        .collect::<Vec<_>>()
        .join(SEP);
    truncate_chars(&context, budget).to_owned()
}

/// Locates `<VARIABLE>` or `</VARIABLE>` (any case, optional inner spaces).
fn find_marker(text: &str, closing: bool) -> Option<(usize, usize)> {
    let lower = text.to_ascii_lowercase();
    let mut from = 0;
    while let Some(rel) = lower[from..].find('<') {
        let start = from + rel;
        let mut rest = lower[start + 1..].trim_start();
        let is_closing = rest.starts_with('/');
        if is_closing {
            rest = rest[1..].trim_start();
        }
        if is_closing == closing {
            if let Some(after) = rest.strip_prefix("variable") {
                if let Some(after) = after.trim_start().strip_prefix('>') {
                    let end = lower.len() - after.len();
                    return Some((start, end));
                }
            }
        }
        from = start + 1;
    }
    None
}

/// Extracts the new prompt from a rewrite response: the span between the
/// first and last non-empty lines, without echoed VARIABLE markers or code
/// fences.
pub fn recover_prompt_text(response: &str) -> Option<String> {
    let lines: Vec<&str> = response.lines().collect();
    let first = lines.iter().position(|l| !l.trim().is_empty())?;
    let last = lines.iter().rposition(|l| !l.trim().is_empty())?;
    let block = lines[first..=last].join("\n");
    let mut text = block.trim();
    if let Some(rest) = text.strip_prefix("```") {
        let body = rest.split_once('\n').map(|(_, b)| b).unwrap_or("");
        text = body.trim_end().strip_suffix("```").unwrap_or(body).trim();
    }
    let open = find_marker(text, false);
    let close = find_marker(text, true);
    let inner = match (open, close) {
        (Some((_, o_end)), Some((c_start, _))) if o_end <= c_start => &text[o_end..c_start],
        (Some((_, o_end)), None) => &text[o_end..],
        (None, Some((c_start, _))) => &text[..c_start],
        _ => text,
    };
    let inner = inner.trim();
    (!inner.is_empty()).then(|| inner.to_owned())
}

pub struct PromptOptimizer<'a> {
    gateway: &'a Gateway,
    assets: &'a PromptAssets,
    scores: ConsistencyScores,
    config: OptimizerConfig,
}

impl<'a> PromptOptimizer<'a> {
    pub fn new(gateway: &'a Gateway, assets: &'a PromptAssets, config: OptimizerConfig) -> Self {
        assert!(config.batch_size >= 1, "batch size must be at least 1");
        Self { gateway, assets, scores: ConsistencyScores::default(), config }
    }

    pub fn with_scores(mut self, scores: ConsistencyScores) -> Self {
        self.scores = scores;
        self
    }

    fn ask(&self, role: Role, prompt: String) -> Result<String, OptimizeError> {
        let response = self.gateway.complete(&ChatRequest::new(role, None, prompt))?;
        if response.text.trim().is_empty() {
            return Err(OptimizeError::GradientEmpty(role));
        }
        Ok(response.text)
    }

    /// First gradient: feedback on how the evaluation could improve.
    pub fn gen_eval_feedback(&self, evaluation: &SentenceEvaluation) -> Result<String, OptimizeError> {
        let triplets = render_evaluated_triplets(evaluation);
        let metrics = render_metrics(evaluation);
        let prompt = self.assets.feedback.render(&[("Triplets", &triplets), ("Metrics", &metrics)])?;
        self.ask(Role::Grad1, prompt)
    }

    /// Second gradient: guidance on how the prompt should change.
    pub fn gen_prompt_guidance(
        &self,
        prompt: &PromptState,
        sentence: &SentenceRecord,
        triplets: &[Triplet],
        grad1: &str,
    ) -> Result<String, OptimizeError> {
        assert!(!grad1.trim().is_empty(), "first gradient must not be empty");
        let rendered = render_triplet_list(triplets, "\n");
        let request = self.assets.guidance.render(&[
            ("Prompt", prompt.text()),
            ("Sentence", &sentence.text),
            ("Triplets", &rendered),
            ("Feedback", grad1),
        ])?;
        self.ask(Role::Grad2, request)
    }

    /// Rewrites the prompt from one batch of feedback. On any failure the
    /// prompt is returned unchanged.
    pub fn update_prompt(&self, prompt: &PromptState, buffer: &FeedbackBuffer) -> PromptState {
        let context = build_context(buffer, self.config.context_budget);
        let outcome = self
            .assets
            .update
            .render(&[("Prompt", prompt.text()), ("Context", &context)])
            .map_err(OptimizeError::from)
            .and_then(|req| Ok(self.gateway.complete(&ChatRequest::new(Role::Update, None, req))?));
        match outcome {
            Ok(response) => match recover_prompt_text(&response.text) {
                Some(text) => prompt.updated(text, buffer.batch_index),
                None => {
                    tracing::warn!(batch = buffer.batch_index, "prompt update skipped: empty rewrite");
                    prompt.clone()
                }
            },
            Err(e) => {
                tracing::warn!(batch = buffer.batch_index, "prompt update skipped: {e}");
                prompt.clone()
            }
        }
    }

    fn process_sample(
        &self,
        prompt: &PromptState,
        sentence: &SentenceRecord,
        epoch: usize,
        batch: usize,
    ) -> SampleOutcome {
        let mut row = TraceRow {
            epoch,
            batch,
            sentence_id: sentence.id.clone(),
            prompt_version: prompt.version(),
            status: SampleStatus::Ok,
            metrics_total: 0.0,
            triplets: Vec::new(),
        };
        let extraction = match extract_triplets(self.gateway, prompt, sentence) {
            Ok(x) => x,
            Err(ExtractError::EmptyExtraction { raw_output, failures, .. }) => {
                row.status = SampleStatus::EmptyExtraction;
                ExtractionResult {
                    sentence_id: sentence.id.clone(),
                    triplets: Vec::new(),
                    raw_output,
                    parse_failures: failures,
                }
            }
            Err(e) => {
                tracing::warn!("{e}");
                row.status = SampleStatus::ExtractFailed;
                return SampleOutcome { row, record: None };
            }
        };
        let evaluation = SelfEvaluator::new(self.gateway, self.assets)
            .with_scores(self.scores)
            .evaluate_sentence(sentence, &extraction);
        row.metrics_total = evaluation.total;
        row.triplets = extraction.triplets.clone();

        let grads = self.gen_eval_feedback(&evaluation).and_then(|grad1| {
            let grad2 = self.gen_prompt_guidance(prompt, sentence, &extraction.triplets, &grad1)?;
            Ok((grad1, grad2))
        });
        match grads {
            Ok((grad1, grad2)) => SampleOutcome {
                record: Some(GradientRecord {
                    sentence_id: sentence.id.clone(),
                    sentence_text: sentence.text.clone(),
                    triplets: extraction.triplets,
                    metrics_total: evaluation.total,
                    grad1,
                    grad2,
                }),
                row,
            },
            Err(e) => {
                tracing::warn!(sentence = %sentence.id, "gradient generation failed: {e}");
                row.status = SampleStatus::GradientFailed;
                SampleOutcome { row, record: None }
            }
        }
    }

    /// One pass over `dataset` in order, one prompt update per batch.
    /// `first_batch` numbers batches continuously across epochs.
    pub fn run_epoch(
        &self,
        dataset: &[SentenceRecord],
        prompt: PromptState,
        epoch: usize,
        first_batch: usize,
    ) -> OptimizationOutcome {
        let mut prompt = prompt;
        let mut trace = Vec::with_capacity(dataset.len());
        // (mean score of the batch that produced the last update, prompt before it)
        let mut last_update: Option<(f64, String)> = None;

        for (i, batch) in dataset.chunks(self.config.batch_size).enumerate() {
            let batch_index = first_batch + i;
            let outcomes: Vec<SampleOutcome> =
                batch.par_iter().map(|s| self.process_sample(&prompt, s, epoch, batch_index)).collect();
            let mean = outcomes.iter().map(|o| o.row.metrics_total).sum::<f64>() / outcomes.len() as f64;

            let mut buffer = FeedbackBuffer::new(batch_index, self.config.batch_size);
            for outcome in outcomes {
                if let Some(record) = outcome.record {
                    buffer.push(record);
                }
                trace.push(outcome.row);
            }

            if self.config.guarded_updates {
                if let Some((previous_mean, previous_text)) = last_update.take() {
                    if mean < previous_mean {
                        tracing::info!(batch = batch_index, mean, previous_mean, "reverting last prompt update");
                        prompt = prompt.updated(previous_text, batch_index);
                        continue;
                    }
                }
            }
            if buffer.is_empty() {
                continue;
            }
            let before = prompt.text().to_owned();
            let updated = self.update_prompt(&prompt, &buffer);
            if updated.version() != prompt.version() {
                last_update = Some((mean, before));
            }
            prompt = updated;
        }
        OptimizationOutcome { prompt, trace }
    }

    /// Runs the configured number of epochs.
    pub fn run(&self, dataset: &[SentenceRecord], prompt: PromptState) -> OptimizationOutcome {
        let batches_per_epoch = dataset.len().div_ceil(self.config.batch_size);
        let mut outcome = OptimizationOutcome { prompt, trace: Vec::new() };
        for epoch in 0..self.config.epochs.max(1) {
            let next = self.run_epoch(dataset, outcome.prompt, epoch, epoch * batches_per_epoch);
            outcome.prompt = next.prompt;
            outcome.trace.extend(next.trace);
        }
        outcome
    }
}

/// Convenience wrapper over [`PromptOptimizer::run_epoch`].
pub fn run_optimization_epoch(
    gateway: &Gateway,
    assets: &PromptAssets,
    dataset: &[SentenceRecord],
    prompt: PromptState,
    batch_size: usize,
) -> OptimizationOutcome {
    let config = OptimizerConfig { batch_size, ..OptimizerConfig::default() };
    PromptOptimizer::new(gateway, assets, config).run_epoch(dataset, prompt, 0, 0)
}
