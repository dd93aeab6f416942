//! End-to-end orchestration: dataset ingestion, prompt optimization,
//! extraction with canonicalization, and evaluation.

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::Deserialize;
use thiserror::Error;

use crate::canonicalizer::{
    CanonError, Canonicalizer, CanonicalizerConfig, LlmDecider, MemoryError, RemoteScorer, SchemaMemory, ScorerBackend,
};
use crate::config::{ConfigError, PipelineConfig, ScorerKind};
use crate::evaluator::SelfEvaluator;
use crate::extractor::{extract_triplets, ExtractError};
use crate::gateway::{Gateway, GatewayError, HttpTransport, ReplayMode, ReplayStore, Transport};
use crate::kg::{KgError, KnowledgeGraph};
use crate::metrics::{MetricsAccumulator, MetricsReport};
use crate::model::{PromptState, SentenceRecord, Triplet};
use crate::optimizer::{OptimizationOutcome, OptimizerConfig, PromptOptimizer, TraceRow};
use crate::prompts::{PromptAssets, PromptError};
use crate::util::write_atomic;

pub const PROMPT_FILE: &str = "prompt_final.txt";
pub const TRACE_FILE: &str = "trace.jsonl";
pub const WINDOW_FILE: &str = "scores_window.csv";
pub const KG_FILE: &str = "kg.jsonl";
pub const MEMORY_FILE: &str = "memory.json";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {reason}")]
    Parse { path: PathBuf, line: usize, reason: String },
    #[error("{path}:{line}: duplicate sentence id {id:?}")]
    DuplicateId { path: PathBuf, line: usize, id: String },
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Canon(#[from] CanonError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{count} sentence(s) lack gold triplets, first: {first:?}")]
    MissingGold { count: usize, first: String },
    #[error("thread pool: {0}")]
    ThreadPool(String),
}

#[derive(Deserialize)]
struct DatasetLine {
    id: String,
    text: String,
    #[serde(default)]
    gold: Option<Vec<Triplet>>,
}

/// Reads a JSONL dataset, one `{"id", "text", "gold"?}` object per line.
pub fn load_dataset(path: &Path) -> Result<Vec<SentenceRecord>, DatasetError> {
    let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io { path: path.to_owned(), source })?;
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| DatasetError::Parse { path: path.to_owned(), line: i + 1, reason };
        let raw: DatasetLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if !seen.insert(raw.id.clone()) {
            return Err(DatasetError::DuplicateId { path: path.to_owned(), line: i + 1, id: raw.id });
        }
        let record = SentenceRecord::new(raw.id, &raw.text, raw.gold).ok_or_else(|| parse_err("empty text".into()))?;
        records.push(record);
    }
    Ok(records)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), PipelineError> {
    write_atomic(path, bytes).map_err(|source| PipelineError::Io { path: path.to_owned(), source })
}

/// Rolling mean of per-sample scores over consecutive windows of `window`
/// samples. F1 columns are added when `gold` is given.
pub fn window_series_csv(trace: &[TraceRow], window: usize, gold: Option<&BTreeMap<&str, &[Triplet]>>) -> String {
    assert!(window >= 1, "window must be positive");
    let mut out = String::from("window,start_sample,end_sample,samples,mean_score");
    if gold.is_some() {
        out.push_str(",strict_f1,exact_f1,partial_f1");
    }
    out.push('\n');
    for (w, rows) in trace.chunks(window).enumerate() {
        let start = w * window;
        let mean = rows.iter().map(|r| r.metrics_total).sum::<f64>() / rows.len() as f64;
        out.push_str(&format!("{w},{start},{},{},{mean:.6}", start + rows.len() - 1, rows.len()));
        if let Some(gold) = gold {
            let mut acc = MetricsAccumulator::new();
            for row in rows {
                acc.add(&row.triplets, gold.get(row.sentence_id.as_str()).copied().unwrap_or(&[]));
            }
            let m = acc.report().modes;
            out.push_str(&format!(",{:.6},{:.6},{:.6}", m.strict.f1, m.exact.f1, m.partial.f1));
        }
        out.push('\n');
    }
    out
}

fn gold_index(dataset: &[SentenceRecord]) -> Result<BTreeMap<&str, &[Triplet]>, PipelineError> {
    let missing: Vec<&SentenceRecord> = dataset.iter().filter(|r| r.gold.is_none()).collect();
    if let Some(first) = missing.first() {
        return Err(PipelineError::MissingGold { count: missing.len(), first: first.id.clone() });
    }
    Ok(dataset.iter().map(|r| (r.id.as_str(), r.gold.as_deref().unwrap_or(&[]))).collect())
}

/// Predicted triplets per sentence, reconstructed from KG provenance.
pub fn predictions_from_kg(kg: &KnowledgeGraph) -> BTreeMap<String, Vec<Triplet>> {
    let mut out: BTreeMap<String, Vec<Triplet>> = BTreeMap::new();
    for entry in kg.entries() {
        let Ok(t) = Triplet::new(&entry.subject, &entry.relation, &entry.object) else {
            tracing::warn!(subject = %entry.subject, relation = %entry.relation, "skipping invalid stored triple");
            continue;
        };
        let mut seen = HashSet::new();
        for id in &entry.sentences {
            if seen.insert(id) {
                out.entry(id.clone()).or_default().push(t.clone());
            }
        }
    }
    out
}

pub struct Phase2Outcome {
    pub kg: KnowledgeGraph,
    pub memory: SchemaMemory,
}

pub struct Pipeline {
    config: PipelineConfig,
    gateway: Gateway,
    assets: PromptAssets,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    /// Builds the model gateway from the configuration. Live modes read the
    /// endpoint from the environment; replay mode never touches the network.
    pub fn new(config: PipelineConfig) -> Result<Self, PipelineError> {
        let store = ReplayStore::new(&config.replay_dir, config.replay);
        let transport: Option<Arc<dyn Transport>> = match config.replay {
            ReplayMode::Replay => None,
            _ => Some(Arc::new(HttpTransport::from_env()?)),
        };
        let gateway = Gateway::new(store, transport)?;
        Self::with_gateway(config, gateway)
    }

    pub fn with_gateway(config: PipelineConfig, gateway: Gateway) -> Result<Self, PipelineError> {
        config.validate()?;
        let assets = match &config.prompts_dir {
            Some(dir) => PromptAssets::from_dir(dir)?,
            None => PromptAssets::builtin(),
        };
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = config.parallelism {
            builder = builder.num_threads(n);
        }
        let pool = builder.build().map_err(|e| PipelineError::ThreadPool(e.to_string()))?;
        Ok(Self { config, gateway, assets, pool })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn gateway(&self) -> &Gateway {
        &self.gateway
    }

    fn out_path(&self, name: &str) -> PathBuf {
        self.config.out.join(name)
    }

    fn ensure_out_dir(&self) -> Result<(), PipelineError> {
        std::fs::create_dir_all(&self.config.out)
            .map_err(|source| PipelineError::Io { path: self.config.out.clone(), source })
    }

    pub fn load_dataset(&self) -> Result<Vec<SentenceRecord>, PipelineError> {
        Ok(load_dataset(self.config.dataset_path()?)?)
    }

    pub fn initial_prompt(&self) -> Result<String, PipelineError> {
        match &self.config.initial_prompt {
            Some(path) => read_prompt_file(path),
            None => Ok(self.assets.initial_orte_prompt.clone()),
        }
    }

    /// Optimizes the extraction prompt and writes the final prompt, the
    /// per-sample trace and the rolling score series.
    pub fn run_phase1(&self, dataset: &[SentenceRecord]) -> Result<OptimizationOutcome, PipelineError> {
        self.ensure_out_dir()?;
        let config = OptimizerConfig {
            batch_size: self.config.batch_size,
            epochs: self.config.epochs,
            context_budget: self.config.context_budget,
            guarded_updates: self.config.guarded_updates,
        };
        let initial = PromptState::new(self.initial_prompt()?);
        let optimizer =
            PromptOptimizer::new(&self.gateway, &self.assets, config).with_scores(self.config.consistency_scores);
        let outcome = self.pool.install(|| optimizer.run(dataset, initial));
        tracing::info!(
            version = outcome.prompt.version(),
            samples = outcome.trace.len(),
            "prompt optimization finished"
        );

        write_file(&self.out_path(PROMPT_FILE), format!("{}\n", outcome.prompt.text()).as_bytes())?;
        let trace: String =
            outcome.trace.iter().map(|row| serde_json::to_string(row).expect("trace row serializes") + "\n").collect();
        write_file(&self.out_path(TRACE_FILE), trace.as_bytes())?;

        let gold = if self.config.eval_during_optimize {
            match gold_index(dataset) {
                Ok(gold) => Some(gold),
                Err(e) => {
                    tracing::warn!("skipping F1 columns of the score series: {e}");
                    None
                }
            }
        } else {
            None
        };
        let series = window_series_csv(&outcome.trace, self.config.window, gold.as_ref());
        write_file(&self.out_path(WINDOW_FILE), series.as_bytes())?;
        Ok(outcome)
    }

    fn scorer(&self) -> ScorerBackend {
        match self.config.scorer {
            ScorerKind::Lexical => ScorerBackend::Lexical,
            ScorerKind::Remote => ScorerBackend::Remote(RemoteScorer::new(&self.config.scorer_endpoint)),
        }
    }

    fn initial_memory(&self) -> Result<SchemaMemory, PipelineError> {
        Ok(match &self.config.seed_relations {
            Some(path) => SchemaMemory::load_seed(path)?,
            None => SchemaMemory::new(),
        })
    }

    /// Extracts with `prompt`, canonicalizes every triplet in dataset order
    /// and writes the knowledge graph and schema memory.
    pub fn run_phase2(&self, dataset: &[SentenceRecord], prompt: &str) -> Result<Phase2Outcome, PipelineError> {
        self.ensure_out_dir()?;
        let prompt = PromptState::new(prompt);
        let evaluator = SelfEvaluator::new(&self.gateway, &self.assets).with_scores(self.config.consistency_scores);

        // Extraction and restoration are independent per sentence.
        let restored: Vec<Vec<(Triplet, String)>> = self.pool.install(|| {
            dataset
                .par_iter()
                .map(|sentence| {
                    let triplets = match extract_triplets(&self.gateway, &prompt, sentence) {
                        Ok(result) => result.triplets,
                        Err(e @ ExtractError::EmptyExtraction { .. }) => {
                            tracing::info!("{e}");
                            Vec::new()
                        }
                        Err(e) => {
                            tracing::warn!("{e}");
                            Vec::new()
                        }
                    };
                    triplets
                        .into_iter()
                        .map(|t| {
                            let text = evaluator.restore_triplet(&t).unwrap_or_else(|e| {
                                tracing::warn!(sentence = %sentence.id, "restoration failed, using the bare triplet: {e}");
                                format!("{} {} {}", t.subject(), t.relation(), t.object())
                            });
                            (t, text)
                        })
                        .collect()
                })
                .collect()
        });

        // Memory mutation is order dependent, so canonicalization is sequential.
        let decider = LlmDecider::new(&self.gateway, &self.assets);
        let config =
            CanonicalizerConfig { top_k: self.config.top_k, fallback_to_lexical: self.config.fallback_to_lexical };
        let mut canonicalizer = Canonicalizer::new(self.initial_memory()?, self.scorer(), Box::new(decider), config);
        let mut kg = KnowledgeGraph::new();
        for (sentence, items) in dataset.iter().zip(&restored) {
            for (triplet, text) in items {
                let outcome = canonicalizer.canonicalize(sentence, triplet, text)?;
                kg.insert(&outcome.triplet);
            }
        }
        let memory = canonicalizer.into_memory();
        tracing::info!(triples = kg.len(), relations = memory.len(), "extraction finished");

        kg.export(&self.out_path(KG_FILE))?;
        memory.save(&self.out_path(MEMORY_FILE))?;
        Ok(Phase2Outcome { kg, memory })
    }

    /// Scores the knowledge graph's per-sentence predictions against gold.
    pub fn run_eval(&self, dataset: &[SentenceRecord], kg: &KnowledgeGraph) -> Result<MetricsReport, PipelineError> {
        self.ensure_out_dir()?;
        let gold = gold_index(dataset)?;
        let predictions = predictions_from_kg(kg);
        let known: HashSet<&str> = gold.keys().copied().collect();
        let stray = predictions.keys().filter(|id| !known.contains(id.as_str())).count();
        if stray > 0 {
            tracing::warn!(stray, "predictions for sentences outside the dataset are ignored");
        }
        let report = self.pool.install(|| {
            dataset
                .par_iter()
                .map(|r| {
                    let mut acc = MetricsAccumulator::new();
                    acc.add(predictions.get(&r.id).map(Vec::as_slice).unwrap_or(&[]), gold[r.id.as_str()]);
                    acc
                })
                .reduce(MetricsAccumulator::new, MetricsAccumulator::merge)
                .report()
        });
        write_file(&self.out_path(METRICS_JSON), report.to_json().as_bytes())?;
        write_file(&self.out_path(METRICS_CSV), report.to_csv().as_bytes())?;
        Ok(report)
    }

    /// Both phases followed by evaluation when every sentence has gold.
    pub fn run_all(&self) -> Result<Option<MetricsReport>, PipelineError> {
        let dataset = self.load_dataset()?;
        let optimized = self.run_phase1(&dataset)?;
        let phase2 = self.run_phase2(&dataset, optimized.prompt.text())?;
        if dataset.iter().any(|r| r.gold.is_none()) {
            tracing::info!("dataset has no gold triplets; skipping evaluation");
            return Ok(None);
        }
        Ok(Some(self.run_eval(&dataset, &phase2.kg)?))
    }
}

/// Reads a prompt file, dropping trailing whitespace.
pub fn read_prompt_file(path: &Path) -> Result<String, PipelineError> {
    let text = std::fs::read_to_string(path).map_err(|source| PipelineError::Io { path: path.to_owned(), source })?;
    let text = text.trim_end().to_owned();
    if text.trim().is_empty() {
        return Err(ConfigError::Invalid(format!("{} is empty", path.display())).into());
    }
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optimizer::SampleStatus;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn dataset_loading() {
        let dir = tempfile::tempdir().unwrap();
        let path = write(
            dir.path(),
            "d.jsonl",
            "{\"id\":\"a\",\"text\":\"First.\"}\n\n{\"id\":\"b\",\"text\":\"Second.\",\"gold\":[[\"x\",\"y\",\"z\"]]}\n",
        );
        let records = load_dataset(&path).unwrap();
        assert_eq!(records.iter().map(|r| r.id.as_str()).collect::<Vec<_>>(), vec!["a", "b"]);
        assert_eq!(records[1].gold.as_ref().unwrap()[0], Triplet::new("x", "y", "z").unwrap());
        assert!(records[0].gold.is_none());
    }

    #[test]
    fn dataset_errors() {
        let dir = tempfile::tempdir().unwrap();
        let missing_text = write(dir.path(), "a.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"b\"}\n");
        assert!(matches!(load_dataset(&missing_text), Err(DatasetError::Parse { line: 2, .. })));
        let dup = write(dir.path(), "b.jsonl", "{\"id\":\"a\",\"text\":\"x\"}\n{\"id\":\"a\",\"text\":\"y\"}\n");
        assert!(matches!(load_dataset(&dup), Err(DatasetError::DuplicateId { line: 2, .. })));
        let bad_gold = write(dir.path(), "c.jsonl", "{\"id\":\"a\",\"text\":\"x\",\"gold\":[[\"a\",\"b\"]]}\n");
        assert!(matches!(load_dataset(&bad_gold), Err(DatasetError::Parse { line: 1, .. })));
        let blank = write(dir.path(), "d.jsonl", "{\"id\":\"a\",\"text\":\"  \"}\n");
        assert!(matches!(load_dataset(&blank), Err(DatasetError::Parse { line: 1, .. })));
    }

    fn row(id: &str, score: f64) -> TraceRow {
        TraceRow {
            epoch: 0,
            batch: 0,
            sentence_id: id.into(),
            prompt_version: 0,
            status: SampleStatus::Ok,
            metrics_total: score,
            triplets: vec![Triplet::new("a", "b", "c").unwrap()],
        }
    }

    #[test]
    fn window_series() {
        let trace: Vec<TraceRow> = (0..5).map(|i| row(&format!("s{i}"), i as f64)).collect();
        let csv = window_series_csv(&trace, 2, None);
        assert_eq!(
            csv,
            "window,start_sample,end_sample,samples,mean_score\n0,0,1,2,0.500000\n1,2,3,2,2.500000\n2,4,4,1,4.000000\n"
        );
        let gold_triplets = vec![Triplet::new("a", "b", "c").unwrap()];
        let gold: BTreeMap<&str, &[Triplet]> = [("s0", gold_triplets.as_slice())].into_iter().collect();
        let csv = window_series_csv(&trace[..2], 25, Some(&gold));
        assert_eq!(csv.lines().nth(1), Some("0,0,1,2,0.500000,0.666667,0.666667,0.666667"));
    }

    #[test]
    fn kg_predictions_follow_provenance() {
        use crate::model::CanonicalTriplet;
        let mut kg = KnowledgeGraph::new();
        for sid in ["s1", "s2", "s1"] {
            kg.insert(&CanonicalTriplet {
                subject: "a".into(),
                relation: "b".into(),
                object: "c".into(),
                raw_relation: "b".into(),
                sentence_id: sid.into(),
            });
        }
        let preds = predictions_from_kg(&kg);
        assert_eq!(preds["s1"].len(), 1);
        assert_eq!(preds["s2"].len(), 1);
    }

    #[test]
    fn prompt_file_reading() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(read_prompt_file(&write(dir.path(), "p.txt", "Line\nTwo\n\n")).unwrap(), "Line\nTwo");
        assert!(read_prompt_file(&write(dir.path(), "e.txt", "\n")).is_err());
    }
}
