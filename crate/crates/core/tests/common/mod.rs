//! Shared helpers for the integration tests: fixture locations, random
//! instance generators and brute-force oracles that recompute metrics
//! without sharing code with the library's scorer.
#![allow(dead_code)]

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::Arc;

use krpo::config::{ConfigLayer, PipelineConfig};
use krpo::extractor::parse_triplet_list;
use krpo::gateway::{Gateway, ReplayMode, ReplayStore, RetryPolicy};
use krpo::metrics::MatchMode;
use krpo::testing::{case_study, FnTransport};
use krpo::Triplet;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::Deserialize;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

pub fn case_study_dir() -> PathBuf {
    fixtures().join("case_study")
}

pub fn golden_config(out: &Path, replay: ReplayMode) -> PipelineConfig {
    let dir = case_study_dir();
    let flags = ConfigLayer {
        dataset: Some(dir.join("dataset.jsonl")),
        out: Some(out.to_owned()),
        replay: Some(replay),
        replay_dir: Some(dir.join("replay")),
        seed_relations: Some(dir.join("seed_relations.tsv")),
        ..ConfigLayer::default()
    };
    PipelineConfig::resolve(None, flags).unwrap()
}

/// Gateway that records the scripted case-study responses into `root`.
pub fn case_study_recorder(root: &Path) -> Gateway {
    Gateway::new(ReplayStore::new(root, ReplayMode::Record), Some(Arc::new(FnTransport::new(case_study::respond))))
        .unwrap()
        .with_retry(RetryPolicy::no_delay(1))
}

pub fn golden_cli_args(out: &Path) -> Vec<String> {
    let dir = case_study_dir();
    let path = |p: PathBuf| p.to_string_lossy().into_owned();
    vec![
        "run".into(),
        "--dataset".into(),
        path(dir.join("dataset.jsonl")),
        "--out".into(),
        path(out.to_owned()),
        "--replay".into(),
        "replay".into(),
        "--replay-dir".into(),
        path(dir.join("replay")),
        "--seed-relations".into(),
        path(dir.join("seed_relations.tsv")),
        "--scorer".into(),
        "lexical".into(),
    ]
}

pub fn krpo_cli(args: &[String]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_krpo"))
        .args(args)
        .env_remove("KRPO_LLM_ENDPOINT")
        .env_remove("KRPO_LLM_MODEL")
        .env_remove("KRPO_LLM_API_KEY")
        .env("KRPO_LOG", "warn")
        .output()
        .expect("krpo binary runs")
}

pub const OUTPUT_FILES: [&str; 7] =
    ["prompt_final.txt", "trace.jsonl", "scores_window.csv", "kg.jsonl", "memory.json", "metrics.json", "metrics.csv"];

/// The four final triplets of the case study as (subject, relation, object, raw relation).
pub const GOLDEN_KG: [(&str, &str, &str, &str); 4] = [
    ("Detroit", "state", "Michigan", "state"),
    ("Pontiac Rageous", "buildDate", "1997", "productionYear"),
    ("Pontiac Rageous", "productionLocation", "Detroit", "productionLocation"),
    ("Pontiac Rageous", "productionLocation", "Michigan", "productionLocation"),
];

pub fn synthetic_dataset(n: usize) -> Vec<krpo::SentenceRecord> {
    (0..n)
        .map(|i| krpo::SentenceRecord::new(format!("s{i:02}"), &format!("Entity{i} relates Target{i}."), None).unwrap())
        .collect()
}

// Parser corpus

#[derive(Deserialize)]
pub struct CorpusSample {
    pub name: String,
    pub output: String,
    pub expected: Vec<[String; 3]>,
}

pub fn parser_corpus() -> Vec<CorpusSample> {
    let text = std::fs::read_to_string(fixtures().join("parser_corpus.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

/// Runs the parser over the corpus; returns the names of mismatching samples.
pub fn parser_corpus_failures(corpus: &[CorpusSample]) -> Vec<String> {
    corpus
        .iter()
        .filter(|sample| {
            let parsed: Vec<[String; 3]> = match parse_triplet_list(&sample.output) {
                Ok(p) => {
                    let mut seen = HashSet::new();
                    p.triplets
                        .into_iter()
                        .map(|t| [t.subject().to_owned(), t.relation().to_owned(), t.object().to_owned()])
                        .filter(|t| seen.insert(t.clone()))
                        .collect()
                }
                Err(_) => Vec::new(),
            };
            parsed != sample.expected
        })
        .map(|s| s.name.clone())
        .collect()
}

// Random metric instances

pub const VOCAB: [&str; 10] = ["alpha", "beta", "gamma", "delta", "eps", "zeta", "eta", "theta", "iota", "kappa"];

fn random_element(rng: &mut StdRng) -> String {
    let n = rng.gen_range(1..=2);
    (0..n).map(|_| *VOCAB.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

pub fn random_triplets(rng: &mut StdRng, max: usize) -> Vec<Triplet> {
    let n = rng.gen_range(0..=max);
    (0..n).map(|_| Triplet::new(random_element(rng), random_element(rng), random_element(rng)).unwrap()).collect()
}

/// Random instances with at most 4 predictions and 4 gold triplets.
pub fn random_instances(seed: u64, count: usize) -> Vec<(Vec<Triplet>, Vec<Triplet>)> {
    let mut rng: StdRng = rand::SeedableRng::seed_from_u64(seed);
    (0..count).map(|_| (random_triplets(&mut rng, 4), random_triplets(&mut rng, 4))).collect()
}

// Oracles

fn oracle_tokens(s: &str) -> Vec<String> {
    s.to_lowercase()
        .split_whitespace()
        .map(|w| w.trim_matches(|c: char| c.is_ascii_punctuation()).to_owned())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Element score written directly from the matching rule.
pub fn oracle_element(pred: &str, gold: &str, mode: MatchMode) -> f64 {
    let (p, g) = (oracle_tokens(pred), oracle_tokens(gold));
    if p == g {
        return 1.0;
    }
    if mode != MatchMode::Partial || p.is_empty() || g.is_empty() {
        return 0.0;
    }
    let overlap = p.iter().any(|t| g.contains(t));
    let (pj, gj) = (p.join(" "), g.join(" "));
    if overlap || pj.contains(&gj) || gj.contains(&pj) {
        0.5
    } else {
        0.0
    }
}

pub fn oracle_pair(p: &Triplet, g: &Triplet, mode: MatchMode) -> f64 {
    let aligned = (oracle_element(p.subject(), g.subject(), mode)
        + oracle_element(p.relation(), g.relation(), mode)
        + oracle_element(p.object(), g.object(), mode))
        / 3.0;
    if mode == MatchMode::Strict {
        return aligned;
    }
    let swapped = (oracle_element(p.subject(), g.object(), mode)
        + oracle_element(p.relation(), g.relation(), mode)
        + oracle_element(p.object(), g.subject(), mode))
        / 3.0;
    aligned.max(swapped)
}

/// Every partial injective map from prediction indices to gold indices.
pub fn injections(n_pred: usize, n_gold: usize) -> Vec<Vec<Option<usize>>> {
    fn go(
        i: usize,
        n_pred: usize,
        n_gold: usize,
        used: &mut Vec<bool>,
        cur: &mut Vec<Option<usize>>,
        out: &mut Vec<Vec<Option<usize>>>,
    ) {
        if i == n_pred {
            out.push(cur.clone());
            return;
        }
        cur.push(None);
        go(i + 1, n_pred, n_gold, used, cur, out);
        cur.pop();
        for j in 0..n_gold {
            if !used[j] {
                used[j] = true;
                cur.push(Some(j));
                go(i + 1, n_pred, n_gold, used, cur, out);
                cur.pop();
                used[j] = false;
            }
        }
    }
    let mut out = Vec::new();
    go(0, n_pred, n_gold, &mut vec![false; n_gold], &mut Vec::new(), &mut out);
    out
}

pub fn oracle_total(pred: &[Triplet], gold: &[Triplet], mode: MatchMode) -> f64 {
    injections(pred.len(), gold.len())
        .iter()
        .map(|m| {
            m.iter().enumerate().filter_map(|(i, j)| j.map(|j| oracle_pair(&pred[i], &gold[j], mode))).sum::<f64>()
        })
        .fold(0.0, f64::max)
}

pub fn oracle_prf(pred: &[Triplet], gold: &[Triplet], mode: MatchMode) -> (f64, f64, f64) {
    let total = oracle_total(pred, gold, mode);
    let p = if pred.is_empty() { 0.0 } else { total / pred.len() as f64 };
    let r = if gold.is_empty() { 0.0 } else { total / gold.len() as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f)
}

/// Strict per-element counts (subject, relation, object, pair, triple) of
/// the best strict assignment, ties resolved by more triples, then pairs,
/// subjects and objects.
pub fn oracle_element_counts(pred: &[Triplet], gold: &[Triplet]) -> [u64; 5] {
    let eq = |a: &str, b: &str| oracle_tokens(a) == oracle_tokens(b);
    let mut best: Option<([u64; 5], [u64; 5])> = None;
    for m in injections(pred.len(), gold.len()) {
        let mut counts = [0u64; 5];
        for (i, j) in m.iter().enumerate() {
            let Some(j) = j else { continue };
            let (p, g) = (&pred[i], &gold[*j]);
            let (s, r, o) = (eq(p.subject(), g.subject()), eq(p.relation(), g.relation()), eq(p.object(), g.object()));
            counts[0] += u64::from(s);
            counts[1] += u64::from(r);
            counts[2] += u64::from(o);
            counts[3] += u64::from(s && o);
            counts[4] += u64::from(s && r && o);
        }
        let key = [counts[0] + counts[1] + counts[2], counts[4], counts[3], counts[0], counts[2]];
        if best.as_ref().is_none_or(|(k, _)| key > *k) {
            best = Some((key, counts));
        }
    }
    best.map(|(_, c)| c).unwrap_or_default()
}

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-9
}
