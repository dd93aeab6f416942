//! Optimizer bookkeeping under record/replay.

mod common;

use std::sync::Arc;

use common::*;
use krpo::config::{ConfigLayer, PipelineConfig};
use krpo::gateway::{Gateway, ReplayMode, ReplayStore, RetryPolicy, Role};
use krpo::optimizer::{OptimizerConfig, PromptOptimizer};
use krpo::pipeline::Pipeline;
use krpo::prompts::PromptAssets;
use krpo::testing::{synthetic_llm, FnTransport, PanicTransport};
use krpo::PromptState;

fn recorder(root: &std::path::Path) -> Gateway {
    Gateway::new(ReplayStore::new(root, ReplayMode::Record), Some(Arc::new(FnTransport::new(synthetic_llm))))
        .unwrap()
        .with_retry(RetryPolicy::no_delay(1))
}

/// Store-only gateway whose transport panics if it is ever reached.
fn replayer(root: &std::path::Path) -> Gateway {
    Gateway::new(ReplayStore::new(root, ReplayMode::Replay), Some(Arc::new(PanicTransport))).unwrap()
}

fn optimize(gateway: &Gateway, n: usize, config: OptimizerConfig) -> krpo::optimizer::OptimizationOutcome {
    let assets = PromptAssets::builtin();
    let initial = PromptState::new(assets.initial_orte_prompt.clone());
    PromptOptimizer::new(gateway, &assets, config).run(&synthetic_dataset(n), initial)
}

#[test]
fn twelve_samples_in_batches_of_five() {
    let store = tempfile::tempdir().unwrap();
    let config = OptimizerConfig { batch_size: 5, ..OptimizerConfig::default() };
    let recorded = optimize(&recorder(store.path()), 12, config);

    let gateway = replayer(store.path());
    let replayed = optimize(&gateway, 12, config);
    let stats = gateway.stats();
    assert_eq!(stats.live_calls(), 0);
    assert_eq!(stats.requests(Role::Update), 3);
    assert_eq!(stats.requests(Role::Grad1), 12);
    assert_eq!(stats.requests(Role::Grad2), 12);
    assert_eq!(replayed.prompt.version(), 3);
    assert_eq!(replayed.prompt, recorded.prompt);
    assert_eq!(replayed.trace, recorded.trace);
    let batches: Vec<Option<usize>> = replayed.prompt.history().iter().map(|r| r.batch_index).collect();
    assert_eq!(batches, vec![None, Some(0), Some(1), Some(2)]);
}

#[test]
fn two_epochs_double_the_versions() {
    let store = tempfile::tempdir().unwrap();
    let one = optimize(&recorder(store.path()), 12, OptimizerConfig::default());
    let two = optimize(&recorder(store.path()), 12, OptimizerConfig { epochs: 2, ..OptimizerConfig::default() });
    assert_eq!(two.prompt.version(), 2 * one.prompt.version());
    assert_eq!(two.trace.len(), 24);
}

#[test]
fn phase_one_artifacts() {
    let store = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let data = out.path().join("data.jsonl");
    let lines: String = (0..30)
        .map(|i| format!("{{\"id\":\"s{i:02}\",\"text\":\"Entity{i} relates Target{i}.\",\"gold\":[[\"Entity{i}\",\"relates\",\"Target{i}\"]]}}\n"))
        .collect();
    std::fs::write(&data, lines).unwrap();
    let flags = ConfigLayer {
        dataset: Some(data),
        out: Some(out.path().to_owned()),
        eval_during_optimize: Some(true),
        ..ConfigLayer::default()
    };
    let config = PipelineConfig::resolve(None, flags).unwrap();
    let pipeline = Pipeline::with_gateway(config, recorder(store.path())).unwrap();
    let dataset = pipeline.load_dataset().unwrap();
    let outcome = pipeline.run_phase1(&dataset).unwrap();
    assert_eq!(outcome.prompt.version(), 6);

    let trace = std::fs::read_to_string(out.path().join("trace.jsonl")).unwrap();
    assert_eq!(trace.lines().count(), 30);
    let prompt = std::fs::read_to_string(out.path().join("prompt_final.txt")).unwrap();
    assert_eq!(prompt.trim_end(), outcome.prompt.text());
    let series = std::fs::read_to_string(out.path().join("scores_window.csv")).unwrap();
    let rows: Vec<&str> = series.lines().collect();
    assert_eq!(rows[0], "window,start_sample,end_sample,samples,mean_score,strict_f1,exact_f1,partial_f1");
    assert_eq!(rows[1], "0,0,24,25,1.000000,1.000000,1.000000,1.000000");
    assert_eq!(rows[2], "1,25,29,5,1.000000,1.000000,1.000000,1.000000");
}

#[test]
fn empty_dataset_keeps_the_initial_prompt() {
    let store = tempfile::tempdir().unwrap();
    let out = tempfile::tempdir().unwrap();
    let flags = ConfigLayer { out: Some(out.path().to_owned()), ..ConfigLayer::default() };
    let pipeline =
        Pipeline::with_gateway(PipelineConfig::resolve(None, flags).unwrap(), recorder(store.path())).unwrap();
    let outcome = pipeline.run_phase1(&[]).unwrap();
    assert_eq!(outcome.prompt.text(), PromptAssets::builtin().initial_orte_prompt);
    assert_eq!(outcome.prompt.version(), 0);
    assert_eq!(std::fs::read_to_string(out.path().join("trace.jsonl")).unwrap(), "");
}
