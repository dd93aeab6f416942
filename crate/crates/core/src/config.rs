//! Pipeline configuration: defaults, overridden by a TOML file, overridden
//! by command-line flags.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::canonicalizer::DEFAULT_TOP_K;
use crate::evaluator::ConsistencyScores;
use crate::gateway::ReplayMode;
use crate::optimizer::{DEFAULT_BATCH_SIZE, DEFAULT_CONTEXT_BUDGET};

pub const DEFAULT_WINDOW: usize = 25;
pub const DEFAULT_SCORER_ENDPOINT: &str = "http://127.0.0.1:8000";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScorerKind {
    Remote,
    #[default]
    Lexical,
}

impl FromStr for ScorerKind {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "remote" => Ok(ScorerKind::Remote),
            "lexical" => Ok(ScorerKind::Lexical),
            other => Err(ConfigError::Invalid(format!("unknown scorer {other:?}"))),
        }
    }
}

/// One configuration source. Unset fields defer to the layer below.
#[derive(Debug, Clone, Default, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigLayer {
    pub dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub batch_size: Option<usize>,
    pub top_k: Option<usize>,
    pub epochs: Option<usize>,
    pub scorer: Option<ScorerKind>,
    pub scorer_endpoint: Option<String>,
    pub fallback_to_lexical: Option<bool>,
    pub replay: Option<ReplayMode>,
    pub replay_dir: Option<PathBuf>,
    pub seed_relations: Option<PathBuf>,
    pub context_budget: Option<usize>,
    pub parallelism: Option<usize>,
    pub guarded_updates: Option<bool>,
    pub eval_during_optimize: Option<bool>,
    pub prompts_dir: Option<PathBuf>,
    pub initial_prompt: Option<PathBuf>,
    pub window: Option<usize>,
    /// Scores per NLI label; missing keys keep their defaults.
    pub consistency_scores: Option<ConsistencyScores>,
}

impl ConfigLayer {
    pub fn from_toml_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_owned(), source })?;
        toml::from_str(&text).map_err(|source| ConfigError::Toml { path: path.to_owned(), source })
    }

    fn apply(self, cfg: &mut PipelineConfig) {
        macro_rules! set {
            ($($field:ident),*) => { $( if let Some(v) = self.$field { cfg.$field = v; } )* };
        }
        macro_rules! set_opt {
            ($($field:ident),*) => { $( if self.$field.is_some() { cfg.$field = self.$field; } )* };
        }
        set!(
            out,
            batch_size,
            top_k,
            epochs,
            scorer,
            scorer_endpoint,
            fallback_to_lexical,
            replay,
            replay_dir,
            context_budget,
            guarded_updates,
            eval_during_optimize,
            window,
            consistency_scores
        );
        set_opt!(dataset, seed_relations, parallelism, prompts_dir, initial_prompt);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PipelineConfig {
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub batch_size: usize,
    pub top_k: usize,
    pub epochs: usize,
    pub scorer: ScorerKind,
    pub scorer_endpoint: String,
    pub fallback_to_lexical: bool,
    pub replay: ReplayMode,
    pub replay_dir: PathBuf,
    pub seed_relations: Option<PathBuf>,
    pub context_budget: usize,
    /// Worker threads; `None` uses one per core.
    pub parallelism: Option<usize>,
    pub guarded_updates: bool,
    pub eval_during_optimize: bool,
    /// Directory overriding the built-in instruction templates.
    pub prompts_dir: Option<PathBuf>,
    /// File replacing the built-in initial extraction prompt.
    pub initial_prompt: Option<PathBuf>,
    /// Samples per row of the rolling score series.
    pub window: usize,
    pub consistency_scores: ConsistencyScores,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            out: PathBuf::from("out"),
            batch_size: DEFAULT_BATCH_SIZE,
            top_k: DEFAULT_TOP_K,
            epochs: 1,
            scorer: ScorerKind::default(),
            scorer_endpoint: DEFAULT_SCORER_ENDPOINT.to_owned(),
            fallback_to_lexical: true,
            replay: ReplayMode::Passthrough,
            replay_dir: PathBuf::from("replay"),
            seed_relations: None,
            context_budget: DEFAULT_CONTEXT_BUDGET,
            parallelism: None,
            guarded_updates: false,
            eval_during_optimize: false,
            prompts_dir: None,
            initial_prompt: None,
            window: DEFAULT_WINDOW,
            consistency_scores: ConsistencyScores::default(),
        }
    }
}

impl PipelineConfig {
    /// Merges defaults, then `file`, then `flags`, and validates the result.
    pub fn resolve(file: Option<ConfigLayer>, flags: ConfigLayer) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        if let Some(file) = file {
            file.apply(&mut cfg);
        }
        flags.apply(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("batch_size", self.batch_size),
            ("top_k", self.top_k),
            ("epochs", self.epochs),
            ("context_budget", self.context_budget),
            ("window", self.window),
            ("parallelism", self.parallelism.unwrap_or(1)),
        ];
        for (name, value) in positive {
            if value == 0 {
                return Err(ConfigError::Invalid(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> Result<&Path, ConfigError> {
        self.dataset.as_deref().ok_or_else(|| ConfigError::Invalid("no dataset given".into()))
    }
}
