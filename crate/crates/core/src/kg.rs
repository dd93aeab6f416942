//! Deduplicated knowledge graph with sentence provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_key, CanonicalTriplet};
use crate::util::write_atomic;

#[derive(Debug, Error)]
pub enum KgError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}:{line}: {source}")]
    Parse { path: PathBuf, line: usize, source: serde_json::Error },
    #[error("{path}:{line}: triple has no provenance")]
    NoProvenance { path: PathBuf, line: usize },
}

/// One exported line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KgEntry {
    pub subject: String,
    pub relation: String,
    pub object: String,
    pub raw_relation: String,
    pub sentences: Vec<String>,
}

type Key = (String, String, String);

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    triples: BTreeMap<Key, KgEntry>,
}

fn key_of(subject: &str, relation: &str, object: &str) -> Key {
    (normalize_key(subject), normalize_key(relation), normalize_key(object))
}

impl KnowledgeGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    /// Returns `true` when the triple is new. Surface forms and the raw
    /// relation come from the first insertion; later duplicates only add
    /// provenance.
    pub fn insert(&mut self, t: &CanonicalTriplet) -> bool {
        let key = key_of(&t.subject, &t.relation, &t.object);
        match self.triples.get_mut(&key) {
            Some(entry) => {
                entry.sentences.push(t.sentence_id.clone());
                false
            }
            None => {
                self.triples.insert(
                    key,
                    KgEntry {
                        subject: t.subject.clone(),
                        relation: t.relation.clone(),
                        object: t.object.clone(),
                        raw_relation: t.raw_relation.clone(),
                        sentences: vec![t.sentence_id.clone()],
                    },
                );
                true
            }
        }
    }

    pub fn provenance(&self, subject: &str, relation: &str, object: &str) -> Option<&[String]> {
        self.triples.get(&key_of(subject, relation, object)).map(|e| e.sentences.as_slice())
    }

    /// Entries in key order.
    pub fn entries(&self) -> impl Iterator<Item = &KgEntry> {
        self.triples.values()
    }

    pub fn to_jsonl(&self) -> String {
        self.entries().map(|e| serde_json::to_string(e).expect("entry serializes") + "\n").collect()
    }

    pub fn export(&self, path: &Path) -> Result<(), KgError> {
        write_atomic(path, self.to_jsonl().as_bytes()).map_err(|source| KgError::Io { path: path.to_owned(), source })
    }

    pub fn import(path: &Path) -> Result<Self, KgError> {
        let text = std::fs::read_to_string(path).map_err(|source| KgError::Io { path: path.to_owned(), source })?;
        let mut kg = Self::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let entry: KgEntry = serde_json::from_str(line).map_err(|source| KgError::Parse {
                path: path.to_owned(),
                line: i + 1,
                source,
            })?;
            if entry.sentences.is_empty() {
                return Err(KgError::NoProvenance { path: path.to_owned(), line: i + 1 });
            }
            let key = key_of(&entry.subject, &entry.relation, &entry.object);
            match kg.triples.get_mut(&key) {
                Some(existing) => existing.sentences.extend(entry.sentences),
                None => {
                    kg.triples.insert(key, entry);
                }
            }
        }
        Ok(kg)
    }
}
