//! Open-domain relational triplet extraction with a self-improving prompt.
//!
//! The crate is organised around the two phases of the pipeline:
//!
//! * **Prompt optimization** ([`optimizer`]): triplets are extracted with the
//!   current prompt ([`extractor`]), restored to sentences and judged against
//!   the source with NLI ([`evaluator`]); the resulting scores are turned into
//!   textual feedback that rewrites the prompt once per batch.
//! * **Extraction and canonicalization** ([`canonicalizer`], [`kg`]): the
//!   optimized prompt extracts triplets whose relations are aligned against a
//!   growing schema memory before being stored in a knowledge graph.
//!
//! Every model call goes through [`gateway`], which can record responses to
//! disk and replay them later so that runs are deterministic and offline.
//! [`metrics`] implements the token-level evaluation protocol and
//! [`pipeline`] wires everything together for the `krpo` binary.

pub mod canonicalizer;
pub mod config;
pub mod evaluator;
pub mod extractor;
pub mod gateway;
pub mod kg;
pub mod metrics;
pub mod model;
pub mod optimizer;
pub mod pipeline;
pub mod prompts;
#[doc(hidden)]
pub mod testing;
mod util;

pub use model::{
    normalize_text, parse_triplet_literal, CanonicalTriplet, NliLabel, PromptState, SentenceRecord, Triplet,
    TripletError,
};
