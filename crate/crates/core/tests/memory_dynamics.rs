//! Schema memory growth under scripted decisions.

use std::sync::atomic::{AtomicUsize, Ordering};

use krpo::canonicalizer::{Canonicalizer, CanonicalizerConfig, Decision, DecisionRequest, SchemaMemory, ScorerBackend};
use krpo::{SentenceRecord, Triplet};

fn sentence(i: usize) -> SentenceRecord {
    SentenceRecord::new(format!("s{i}"), "Scripted sentence.", None).unwrap()
}

fn confident_top(r: &DecisionRequest<'_>) -> Option<String> {
    r.candidates.first().filter(|c| c.score >= 0.99).map(|c| c.relation.clone())
}

#[test]
fn none_decisions_grow_memory_one_by_one() {
    let calls = AtomicUsize::new(0);
    let always_none = |_: &DecisionRequest<'_>| {
        calls.fetch_add(1, Ordering::SeqCst);
        None
    };
    let mut c = Canonicalizer::new(
        SchemaMemory::new(),
        ScorerBackend::Lexical,
        Box::new(always_none),
        CanonicalizerConfig::default(),
    );
    let k = 7;
    for i in 0..k {
        let t = Triplet::new(format!("Head{i}"), format!("relation{i}"), format!("Tail{i}")).unwrap();
        let out = c.canonicalize(&sentence(i), &t, &format!("Head{i} is linked by kind {i} to Tail{i}.")).unwrap();
        assert_eq!(out.decision, Decision::Expanded);
        assert_eq!(c.memory().len(), i + 1);
    }
    assert_eq!(c.memory().len(), k);
    // The first triplet meets an empty memory, so no decision is requested.
    assert_eq!(calls.load(Ordering::SeqCst), k - 1);
    assert!(c.memory().entries().iter().all(|e| e.use_count == 1));
}

#[test]
fn duplicate_schema_with_scripted_match_reuses_the_entry() {
    let mut c = Canonicalizer::new(
        SchemaMemory::new(),
        ScorerBackend::Lexical,
        Box::new(confident_top),
        CanonicalizerConfig::default(),
    );
    let first = Triplet::new("Pontiac Rageous", "buildDate", "1997").unwrap();
    c.canonicalize(&sentence(0), &first, "The Pontiac Rageous was built in 1997.").unwrap();
    assert_eq!(c.memory().len(), 1);

    let second = Triplet::new("Ford Model T", "constructionYear", "1908").unwrap();
    let out = c.canonicalize(&sentence(1), &second, "The Ford Model T was built in 1908.").unwrap();
    assert_eq!(out.decision, Decision::Mapped("buildDate".into()));
    assert_eq!(out.triplet.relation, "buildDate");
    assert_eq!(out.triplet.raw_relation, "constructionYear");
    assert_eq!(c.memory().len(), 1);
    assert_eq!(c.memory().entries()[0].use_count, 2);
}

#[test]
fn same_triplet_twice_never_duplicates() {
    let mut c = Canonicalizer::new(
        SchemaMemory::new(),
        ScorerBackend::Lexical,
        Box::new(confident_top),
        CanonicalizerConfig::default(),
    );
    let t = Triplet::new("Detroit", "state", "Michigan").unwrap();
    for i in 0..3 {
        let out = c.canonicalize(&sentence(i), &t, "Detroit is located in the state of Michigan.").unwrap();
        assert_eq!(out.triplet.relation, "state");
    }
    assert_eq!(c.memory().len(), 1);
    assert_eq!(c.memory().entries()[0].use_count, 3);
}

#[test]
fn every_returned_relation_is_in_memory() {
    let mut c = Canonicalizer::new(
        SchemaMemory::new(),
        ScorerBackend::Lexical,
        Box::new(confident_top),
        CanonicalizerConfig::default(),
    );
    let items = [
        ("A", "likes", "B", "A likes B."),
        ("C", "enjoys", "D", "C likes D."),
        ("E", "hates", "F", "E hates F."),
        ("G", "likes", "H", "G is fond of H."),
    ];
    let mut previous = 0;
    for (i, (s, r, o, restored)) in items.iter().enumerate() {
        let out = c.canonicalize(&sentence(i), &Triplet::new(*s, *r, *o).unwrap(), restored).unwrap();
        assert!(c.memory().get(&out.triplet.relation).is_some());
        assert!(c.memory().len() >= previous);
        previous = c.memory().len();
    }
    assert_eq!(c.memory().len(), 2);
}
