//! The metric implementation checked against brute-force recomputation.

mod common;

use common::*;
use krpo::metrics::{
    align_triplets, compute_prf, hit_at_k, per_element_breakdown, per_element_counts, MatchMode, MetricsAccumulator,
};
use krpo::Triplet;
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

fn t(s: &str, r: &str, o: &str) -> Triplet {
    Triplet::new(s, r, o).unwrap()
}

#[test]
fn compute_prf_matches_exhaustive_oracle() {
    for (pred, gold) in random_instances(7, 500) {
        for mode in MatchMode::ALL {
            let got = compute_prf(&pred, &gold, mode);
            let (p, r, f) = oracle_prf(&pred, &gold, mode);
            assert!(
                close(got.precision, p) && close(got.recall, r) && close(got.f1, f),
                "{mode:?} pred={pred:?} gold={gold:?}: {got:?} vs ({p}, {r}, {f})"
            );
        }
    }
}

#[test]
fn larger_instances_match_oracle() {
    let mut rng = StdRng::seed_from_u64(11);
    for _ in 0..40 {
        let pred = random_triplets(&mut rng, 6);
        let gold = random_triplets(&mut rng, 6);
        for mode in MatchMode::ALL {
            assert!(close(align_triplets(&pred, &gold, mode).total, oracle_total(&pred, &gold, mode)));
        }
    }
}

#[test]
fn strict_exact_partial_dominance() {
    for (pred, gold) in random_instances(7, 500) {
        let s = compute_prf(&pred, &gold, MatchMode::Strict).f1;
        let e = compute_prf(&pred, &gold, MatchMode::Exact).f1;
        let p = compute_prf(&pred, &gold, MatchMode::Partial).f1;
        assert!(s <= e && e <= p, "{s} {e} {p} for {pred:?} / {gold:?}");
    }
}

#[test]
fn assignment_is_injective() {
    for (pred, gold) in random_instances(3, 200) {
        let a = align_triplets(&pred, &gold, MatchMode::Partial);
        let mut golds: Vec<usize> = a.pairs.iter().map(|(_, g)| *g).collect();
        golds.sort_unstable();
        golds.dedup();
        assert_eq!(golds.len(), a.pairs.len());
    }
}

#[test]
fn element_breakdown_matches_oracle_on_corpus() {
    let corpus = random_instances(21, 20);
    let mut acc = MetricsAccumulator::new();
    let mut expected = [0u64; 5];
    let (mut n_pred, mut n_gold) = (0, 0);
    for (pred, gold) in &corpus {
        acc.add(pred, gold);
        let c = per_element_counts(pred, gold);
        let oracle = oracle_element_counts(pred, gold);
        assert_eq!([c.subject, c.relation, c.object, c.pair, c.triple], oracle, "{pred:?} / {gold:?}");
        for k in 0..5 {
            expected[k] += oracle[k];
        }
        n_pred += pred.len();
        n_gold += gold.len();
    }
    let report = acc.report();
    let e = report.elements;
    for (got, count) in [e.subject, e.relation, e.object, e.pair, e.triple].iter().zip(expected) {
        let p = count as f64 / n_pred as f64;
        let r = count as f64 / n_gold as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        assert!(close(got.precision, p) && close(got.recall, r) && close(got.f1, f));
    }
}

#[test]
fn hand_scored_fixture() {
    // Hand-scored: the first prediction is exact, the second has a wrong
    // relation, the third swaps subject and object, the fourth is spurious.
    let gold = [
        t("Aarhus", "country", "Denmark"),
        t("Aarhus", "mayor", "Jacob Bundsgaard"),
        t("Denmark", "capital", "Copenhagen"),
    ];
    let pred = [
        t("Aarhus", "country", "Denmark"),
        t("Aarhus", "leader", "Jacob Bundsgaard"),
        t("Copenhagen", "capital", "Denmark"),
        t("Aarhus", "population", "300000"),
    ];
    let e = per_element_breakdown(&pred, &gold);
    // Strict credit: the exact triple, subject and object of the mayor triple,
    // and only the relation of the swapped triple.
    let prf = |k: f64| (k / 4.0, k / 3.0);
    assert_eq!((e.subject.precision, e.subject.recall), prf(2.0));
    assert_eq!((e.relation.precision, e.relation.recall), prf(2.0));
    assert_eq!((e.object.precision, e.object.recall), prf(2.0));
    assert_eq!((e.pair.precision, e.pair.recall), prf(2.0));
    assert_eq!((e.triple.precision, e.triple.recall), prf(1.0));
    let exact = compute_prf(&pred, &gold, MatchMode::Exact);
    assert!(close(exact.precision, (1.0 + 2.0 / 3.0 + 1.0) / 4.0));
}

#[test]
fn hit_at_k_aggregate_is_monotone() {
    let mut rng = StdRng::seed_from_u64(5);
    let relations: Vec<String> = (0..12).map(|i| format!("rel{i}")).collect();
    let (mut h1, mut h3, mut h5) = (0u32, 0u32, 0u32);
    for _ in 0..200 {
        let mut ranked = relations.clone();
        ranked.shuffle(&mut rng);
        ranked.truncate(rng.gen_range(0..=8));
        let gold = relations.choose(&mut rng).unwrap();
        let (a, b, c) = (hit_at_k(&ranked, gold, 1), hit_at_k(&ranked, gold, 3), hit_at_k(&ranked, gold, 5));
        assert!(a <= b && b <= c);
        h1 += u32::from(a);
        h3 += u32::from(b);
        h5 += u32::from(c);
    }
    assert!(h1 <= h3 && h3 <= h5);
    assert!(h5 > 0);
}
