//! Token-level triplet matching metrics.
//!
//! Scoring rules:
//!
//! * Elements are compared as `normalize_text` token sequences. Equal
//!   sequences score 1. In `Partial` mode, sequences that share a token or
//!   whose joined forms contain one another score 0.5. Anything else
//!   scores 0.
//! * A predicted/gold pair scores the mean of its three slot-aligned element
//!   scores. `Exact` and `Partial` also try the pairing with subject and
//!   object swapped and keep the better orientation; `Strict` never swaps.
//! * Predictions and gold triplets are matched one-to-one so that the summed
//!   pair score is maximal. Pairs scoring 0 stay unmatched.
//! * Precision divides the matched total by the prediction count, recall by
//!   the gold count. Corpus figures sum totals and counts before dividing.
//!
//! Scores are kept in integer sixths internally so that totals are exact.

use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{normalize_key, normalize_text, Triplet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatchMode {
    Strict,
    Exact,
    Partial,
}

impl MatchMode {
    pub const ALL: [MatchMode; 3] = [MatchMode::Strict, MatchMode::Exact, MatchMode::Partial];

    pub fn as_str(self) -> &'static str {
        match self {
            MatchMode::Strict => "strict",
            MatchMode::Exact => "exact",
            MatchMode::Partial => "partial",
        }
    }

    fn allows_swap(self) -> bool {
        self != MatchMode::Strict
    }
}

#[derive(Debug, Error)]
#[error("unknown match mode {0:?}")]
pub struct UnknownMode(String);

impl FromStr for MatchMode {
    type Err = UnknownMode;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "strict" => Ok(MatchMode::Strict),
            "exact" => Ok(MatchMode::Exact),
            "partial" => Ok(MatchMode::Partial),
            _ => Err(UnknownMode(s.to_owned())),
        }
    }
}

/// Element score in half-units: 0, 1 (half credit) or 2 (full credit).
fn element_half_units(p: &[String], g: &[String], mode: MatchMode) -> u32 {
    if p == g {
        return 2;
    }
    if mode != MatchMode::Partial || p.is_empty() || g.is_empty() {
        return 0;
    }
    let mut remaining: Vec<&String> = g.iter().collect();
    let shares_token = p.iter().any(|tok| match remaining.iter().position(|r| *r == tok) {
        Some(i) => {
            remaining.swap_remove(i);
            true
        }
        None => false,
    });
    let (pj, gj) = (p.join(" "), g.join(" "));
    if shares_token || pj.contains(&gj) || gj.contains(&pj) {
        1
    } else {
        0
    }
}

/// Score of a single element pair: 0, 0.5 or 1.
pub fn element_match_score(pred: &str, gold: &str, mode: MatchMode) -> f64 {
    f64::from(element_half_units(&normalize_text(pred), &normalize_text(gold), mode)) / 2.0
}

struct Normalized([Vec<String>; 3]);

impl Normalized {
    fn of(t: &Triplet) -> Self {
        Self([normalize_text(t.subject()), normalize_text(t.relation()), normalize_text(t.object())])
    }
}

/// Pair score in sixths (0..=6).
fn pair_units(p: &Normalized, g: &Normalized, mode: MatchMode) -> u32 {
    let units =
        |order: [usize; 3]| -> u32 { (0..3).map(|slot| element_half_units(&p.0[slot], &g.0[order[slot]], mode)).sum() };
    let aligned = units([0, 1, 2]);
    if mode.allows_swap() {
        aligned.max(units([2, 1, 0]))
    } else {
        aligned
    }
}

/// Maximum-weight one-to-one assignment over a `rows x cols` weight matrix.
/// Returns the column assigned to each row (if any).
fn max_weight_assignment(weights: &[Vec<i128>], cols: usize) -> Vec<Option<usize>> {
    let rows = weights.len();
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let cost = |i: usize, j: usize| -> i128 {
        if transpose {
            -weights[j][i]
        } else {
            -weights[i][j]
        }
    };

    // Shortest augmenting path Hungarian method, 1-based with a virtual column 0.
    let inf = i128::MAX / 4;
    let mut u = vec![0i128; n + 1];
    let mut v = vec![0i128; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![None; rows];
    for (j, &row) in p.iter().enumerate().skip(1) {
        if row != 0 {
            let (r, c) = if transpose { (j - 1, row - 1) } else { (row - 1, j - 1) };
            if weights[r][c] > 0 {
                assignment[r] = Some(c);
            }
        }
    }
    assignment
}

#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    /// (prediction index, gold index), ordered by prediction index.
    pub pairs: Vec<(usize, usize)>,
    pub total: f64,
    total_sixths: u64,
}

fn align_normalized(pred: &[Normalized], gold: &[Normalized], mode: MatchMode) -> Alignment {
    let units: Vec<Vec<u32>> = pred.iter().map(|p| gold.iter().map(|g| pair_units(p, g, mode)).collect()).collect();
    let weights: Vec<Vec<i128>> = units.iter().map(|row| row.iter().map(|u| i128::from(*u)).collect()).collect();
    let assignment = max_weight_assignment(&weights, gold.len());
    let pairs: Vec<(usize, usize)> = assignment.iter().enumerate().filter_map(|(i, c)| c.map(|c| (i, c))).collect();
    let total_sixths: u64 = pairs.iter().map(|(i, j)| u64::from(units[*i][*j])).sum();
    Alignment { pairs, total: total_sixths as f64 / 6.0, total_sixths }
}

/// Optimal one-to-one matching of predictions to gold triplets.
pub fn align_triplets(pred: &[Triplet], gold: &[Triplet], mode: MatchMode) -> Alignment {
    let pred: Vec<Normalized> = pred.iter().map(Normalized::of).collect();
    let gold: Vec<Normalized> = gold.iter().map(Normalized::of).collect();
    align_normalized(&pred, &gold, mode)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    pub fn from_ratio(matched: f64, n_pred: usize, n_gold: usize) -> Self {
        let precision = if n_pred == 0 { 0.0 } else { matched / n_pred as f64 };
        let recall = if n_gold == 0 { 0.0 } else { matched / n_gold as f64 };
        let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
        Self { precision, recall, f1 }
    }
}

pub fn compute_prf(pred: &[Triplet], gold: &[Triplet], mode: MatchMode) -> Prf {
    Prf::from_ratio(align_triplets(pred, gold, mode).total, pred.len(), gold.len())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ElementCounts {
    pub subject: u64,
    pub relation: u64,
    pub object: u64,
    pub pair: u64,
    pub triple: u64,
}

impl ElementCounts {
    fn add(&mut self, other: &ElementCounts) {
        self.subject += other.subject;
        self.relation += other.relation;
        self.object += other.object;
        self.pair += other.pair;
        self.triple += other.triple;
    }
}

/// Matched-element counts under the strict assignment.
///
/// When several assignments reach the same strict total, the one with the
/// most full triples wins, then most subject-object pairs, then most
/// subjects, then most objects, so the counts are well defined.
pub fn per_element_counts(pred: &[Triplet], gold: &[Triplet]) -> ElementCounts {
    let pred: Vec<Normalized> = pred.iter().map(Normalized::of).collect();
    let gold: Vec<Normalized> = gold.iter().map(Normalized::of).collect();
    element_counts_normalized(&pred, &gold)
}

fn element_counts_normalized(pred: &[Normalized], gold: &[Normalized]) -> ElementCounts {
    let base = i128::try_from(pred.len().min(gold.len()) + 1).expect("triplet count fits i128");
    let flags =
        |p: &Normalized, g: &Normalized| -> [bool; 3] { [p.0[0] == g.0[0], p.0[1] == g.0[1], p.0[2] == g.0[2]] };
    let weights: Vec<Vec<i128>> = pred
        .iter()
        .map(|p| {
            gold.iter()
                .map(|g| {
                    let [s, r, o] = flags(p, g);
                    let total = i128::from(s) + i128::from(r) + i128::from(o);
                    let key = [i128::from(s && r && o), i128::from(s && o), i128::from(s), i128::from(o)];
                    key.iter().fold(total, |acc, k| acc * base + k)
                })
                .collect()
        })
        .collect();
    let mut counts = ElementCounts::default();
    for (i, col) in max_weight_assignment(&weights, gold.len()).into_iter().enumerate() {
        let Some(j) = col else { continue };
        let [s, r, o] = flags(&pred[i], &gold[j]);
        counts.subject += u64::from(s);
        counts.relation += u64::from(r);
        counts.object += u64::from(o);
        counts.pair += u64::from(s && o);
        counts.triple += u64::from(s && r && o);
    }
    counts
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ElementScores {
    pub subject: Prf,
    pub relation: Prf,
    pub object: Prf,
    pub pair: Prf,
    pub triple: Prf,
}

impl ElementScores {
    fn from_counts(c: &ElementCounts, n_pred: usize, n_gold: usize) -> Self {
        let prf = |k: u64| Prf::from_ratio(k as f64, n_pred, n_gold);
        Self {
            subject: prf(c.subject),
            relation: prf(c.relation),
            object: prf(c.object),
            pair: prf(c.pair),
            triple: prf(c.triple),
        }
    }

    fn rows(&self) -> [(&'static str, &Prf); 5] {
        [
            ("subject", &self.subject),
            ("relation", &self.relation),
            ("object", &self.object),
            ("pair", &self.pair),
            ("triple", &self.triple),
        ]
    }
}

pub fn per_element_breakdown(pred: &[Triplet], gold: &[Triplet]) -> ElementScores {
    ElementScores::from_counts(&per_element_counts(pred, gold), pred.len(), gold.len())
}

/// 1 when `gold_relation` is among the first `k` candidates.
pub fn hit_at_k(ranked_candidates: &[String], gold_relation: &str, k: usize) -> u8 {
    assert!(k >= 1, "k must be positive");
    let gold = normalize_key(gold_relation);
    u8::from(ranked_candidates.iter().take(k).any(|c| normalize_key(c) == gold))
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ModeScores {
    pub strict: Prf,
    pub exact: Prf,
    pub partial: Prf,
}

impl ModeScores {
    pub fn get(&self, mode: MatchMode) -> &Prf {
        match mode {
            MatchMode::Strict => &self.strict,
            MatchMode::Exact => &self.exact,
            MatchMode::Partial => &self.partial,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub modes: ModeScores,
    pub elements: ElementScores,
    pub n_sentences: usize,
    pub n_pred: usize,
    pub n_gold: usize,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        let mut out = serde_json::to_string_pretty(self).expect("report serializes");
        out.push('\n');
        out
    }

    /// One row per match mode followed by one row per element.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scope,name,precision,recall,f1\n");
        let mut row = |scope: &str, name: &str, p: &Prf| {
            let _ = writeln!(out, "{scope},{name},{:.6},{:.6},{:.6}", p.precision, p.recall, p.f1);
        };
        for mode in MatchMode::ALL {
            row("mode", mode.as_str(), self.modes.get(mode));
        }
        for (name, p) in self.elements.rows() {
            row("element", name, p);
        }
        out
    }
}

/// Corpus-level micro-averaging fold. Merging is associative, so sentence
/// results may be accumulated in any grouping.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsAccumulator {
    sixths: [u64; 3],
    elements: ElementCounts,
    n_sentences: usize,
    n_pred: usize,
    n_gold: usize,
}

impl MetricsAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, pred: &[Triplet], gold: &[Triplet]) {
        let p: Vec<Normalized> = pred.iter().map(Normalized::of).collect();
        let g: Vec<Normalized> = gold.iter().map(Normalized::of).collect();
        for (slot, mode) in MatchMode::ALL.into_iter().enumerate() {
            self.sixths[slot] += align_normalized(&p, &g, mode).total_sixths;
        }
        self.elements.add(&element_counts_normalized(&p, &g));
        self.n_sentences += 1;
        self.n_pred += pred.len();
        self.n_gold += gold.len();
    }

    pub fn merge(mut self, other: MetricsAccumulator) -> Self {
        for slot in 0..3 {
            self.sixths[slot] += other.sixths[slot];
        }
        self.elements.add(&other.elements);
        self.n_sentences += other.n_sentences;
        self.n_pred += other.n_pred;
        self.n_gold += other.n_gold;
        self
    }

    pub fn report(&self) -> MetricsReport {
        let prf = |slot: usize| Prf::from_ratio(self.sixths[slot] as f64 / 6.0, self.n_pred, self.n_gold);
        MetricsReport {
            modes: ModeScores { strict: prf(0), exact: prf(1), partial: prf(2) },
            elements: ElementScores::from_counts(&self.elements, self.n_pred, self.n_gold),
            n_sentences: self.n_sentences,
            n_pred: self.n_pred,
            n_gold: self.n_gold,
        }
    }
}
