//! Strict span-level micro F1 and paired approximate-randomization
//! significance testing.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntitySpan;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("document sets differ: {0} missing from one side")]
    DocMismatch(String),
    #[error("duplicate document id {0}")]
    DuplicateDoc(String),
    #[error("overlapping spans in document {0}")]
    OverlappingSpans(String),
    #[error("iteration count must be positive")]
    NoIterations,
}

pub type Result<T> = std::result::Result<T, EvalError>;

/// Span set for one document, the unit both evaluation and voting work on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DocSpans {
    pub doc_id: String,
    pub spans: Vec<EntitySpan>,
}

impl DocSpans {
    pub fn new(doc_id: impl Into<String>, spans: Vec<EntitySpan>) -> Self {
        DocSpans {
            doc_id: doc_id.into(),
            spans,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
}

impl Counts {
    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.r#fn)
    }

    pub fn f1(&self) -> f64 {
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }

    fn add(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.r#fn += other.r#fn;
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
    pub per_type: BTreeMap<String, Counts>,
}

fn doc_map<'a>(docs: &'a [DocSpans]) -> Result<BTreeMap<&'a str, &'a [EntitySpan]>> {
    let mut map = BTreeMap::new();
    for d in docs {
        let mut sorted: Vec<&EntitySpan> = d.spans.iter().collect();
        sorted.sort();
        for pair in sorted.windows(2) {
            if pair[0].overlaps(pair[1]) {
                return Err(EvalError::OverlappingSpans(d.doc_id.clone()));
            }
        }
        if map.insert(d.doc_id.as_str(), d.spans.as_slice()).is_some() {
            return Err(EvalError::DuplicateDoc(d.doc_id.clone()));
        }
    }
    Ok(map)
}

fn doc_counts(gold: &[EntitySpan], pred: &[EntitySpan], per_type: &mut BTreeMap<String, Counts>) -> Counts {
    // Spans within a document are non-overlapping, hence duplicate-free:
    // strict matching is exact set intersection on (start, end, label).
    let gold_set: std::collections::BTreeSet<&EntitySpan> = gold.iter().collect();
    let pred_set: std::collections::BTreeSet<&EntitySpan> = pred.iter().collect();
    let mut total = Counts::default();
    for g in &gold_set {
        let entry = per_type.entry(g.label.clone()).or_default();
        if pred_set.contains(*g) {
            total.tp += 1;
            entry.tp += 1;
        } else {
            total.r#fn += 1;
            entry.r#fn += 1;
        }
    }
    for p in &pred_set {
        if !gold_set.contains(*p) {
            total.fp += 1;
            per_type.entry(p.label.clone()).or_default().fp += 1;
        }
    }
    total
}

/// Strict micro-averaged F1: a prediction counts only on exact
/// (start, end, label) match. Zero-denominator precision/recall are 0.
pub fn strict_micro_f1(gold: &[DocSpans], pred: &[DocSpans]) -> Result<EvalReport> {
    let gold_map = doc_map(gold)?;
    let pred_map = doc_map(pred)?;
    for id in gold_map.keys() {
        if !pred_map.contains_key(id) {
            return Err(EvalError::DocMismatch(id.to_string()));
        }
    }
    for id in pred_map.keys() {
        if !gold_map.contains_key(id) {
            return Err(EvalError::DocMismatch(id.to_string()));
        }
    }
    let mut per_type = BTreeMap::new();
    let mut counts = Counts::default();
    for (id, g) in &gold_map {
        counts.add(doc_counts(g, pred_map[id], &mut per_type));
    }
    Ok(EvalReport {
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        counts,
        per_type,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignificanceResult {
    pub p_value: f64,
    pub observed_diff: f64,
    pub iterations: usize,
    pub seed: u64,
    /// `***` (p <= 0.001), `**` (p < 0.01), `*` (p < 0.05), or `n.s.`.
    pub code: String,
}

pub fn significance_code(p: f64) -> &'static str {
    if p <= 0.001 {
        "***"
    } else if p < 0.01 {
        "**"
    } else if p < 0.05 {
        "*"
    } else {
        "n.s."
    }
}

fn micro_f1_of(gold: &BTreeMap<&str, &[EntitySpan]>, pred: &BTreeMap<&str, &[EntitySpan]>) -> f64 {
    let mut per_type = BTreeMap::new();
    let mut counts = Counts::default();
    for (id, g) in gold {
        counts.add(doc_counts(g, pred[id], &mut per_type));
    }
    counts.f1()
}

/// Paired approximate randomization over documents: each iteration swaps
/// the two systems' predictions per document with probability 1/2 and
/// recomputes the micro-F1 difference. `p = (count + 1) / (iterations + 1)`
/// where `count` is how often the permuted |difference| reaches the
/// observed one.
pub fn significance_test(
    gold: &[DocSpans],
    pred_a: &[DocSpans],
    pred_b: &[DocSpans],
    iterations: usize,
    seed: u64,
) -> Result<SignificanceResult> {
    if iterations == 0 {
        return Err(EvalError::NoIterations);
    }
    let gold_map = doc_map(gold)?;
    let report_a = strict_micro_f1(gold, pred_a)?;
    let report_b = strict_micro_f1(gold, pred_b)?;
    let observed = (report_a.f1 - report_b.f1).abs();
    let a_map = doc_map(pred_a)?;
    let b_map = doc_map(pred_b)?;
    let ids: Vec<&str> = gold_map.keys().copied().collect();
    let mut count = 0usize;
    for iter in 0..iterations {
        // Per-iteration generator derived from (seed, iteration index).
        let mut rng =
            ChaCha8Rng::seed_from_u64(seed.wrapping_add((iter as u64).wrapping_mul(0x9E3779B97F4A7C15)));
        let mut perm_a = BTreeMap::new();
        let mut perm_b = BTreeMap::new();
        for &id in &ids {
            if rng.gen_bool(0.5) {
                perm_a.insert(id, b_map[id]);
                perm_b.insert(id, a_map[id]);
            } else {
                perm_a.insert(id, a_map[id]);
                perm_b.insert(id, b_map[id]);
            }
        }
        let diff = (micro_f1_of(&gold_map, &perm_a) - micro_f1_of(&gold_map, &perm_b)).abs();
        if diff >= observed - 1e-12 {
            count += 1;
        }
    }
    let p = (count + 1) as f64 / (iterations + 1) as f64;
    Ok(SignificanceResult {
        p_value: p,
        observed_diff: observed,
        iterations,
        seed,
        code: significance_code(p).to_string(),
    })
}
