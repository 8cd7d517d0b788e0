//! Majority-vote combination of span predictions from multiple models.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::EntitySpan;
use crate::eval::DocSpans;

#[derive(Debug, Error)]
pub enum EnsembleError {
    #[error("no prediction sets to combine")]
    NoModels,
    #[error("model {model}: document set differs at {doc}")]
    DocMismatch { model: String, doc: String },
}

pub type Result<T> = std::result::Result<T, EnsembleError>;

/// One model's predictions over a document collection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSet {
    pub model_id: String,
    pub docs: Vec<DocSpans>,
}

/// Priority of a candidate in the overlap cascade: more votes first, then
/// longer spans, then smaller start offset, then lexicographic label.
fn cascade_key(count: usize, span: &EntitySpan) -> (usize, usize, usize, String) {
    (
        usize::MAX - count,
        usize::MAX - (span.end - span.start),
        span.start,
        span.label.clone(),
    )
}

fn vote_doc(candidates: BTreeMap<EntitySpan, usize>, num_models: usize) -> Vec<EntitySpan> {
    // Strict majority: kept only with more than half the votes.
    let mut majority: Vec<(EntitySpan, usize)> = candidates
        .into_iter()
        .filter(|&(_, count)| 2 * count > num_models)
        .collect();
    majority.sort_by_key(|(span, count)| cascade_key(*count, span));
    let mut accepted: Vec<EntitySpan> = Vec::new();
    for (span, _) in majority {
        if accepted.iter().all(|a| !a.overlaps(&span)) {
            accepted.push(span);
        }
    }
    accepted.sort();
    accepted
}

/// Combines prediction sets by exact-span majority voting per document.
/// All sets must cover the same documents.
pub fn majority_vote(sets: &[PredictionSet]) -> Result<Vec<DocSpans>> {
    let first = sets.first().ok_or(EnsembleError::NoModels)?;
    let doc_ids: Vec<&str> = first.docs.iter().map(|d| d.doc_id.as_str()).collect();
    let mut tallies: BTreeMap<&str, BTreeMap<EntitySpan, usize>> =
        doc_ids.iter().map(|&id| (id, BTreeMap::new())).collect();
    for set in sets {
        if set.docs.len() != doc_ids.len() {
            return Err(EnsembleError::DocMismatch {
                model: set.model_id.clone(),
                doc: format!("{} documents vs {}", set.docs.len(), doc_ids.len()),
            });
        }
        for doc in &set.docs {
            let tally = tallies
                .get_mut(doc.doc_id.as_str())
                .ok_or_else(|| EnsembleError::DocMismatch {
                    model: set.model_id.clone(),
                    doc: doc.doc_id.clone(),
                })?;
            // A model votes once per exact span even if it lists it twice.
            let mut seen = std::collections::BTreeSet::new();
            for span in &doc.spans {
                if seen.insert(span) {
                    *tally.entry(span.clone()).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(doc_ids
        .iter()
        .map(|&id| DocSpans::new(id, vote_doc(tallies.remove(id).unwrap(), sets.len())))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn span(start: usize, end: usize, label: &str) -> EntitySpan {
        EntitySpan::new(start, end, label).unwrap()
    }

    fn set(model: &str, spans: Vec<EntitySpan>) -> PredictionSet {
        PredictionSet {
            model_id: model.into(),
            docs: vec![DocSpans::new("d", spans)],
        }
    }

    #[test]
    fn strict_majority_is_required() {
        // 2 of 4 models is not a strict majority; 3 of 4 is.
        let a = span(0, 2, "A");
        let b = span(5, 7, "B");
        let sets = vec![
            set("m1", vec![a.clone(), b.clone()]),
            set("m2", vec![a.clone(), b.clone()]),
            set("m3", vec![a.clone()]),
            set("m4", vec![]),
        ];
        let out = majority_vote(&sets).unwrap();
        assert_eq!(out[0].spans, vec![a]);
    }

    #[test]
    fn overlap_resolves_by_vote_count_first() {
        let wide = span(0, 6, "A");
        let narrow = span(2, 4, "B");
        let sets = vec![
            set("m1", vec![narrow.clone()]),
            set("m2", vec![narrow.clone()]),
            set("m3", vec![narrow.clone()]),
            set("m4", vec![wide.clone()]),
            set("m5", vec![wide.clone()]),
        ];
        // narrow has 3 votes of 5, wide only 2: wide misses the majority.
        let out = majority_vote(&sets).unwrap();
        assert_eq!(out[0].spans, vec![narrow.clone()]);
        // Give both a majority: narrow 5/7, wide 4/7. Despite being the
        // shorter span, narrow wins the overlap by vote count.
        let mut sets2 = sets.clone();
        sets2[3] = set("m4", vec![wide.clone(), narrow.clone()]);
        sets2.push(set("m6", vec![wide.clone()]));
        sets2.push(set("m7", vec![wide.clone(), narrow.clone()]));
        let out = majority_vote(&sets2).unwrap();
        assert_eq!(out[0].spans, vec![narrow]);
    }

    #[test]
    fn overlap_ties_prefer_longer_then_earlier_then_label() {
        let long = span(0, 5, "A");
        let short = span(3, 6, "A");
        let sets = vec![
            set("m1", vec![long.clone(), ]),
            set("m2", vec![long.clone(), short.clone()]),
            set("m3", vec![short.clone()]),
        ];
        // Both have 2 of 3 votes; the longer span wins.
        let out = majority_vote(&sets).unwrap();
        assert_eq!(out[0].spans, vec![long.clone()]);

        // Same length and start: lexicographically smaller label wins.
        let la = span(0, 3, "A");
        let lb = span(0, 3, "B");
        let sets = vec![
            set("m1", vec![la.clone()]),
            set("m2", vec![lb.clone()]),
            set("m3", vec![la.clone()]),
            set("m4", vec![lb.clone()]),
            set("m5", vec![]),
        ];
        // Neither reaches 3 of 5: empty output.
        assert!(majority_vote(&sets).unwrap()[0].spans.is_empty());
        let sets = vec![
            set("m1", vec![la.clone()]),
            set("m2", vec![lb.clone()]),
            set("m3", vec![la.clone(), ]),
        ];
        // la: 2/3 majority, lb: 1/3.
        assert_eq!(majority_vote(&sets).unwrap()[0].spans, vec![la]);
    }

    #[test]
    fn empty_and_mismatched_inputs_error() {
        assert!(matches!(majority_vote(&[]), Err(EnsembleError::NoModels)));
        let a = set("m1", vec![]);
        let mut b = set("m2", vec![]);
        b.docs[0].doc_id = "other".into();
        assert!(matches!(
            majority_vote(&[a, b]),
            Err(EnsembleError::DocMismatch { .. })
        ));
    }

    fn arb_spans() -> impl Strategy<Value = Vec<EntitySpan>> {
        proptest::collection::vec((0usize..20, 1usize..5, prop_oneof!["A", "B"]), 0..6).prop_map(
            |items| {
                items
                    .into_iter()
                    .map(|(s, len, label)| span(s, s + len, &label))
                    .collect()
            },
        )
    }

    proptest! {
        #[test]
        fn order_invariant_and_idempotent(
            sets in proptest::collection::vec(arb_spans(), 1..6),
            perm_seed in 0u64..1000,
        ) {
            let sets: Vec<PredictionSet> = sets
                .into_iter()
                .enumerate()
                .map(|(i, s)| set(&format!("m{i}"), s))
                .collect();
            let out = majority_vote(&sets).unwrap();

            // Permuting the model order never changes the vote.
            let mut permuted = sets.clone();
            let n = permuted.len();
            let mut state = perm_seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1);
                permuted.swap(i, (state as usize) % (i + 1));
            }
            prop_assert_eq!(&majority_vote(&permuted).unwrap(), &out);

            // Output spans never overlap and each has a strict majority.
            for doc in &out {
                for pair in doc.spans.windows(2) {
                    prop_assert!(!pair[0].overlaps(&pair[1]));
                }
                for s in &doc.spans {
                    let votes = sets
                        .iter()
                        .filter(|m| m.docs[0].spans.contains(s))
                        .count();
                    prop_assert!(2 * votes > sets.len());
                }
            }

            // Duplicating every set leaves the vote unchanged.
            let mut doubled = sets.clone();
            for s in &sets {
                let mut c = s.clone();
                c.model_id.push('x');
                doubled.push(c);
            }
            prop_assert_eq!(&majority_vote(&doubled).unwrap(), &out);

            // Voting over m copies of a conflict-free result is idempotent.
            let unanimous: Vec<PredictionSet> = (0..3)
                .map(|i| PredictionSet {
                    model_id: format!("u{i}"),
                    docs: out.clone(),
                })
                .collect();
            prop_assert_eq!(&majority_vote(&unanimous).unwrap(), &out);
        }
    }
}
