//! Deterministic synthetic corpora for tests and demos.
//!
//! Three built-in tasks: two related ones sharing most of their surface
//! vocabulary, and one drawn from a disjoint vocabulary. Text is canonical
//! single-space form, so character offsets are trivially consistent.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{Corpus, Document, EntitySpan};

/// Recipe for one synthetic labeling task.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub name: String,
    /// Entity type -> candidate surface forms (may be multi-word).
    pub lexicons: Vec<(String, Vec<String>)>,
    pub fillers: Vec<String>,
    /// Probability that the next sentence item is an entity mention.
    pub entity_prob: f64,
}

fn words(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

const SHARED_FILLERS: &[&str] = &[
    "the", "patient", "was", "given", "after", "with", "showed", "signs",
    "of", "during", "visit", "and", "no", "further", "noted", "stable",
    "on", "review", "daily", "dose",
];

const COND_SURFACES: &[&str] = &[
    "renal failure",
    "sepsis",
    "anemia",
    "cardiac arrest",
    "hypertension",
    "liver injury",
    "migraine",
    "acute pancreatitis",
];

const DRUG_SURFACES: &[&str] = &[
    "metformin",
    "aspirin",
    "heparin",
    "insulin glargine",
    "warfarin",
    "lisinopril",
];

/// Two-type task: conditions and drugs.
pub fn task_primary() -> TaskSpec {
    TaskSpec {
        name: "cond-drug".into(),
        lexicons: vec![
            ("COND".into(), words(COND_SURFACES)),
            ("DRUG".into(), words(DRUG_SURFACES)),
        ],
        fillers: words(SHARED_FILLERS),
        entity_prob: 0.35,
    }
}

/// Single-type task over mostly the same surface vocabulary.
pub fn task_related() -> TaskSpec {
    let mut surfaces = words(&COND_SURFACES[..6]);
    surfaces.push("chronic fatigue".into());
    TaskSpec {
        name: "cond-only".into(),
        lexicons: vec![("COND".into(), surfaces)],
        fillers: words(SHARED_FILLERS),
        entity_prob: 0.35,
    }
}

/// Task from a disjoint vocabulary (different word shapes entirely).
pub fn task_unrelated() -> TaskSpec {
    TaskSpec {
        name: "cite".into(),
        lexicons: vec![(
            "CITE".into(),
            words(&[
                "zq901 v kkx",
                "uvx 77",
                "qqz docket",
                "xkcd 1102",
                "zzv appeal",
            ]),
        )],
        fillers: words(&[
            "court", "rules", "upheld", "motion", "denied", "judge", "filed",
            "under", "statute", "per", "curiam", "order", "brief",
        ]),
        entity_prob: 0.3,
    }
}

/// Deterministic corpus: `num_docs` documents of 2-6 sentences each.
pub fn generate_corpus(spec: &TaskSpec, num_docs: usize, seed: u64) -> Corpus {
    generate_corpus_sized(spec, num_docs, 2, 6, seed)
}

pub fn generate_corpus_sized(
    spec: &TaskSpec,
    num_docs: usize,
    min_sentences: usize,
    max_sentences: usize,
    seed: u64,
) -> Corpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut documents = Vec::with_capacity(num_docs);
    for d in 0..num_docs {
        let n_sent = rng.gen_range(min_sentences..=max_sentences);
        let mut text = String::new();
        let mut sentences = Vec::with_capacity(n_sent);
        let mut spans = Vec::new();
        for _ in 0..n_sent {
            if !text.is_empty() {
                text.push(' ');
            }
            let sent_start = text.chars().count();
            let n_items = rng.gen_range(4..=8);
            for item in 0..n_items {
                if item > 0 {
                    text.push(' ');
                }
                let at = text.chars().count();
                if rng.gen_bool(spec.entity_prob) {
                    let (label, surfaces) = spec.lexicons.choose(&mut rng).unwrap();
                    let surface = surfaces.choose(&mut rng).unwrap();
                    text.push_str(surface);
                    let end = at + surface.chars().count();
                    spans.push(EntitySpan::new(at, end, label.clone()).unwrap());
                } else {
                    text.push_str(spec.fillers.choose(&mut rng).unwrap());
                }
            }
            sentences.push((sent_start, text.chars().count()));
        }
        let id = format!("{}-{d:04}", spec.name);
        documents.push(Document::new(id, text, sentences, spans).unwrap());
    }
    Corpus::from_documents(documents).unwrap()
}

/// All raw sentence texts of a corpus, for tokenizer training.
pub fn sentence_texts(corpus: &Corpus) -> Vec<String> {
    let mut out = Vec::new();
    for doc in &corpus.documents {
        for &(s, e) in &doc.sentences {
            out.push(doc.slice(s, e));
        }
    }
    out
}
