//! Cross-task transfer: weight transplantation from a source-task tagger
//! and similarity-based ranking of candidate transfer sources.
//!
//! The similarity measure is linear centered-kernel-alignment (CKA) over
//! per-sentence mean-pooled final-layer representations — a concrete,
//! testable stand-in for representation-based model similarity.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::TagScheme;
use crate::encoder::{self, EncoderModel};
use crate::scalar::Scalar;
use crate::subword::{segment, Vocabulary};
use crate::tagger::{CrfHead, Tagger};

/// Probe sample cap: bounded, deterministic scoring cost.
pub const MAX_PROBE_SENTENCES: usize = 512;

#[derive(Debug, Error)]
pub enum TransferError {
    #[error("vocabulary mismatch: source encoder has {got} tokens, target expects {target}")]
    VocabMismatch { got: usize, target: usize },
    #[error("dimension mismatch: models have d={0} and d={1}")]
    DimMismatch(usize, usize),
    #[error("need at least 2 usable probe sentences, got {0}")]
    ProbeTooSmall(usize),
    #[error("empty candidate list")]
    NoCandidates,
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
}

pub type Result<T> = std::result::Result<T, TransferError>;

/// Initializes a target-task tagger from a source tagger: the encoder is
/// copied verbatim; the output head is copied when the tag schemes are
/// identical and freshly seeded otherwise.
pub fn transplant<S: Scalar>(
    source: &Tagger<S>,
    target_scheme: TagScheme,
    head_seed: u64,
    target_vocab_size: usize,
) -> Result<Tagger<S>> {
    let cfg = &source.encoder.config;
    if cfg.vocab_size != target_vocab_size {
        return Err(TransferError::VocabMismatch {
            got: cfg.vocab_size,
            target: target_vocab_size,
        });
    }
    let head = if source.scheme == target_scheme {
        source.head.clone()
    } else {
        CrfHead::init(cfg.model_dim, target_scheme.alphabet_size(), head_seed)
    };
    Ok(Tagger {
        encoder: source.encoder.clone(),
        head,
        scheme: target_scheme,
    })
}

/// Linear CKA between an n×da matrix and an n×db matrix (row-major),
/// after column centering: ‖XᵀY‖²_F / (‖XᵀX‖_F · ‖YᵀY‖_F). Degenerate
/// (all-zero after centering) inputs score 0.
pub fn linear_cka(x: &[f64], y: &[f64], n: usize, da: usize, db: usize) -> f64 {
    assert_eq!(x.len(), n * da);
    assert_eq!(y.len(), n * db);
    let center = |m: &[f64], cols: usize| -> Vec<f64> {
        let mut out = m.to_vec();
        for c in 0..cols {
            let mean = (0..n).map(|r| m[r * cols + c]).sum::<f64>() / n as f64;
            for r in 0..n {
                out[r * cols + c] -= mean;
            }
        }
        out
    };
    let xc = center(x, da);
    let yc = center(y, db);
    let gram_norm = |a: &[f64], ca: usize, b: &[f64], cb: usize| -> f64 {
        // ‖AᵀB‖²_F computed entry by entry.
        let mut total = 0.0;
        for i in 0..ca {
            for j in 0..cb {
                let mut dot = 0.0;
                for r in 0..n {
                    dot += a[r * ca + i] * b[r * cb + j];
                }
                total += dot * dot;
            }
        }
        total
    };
    let cross = gram_norm(&xc, da, &yc, db);
    let xx = gram_norm(&xc, da, &xc, da).sqrt();
    let yy = gram_norm(&yc, db, &yc, db).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return 0.0;
    }
    cross / (xx * yy)
}

/// One row per usable probe sentence: the mean of the model's final-layer
/// representations over the sentence's subwords.
fn probe_matrix<S: Scalar>(
    model: &EncoderModel<S>,
    probe: &[&str],
    vocab: &Vocabulary,
) -> Result<(Vec<f64>, usize)> {
    let d = model.config.model_dim;
    let mut rows = Vec::new();
    for text in probe {
        let sw = segment(text, vocab);
        if sw.is_empty() {
            continue;
        }
        let reps = encoder::encode(model, &sw.ids)?;
        let mut row = vec![0.0; d];
        for chunk in reps.chunks(d) {
            for (acc, v) in row.iter_mut().zip(chunk) {
                *acc += v.to_f64_();
            }
        }
        let scale = 1.0 / (reps.len() / d) as f64;
        rows.extend(row.into_iter().map(|v| v * scale));
    }
    let n = rows.len() / d;
    Ok((rows, n))
}

/// Representation similarity of two models on a shared probe sample.
/// Symmetric; 1.0 for identical (or orthogonally related) representations.
pub fn model_similarity<S: Scalar>(
    model_a: &EncoderModel<S>,
    model_b: &EncoderModel<S>,
    probe: &[&str],
    vocab: &Vocabulary,
) -> Result<f64> {
    if model_a.config.vocab_size != model_b.config.vocab_size {
        return Err(TransferError::VocabMismatch {
            got: model_b.config.vocab_size,
            target: model_a.config.vocab_size,
        });
    }
    let (xa, na) = probe_matrix(model_a, probe, vocab)?;
    let (xb, nb) = probe_matrix(model_b, probe, vocab)?;
    debug_assert_eq!(na, nb);
    if na < 2 {
        return Err(TransferError::ProbeTooSmall(na));
    }
    Ok(linear_cka(
        &xa,
        &xb,
        na,
        model_a.config.model_dim,
        model_b.config.model_dim,
    ))
}

/// A candidate transfer source: a task name plus its trained tagger.
pub struct SourceCandidate<S: Scalar> {
    pub task: String,
    pub tagger: Tagger<S>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceRanking {
    /// (task name, similarity) in descending score order; score ties break
    /// by task name.
    pub entries: Vec<(String, f64)>,
}

/// Scores every candidate against the target reference model on the probe
/// sample (capped at [`MAX_PROBE_SENTENCES`]) and ranks them descending.
pub fn rank_sources<S: Scalar>(
    probe: &[String],
    reference: &Tagger<S>,
    candidates: &[SourceCandidate<S>],
    vocab: &Vocabulary,
) -> Result<SourceRanking> {
    if candidates.is_empty() {
        return Err(TransferError::NoCandidates);
    }
    let probe: Vec<&str> = probe
        .iter()
        .take(MAX_PROBE_SENTENCES)
        .map(String::as_str)
        .collect();
    let mut entries = Vec::with_capacity(candidates.len());
    for cand in candidates {
        let score = model_similarity(&reference.encoder, &cand.tagger.encoder, &probe, vocab)?;
        entries.push((cand.task.clone(), score));
    }
    entries.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.cmp(&b.0))
    });
    Ok(SourceRanking { entries })
}
