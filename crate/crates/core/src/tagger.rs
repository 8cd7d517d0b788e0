//! Sequence tagger: encoder representations, an emission head over the tag
//! alphabet, CRF (or plain softmax) training loss on focus positions, and
//! span prediction for whole documents.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{EntitySpan, TagScheme};
use crate::crf::{self, CrfGrads, CrfParams, TransitionMask};
use crate::encoder::{self, EncoderConfig, EncoderModel, Gradients};
use crate::scalar::Scalar;
use crate::subword::{context_windows, ContextWindow, SubwordSequence};

#[derive(Debug, Error)]
pub enum TaggerError {
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Crf(#[from] crf::CrfError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
    #[error("gold tag count {0} does not match focus length {1}")]
    GoldLengthMismatch(usize, usize),
}

pub type Result<T> = std::result::Result<T, TaggerError>;

/// Output-layer and decoding switches (the ablation set).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaggerOptions {
    /// CRF output layer; when false, per-position softmax plus repair
    /// decoding.
    pub use_crf: bool,
    /// Hard transition mask at decode time.
    pub constrain_decode: bool,
    /// Soft transition mask (additive penalty) during training.
    pub constrain_train: bool,
}

impl Default for TaggerOptions {
    fn default() -> Self {
        TaggerOptions {
            use_crf: true,
            constrain_decode: true,
            constrain_train: false,
        }
    }
}

/// Emission projection plus CRF transition parameters, stored in the model
/// scalar type; all dynamic programming converts to f64.
#[derive(Debug, Clone, PartialEq)]
pub struct CrfHead<S: Scalar> {
    pub input_dim: usize,
    pub num_tags: usize,
    pub w: Vec<S>,
    pub b: Vec<S>,
    pub trans: Vec<S>,
    pub start: Vec<S>,
    pub end: Vec<S>,
}

impl<S: Scalar> CrfHead<S> {
    pub fn init(input_dim: usize, num_tags: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = (6.0 / (input_dim + num_tags) as f64).sqrt();
        CrfHead {
            input_dim,
            num_tags,
            w: (0..input_dim * num_tags)
                .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
                .collect(),
            b: vec![S::zero(); num_tags],
            trans: vec![S::zero(); num_tags * num_tags],
            start: vec![S::zero(); num_tags],
            end: vec![S::zero(); num_tags],
        }
    }

    pub fn to_f64(&self) -> CrfParams {
        CrfParams {
            input_dim: self.input_dim,
            num_tags: self.num_tags,
            w: self.w.iter().map(|v| v.to_f64_()).collect(),
            b: self.b.iter().map(|v| v.to_f64_()).collect(),
            trans: self.trans.iter().map(|v| v.to_f64_()).collect(),
            start: self.start.iter().map(|v| v.to_f64_()).collect(),
            end: self.end.iter().map(|v| v.to_f64_()).collect(),
        }
    }

    /// Mutable views over the five head tensors, in checkpoint order.
    pub fn tensors_mut(&mut self) -> [&mut Vec<S>; 5] {
        [
            &mut self.w,
            &mut self.b,
            &mut self.trans,
            &mut self.start,
            &mut self.end,
        ]
    }

    pub fn tensors(&self) -> [&Vec<S>; 5] {
        [&self.w, &self.b, &self.trans, &self.start, &self.end]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tagger<S: Scalar> {
    pub encoder: EncoderModel<S>,
    pub head: CrfHead<S>,
    pub scheme: TagScheme,
}

/// Gradients for one tagger loss evaluation.
pub struct TaggerGrads<S: Scalar> {
    pub encoder: Gradients<S>,
    pub head: CrfGrads,
}

impl<S: Scalar> Tagger<S> {
    /// Fresh tagger: seeded encoder plus a head seeded from `head_seed`.
    pub fn init(cfg: &EncoderConfig, scheme: TagScheme, head_seed: u64) -> Result<Self> {
        let encoder = encoder::init_encoder(cfg)?;
        let head = CrfHead::init(cfg.model_dim, scheme.alphabet_size(), head_seed);
        Ok(Tagger {
            encoder,
            head,
            scheme,
        })
    }

    pub fn transition_mask(&self) -> TransitionMask {
        crf::build_transition_mask(&self.scheme)
    }

    fn focus_reps_f64(&self, reps: &[S], window: &ContextWindow) -> Vec<f64> {
        let d = self.encoder.config.model_dim;
        let r = &window.focus_range;
        reps[r.start * d..r.end * d].iter().map(|v| v.to_f64_()).collect()
    }

    /// Loss (CRF NLL or softmax NLL) on the focus positions of one window,
    /// plus gradients for every parameter. `gold` holds one tag id per
    /// focus position.
    pub fn loss_and_grads(
        &self,
        window: &ContextWindow,
        gold: &[usize],
        options: &TaggerOptions,
    ) -> Result<(f64, TaggerGrads<S>)> {
        let focus_len = window.focus_range.len();
        if gold.len() != focus_len {
            return Err(TaggerError::GoldLengthMismatch(gold.len(), focus_len));
        }
        let d = self.encoder.config.model_dim;
        let cache = encoder::encode_with_cache(&self.encoder, &window.ids, None)?;
        let reps = cache.output().to_vec();
        let focus = self.focus_reps_f64(&reps, window);
        let params = self.head.to_f64();

        let (loss, head_grads, d_focus) = if options.use_crf {
            let mask = options.constrain_train.then(|| self.transition_mask());
            let (nll, grads) = crf::nll_and_grads(&params, &focus, gold, mask.as_ref())?;
            let d_focus = grads.reps.clone();
            (nll, grads, d_focus)
        } else {
            softmax_loss_and_grads(&params, &focus, gold)?
        };

        // Scatter the focus gradient back into the full window.
        let mut d_out = vec![S::zero(); window.ids.len() * d];
        let start = window.focus_range.start;
        for (t, chunk) in d_focus.chunks(d).enumerate() {
            for i in 0..d {
                d_out[(start + t) * d + i] = S::from_f64(chunk[i]);
            }
        }
        let mut enc_grads = encoder::zero_gradients::<S>(&self.encoder.config);
        encoder::encode_backward(&self.encoder, &cache, &d_out, &mut enc_grads);
        Ok((
            loss,
            TaggerGrads {
                encoder: enc_grads,
                head: head_grads,
            },
        ))
    }

    /// Predicted tag ids for the focus positions of one window.
    pub fn predict_window(
        &self,
        window: &ContextWindow,
        options: &TaggerOptions,
    ) -> Result<Vec<usize>> {
        let reps = encoder::encode(&self.encoder, &window.ids)?;
        let focus = self.focus_reps_f64(&reps, window);
        let params = self.head.to_f64();
        let em = crf::emissions(&params, &focus)?;
        if options.use_crf {
            let mask = options.constrain_decode.then(|| self.transition_mask());
            Ok(crf::viterbi(&params, &em, mask.as_ref())?)
        } else {
            // Per-position argmax; ties to the lowest tag index.
            let y = self.head.num_tags;
            Ok(em
                .chunks(y)
                .map(|row| {
                    row.iter()
                        .enumerate()
                        .fold((0usize, f64::NEG_INFINITY), |best, (i, &v)| {
                            if v > best.1 {
                                (i, v)
                            } else {
                                best
                            }
                        })
                        .0
                })
                .collect())
        }
    }

    /// Predicted character spans for a segmented document.
    pub fn predict_spans(
        &self,
        sw: &SubwordSequence,
        k: usize,
        options: &TaggerOptions,
    ) -> Result<Vec<EntitySpan>> {
        if sw.is_empty() {
            return Ok(Vec::new());
        }
        let alphabet = self.scheme.alphabet();
        let mut tags: Vec<&String> = Vec::with_capacity(sw.len());
        for window in context_windows(sw, k) {
            for id in self.predict_window(&window, options)? {
                tags.push(&alphabet[id]);
            }
        }
        debug_assert_eq!(tags.len(), sw.len());
        Ok(crate::corpus::decode_tags(&tags, &sw.char_spans, &self.scheme)?)
    }
}

/// Per-position softmax cross-entropy over emissions (the "- CRF"
/// ablation). Returns head gradients shaped like the CRF ones, with zero
/// transition/boundary components.
fn softmax_loss_and_grads(
    params: &CrfParams,
    focus: &[f64],
    gold: &[usize],
) -> crf::Result<(f64, CrfGrads, Vec<f64>)> {
    let d = params.input_dim;
    let y = params.num_tags;
    let n = gold.len();
    for &t in gold {
        if t >= y {
            return Err(crf::CrfError::TagOutsideAlphabet(t, y));
        }
    }
    let em = crf::emissions(params, focus)?;
    let mut loss = 0.0;
    let mut d_em = vec![0.0; n * y];
    for t in 0..n {
        let row = &em[t * y..(t + 1) * y];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let log_sum = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += log_sum - row[gold[t]];
        for tag in 0..y {
            d_em[t * y + tag] = (row[tag] - log_sum).exp();
        }
        d_em[t * y + gold[t]] -= 1.0;
    }
    let mut grads = CrfGrads {
        w: vec![0.0; d * y],
        b: vec![0.0; y],
        trans: vec![0.0; y * y],
        start: vec![0.0; y],
        end: vec![0.0; y],
        reps: vec![0.0; n * d],
    };
    for t in 0..n {
        for tag in 0..y {
            let g = d_em[t * y + tag];
            grads.b[tag] += g;
            for i in 0..d {
                grads.w[i * y + tag] += focus[t * d + i] * g;
                grads.reps[t * d + i] += g * params.w[i * y + tag];
            }
        }
    }
    let d_focus = grads.reps.clone();
    Ok((loss, grads, d_focus))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Document, SchemeKind};
    use crate::subword::{segment_document, train_bpe};

    fn tiny_tagger(seed: u64) -> Tagger<f64> {
        let cfg = EncoderConfig {
            vocab_size: 20,
            model_dim: 8,
            num_heads: 2,
            num_layers: 1,
            feedforward_dim: 12,
            max_positions: 64,
            dropout_rate: 0.0,
            seed,
        };
        let scheme = TagScheme::new(SchemeKind::Biose, vec!["X".into()]);
        Tagger::init(&cfg, scheme, seed ^ 0x5eed).unwrap()
    }

    fn window(ids: Vec<u32>, focus: std::ops::Range<usize>) -> ContextWindow {
        ContextWindow {
            focus_range: focus,
            doc_start: 0,
            k: 0,
            ids,
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        // Full pipeline gradient: CRF NLL through the encoder.
        let mut tagger = tiny_tagger(3);
        let w = window(vec![2, 5, 7, 9, 6, 3], 1..5);
        let gold = vec![0usize, 1, 2, 3];
        let opts = TaggerOptions {
            constrain_train: false,
            ..Default::default()
        };
        let (_, grads) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
        let eps = 1e-5;
        // Head parameters.
        for ti in 0..5 {
            for i in 0..tagger.head.tensors()[ti].len() {
                let orig = tagger.head.tensors_mut()[ti][i];
                tagger.head.tensors_mut()[ti][i] = orig + eps;
                let (plus, _) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
                tagger.head.tensors_mut()[ti][i] = orig - eps;
                let (minus, _) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
                tagger.head.tensors_mut()[ti][i] = orig;
                let fd = (plus - minus) / (2.0 * eps);
                let g = [
                    &grads.head.w,
                    &grads.head.b,
                    &grads.head.trans,
                    &grads.head.start,
                    &grads.head.end,
                ][ti][i];
                if fd.abs() < 1e-9 && g.abs() < 1e-9 {
                    continue;
                }
                assert!(
                    (fd - g).abs() / fd.abs().max(g.abs()) < 1e-5,
                    "head tensor {ti} idx {i}: fd {fd} analytic {g}"
                );
            }
        }
        // A sample of encoder parameters.
        for &(ti, i) in &[(0usize, 17usize), (1, 9), (2, 3), (4, 20), (14, 40)] {
            let orig = tagger.encoder.params[ti][i];
            tagger.encoder.params[ti][i] = orig + eps;
            let (plus, _) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
            tagger.encoder.params[ti][i] = orig - eps;
            let (minus, _) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
            tagger.encoder.params[ti][i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            let g = grads.encoder[ti][i];
            if fd.abs() < 1e-9 && g.abs() < 1e-9 {
                continue;
            }
            assert!(
                (fd - g).abs() / fd.abs().max(g.abs()) < 1e-4,
                "encoder tensor {ti} idx {i}: fd {fd} analytic {g}"
            );
        }
    }

    #[test]
    fn softmax_ablation_gradients_match_fd() {
        let mut tagger = tiny_tagger(5);
        let w = window(vec![2, 5, 7, 9], 0..4);
        let gold = vec![0usize, 1, 2, 0];
        let opts = TaggerOptions {
            use_crf: false,
            ..Default::default()
        };
        let (_, grads) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
        assert!(grads.head.trans.iter().all(|&g| g == 0.0));
        let eps = 1e-5;
        for i in 0..tagger.head.w.len() {
            let orig = tagger.head.w[i];
            tagger.head.w[i] = orig + eps;
            let (plus, _) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
            tagger.head.w[i] = orig - eps;
            let (minus, _) = tagger.loss_and_grads(&w, &gold, &opts).unwrap();
            tagger.head.w[i] = orig;
            let fd = (plus - minus) / (2.0 * eps);
            assert!((fd - grads.head.w[i]).abs() / fd.abs().max(grads.head.w[i].abs()).max(1e-8) < 1e-5);
        }
    }

    #[test]
    fn constrained_decode_always_mask_valid() {
        let tagger = tiny_tagger(9);
        let mask = tagger.transition_mask();
        for n in 1..8usize {
            let w = window((0..n as u32).map(|i| 2 + i % 10).collect(), 0..n);
            let tags = tagger.predict_window(&w, &TaggerOptions::default()).unwrap();
            assert!(mask.accepts(&tags));
        }
    }

    #[test]
    fn predict_spans_covers_document() {
        let text = "aa bb cc. dd ee.";
        let doc = Document::new("d", text, crate::corpus::split_sentences(text), vec![]).unwrap();
        let vocab = train_bpe([text], 20, 0).unwrap();
        let sw = segment_document(&doc, &vocab);
        let tagger = tiny_tagger(1);
        let spans = tagger.predict_spans(&sw, 2, &TaggerOptions::default()).unwrap();
        for s in &spans {
            assert!(s.start < s.end && s.end <= doc.char_len());
        }
    }
}
