//! Split planning, the fine-tuning loop with epoch selection, low-resource
//! subsetting, model selection across runs, and MLM pretraining.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Corpus, Document, TagScheme};
use crate::encoder::{self, EncoderModel, MaskPolicy};
use crate::eval::{self, DocSpans};
use crate::scalar::Scalar;
use crate::subword::{
    align_spans, context_windows, segment_document, segment_words, ContextWindow,
    SubwordSequence, Vocabulary, DEFAULT_CONTEXT_K,
};
use crate::tagger::{Tagger, TaggerOptions};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("empty training set")]
    EmptyTrainingSet,
    #[error("document {0} not found in corpus")]
    UnknownDocument(String),
    #[error("bad split: {0}")]
    BadSplit(String),
    #[error("non-finite loss at step {step}")]
    Diverged { step: usize },
    #[error("selection metric must be train loss exactly when the dev set is empty")]
    SelectionMismatch,
    #[error("no runs to select from")]
    NoRuns,
    #[error(transparent)]
    Tagger(#[from] crate::tagger::TaggerError),
    #[error(transparent)]
    Subword(#[from] crate::subword::SubwordError),
    #[error(transparent)]
    Encoder(#[from] encoder::EncoderError),
    #[error(transparent)]
    Eval(#[from] eval::EvalError),
    #[error(transparent)]
    Corpus(#[from] crate::corpus::CorpusError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Where a train/dev partition came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Provenance {
    Standard,
    Random { part_index: usize, n: usize, seed: u64 },
    AllData,
}

/// Document-level train/dev/test partition plus an optional first-n-sentences
/// training budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub train_doc_ids: Vec<String>,
    pub dev_doc_ids: Vec<String>,
    pub test_doc_ids: Vec<String>,
    pub provenance: Provenance,
    pub train_prefix_sentences: Option<usize>,
}

impl SplitPlan {
    pub fn standard(
        train: Vec<String>,
        dev: Vec<String>,
        test: Vec<String>,
    ) -> Result<Self> {
        let plan = SplitPlan {
            train_doc_ids: train,
            dev_doc_ids: dev,
            test_doc_ids: test,
            provenance: Provenance::Standard,
            train_prefix_sentences: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Training on train+dev combined with no validation set.
    pub fn all_data(train: Vec<String>, dev: Vec<String>, test: Vec<String>) -> Result<Self> {
        let mut merged = train;
        merged.extend(dev);
        let plan = SplitPlan {
            train_doc_ids: merged,
            dev_doc_ids: Vec::new(),
            test_doc_ids: test,
            provenance: Provenance::AllData,
            train_prefix_sentences: None,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for id in self
            .train_doc_ids
            .iter()
            .chain(&self.dev_doc_ids)
            .chain(&self.test_doc_ids)
        {
            if !seen.insert(id) {
                return Err(TrainError::BadSplit(format!(
                    "document {id} appears in more than one split"
                )));
            }
        }
        Ok(())
    }
}

/// Merges train+dev, shuffles with `seed`, cuts into `n` near-equal parts
/// (sizes differ by at most one); plan `i` validates on part `i` and trains
/// on the rest. Test ids are left empty for the caller to fill in.
pub fn make_random_splits(
    train_docs: &[String],
    dev_docs: &[String],
    n: usize,
    seed: u64,
) -> Result<Vec<SplitPlan>> {
    let mut pool: Vec<String> = train_docs.iter().chain(dev_docs).cloned().collect();
    if n == 0 || n > pool.len() {
        return Err(TrainError::BadSplit(format!(
            "cannot cut {} documents into {n} parts",
            pool.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);
    let base = pool.len() / n;
    let extra = pool.len() % n;
    let mut parts: Vec<Vec<String>> = Vec::with_capacity(n);
    let mut at = 0usize;
    for i in 0..n {
        let size = base + usize::from(i < extra);
        parts.push(pool[at..at + size].to_vec());
        at += size;
    }
    let mut plans = Vec::with_capacity(n);
    for i in 0..n {
        let train: Vec<String> = parts
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != i)
            .flat_map(|(_, p)| p.iter().cloned())
            .collect();
        plans.push(SplitPlan {
            train_doc_ids: train,
            dev_doc_ids: parts[i].clone(),
            test_doc_ids: Vec::new(),
            provenance: Provenance::Random {
                part_index: i,
                n,
                seed,
            },
            train_prefix_sentences: None,
        });
    }
    Ok(plans)
}

/// Restricts training to the first `n_sentences` sentences of the training
/// split, in document order and without shuffling. Dev and test are
/// untouched; nesting holds: subsetting twice keeps the smaller budget.
pub fn low_resource_subset(plan: &SplitPlan, n_sentences: usize) -> SplitPlan {
    let budget = match plan.train_prefix_sentences {
        Some(existing) => existing.min(n_sentences),
        None => n_sentences,
    };
    SplitPlan {
        train_prefix_sentences: Some(budget),
        ..plan.clone()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionMetric {
    DevF1,
    TrainLoss,
}

/// Optimization and selection settings for one fine-tuning run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub weight_decay: f64,
    pub selection_metric: SelectionMetric,
    pub seed: u64,
}

impl Hyperparams {
    /// Defaults sized for a from-scratch tiny encoder on a desk CPU.
    pub fn desk_default(seed: u64) -> Self {
        Hyperparams {
            learning_rate: 3e-4,
            batch_size: 16,
            epochs: 20,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_decay: 0.01,
            selection_metric: SelectionMetric::DevF1,
            seed,
        }
    }

    /// Reference preset with the conservative fine-tuning learning rate
    /// intended for large pretrained encoders.
    pub fn reference_preset(seed: u64) -> Self {
        Hyperparams {
            learning_rate: 2e-5,
            ..Hyperparams::desk_default(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.learning_rate < 0.0
            || self.batch_size == 0
            || self.epochs == 0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.epsilon <= 0.0
            || self.weight_decay < 0.0
        {
            return Err(TrainError::BadSplit("invalid hyperparameters".into()));
        }
        Ok(())
    }
}

fn round6(v: f64) -> f64 {
    (v * 1e6).round() / 1e6
}

/// Per-run training history; scores serialize at 6 decimal places.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub provenance: Provenance,
    pub train_prefix_sentences: Option<usize>,
    pub selection_metric: SelectionMetric,
    /// Mean train loss per epoch.
    pub train_loss: Vec<f64>,
    /// Dev strict micro F1 per epoch; empty in all-data mode.
    pub dev_f1: Vec<f64>,
    /// 1-based index of the selected epoch.
    pub selected_epoch: usize,
    /// Path of the retained checkpoint, when written to disk.
    pub checkpoint: Option<String>,
}

impl RunRecord {
    /// Score the run competes with in cross-run selection: dev F1 of the
    /// selected epoch, or negated train loss in all-data mode.
    pub fn selection_score(&self) -> f64 {
        let e = self.selected_epoch - 1;
        match self.selection_metric {
            SelectionMetric::DevF1 => self.dev_f1[e],
            SelectionMetric::TrainLoss => -self.train_loss[e],
        }
    }

    pub fn rounded(&self) -> RunRecord {
        RunRecord {
            train_loss: self.train_loss.iter().copied().map(round6).collect(),
            dev_f1: self.dev_f1.iter().copied().map(round6).collect(),
            ..self.clone()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.rounded()).expect("run record serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionCriterion {
    Median,
    Best,
}

/// Picks a run by dev score: `best` is the maximum, `median` the element at
/// index ⌊(m−1)/2⌋ of the ascending order (lower median). Returns the index
/// into `runs`; ties resolve to the earliest run.
pub fn select_model(runs: &[RunRecord], criterion: SelectionCriterion) -> Result<usize> {
    if runs.is_empty() {
        return Err(TrainError::NoRuns);
    }
    match criterion {
        SelectionCriterion::Best => {
            let mut best = 0usize;
            for (i, run) in runs.iter().enumerate() {
                if run.selection_score() > runs[best].selection_score() {
                    best = i;
                }
            }
            Ok(best)
        }
        SelectionCriterion::Median => {
            let mut order: Vec<usize> = (0..runs.len()).collect();
            order.sort_by(|&a, &b| {
                runs[a]
                    .selection_score()
                    .partial_cmp(&runs[b].selection_score())
                    .unwrap_or(std::cmp::Ordering::Equal)
            });
            Ok(order[(runs.len() - 1) / 2])
        }
    }
}

/// One training window with its gold focus tags.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainExample {
    pub window: ContextWindow,
    pub gold: Vec<usize>,
}

fn doc_index(corpus: &Corpus) -> BTreeMap<&str, &Document> {
    corpus.documents.iter().map(|d| (d.id.as_str(), d)).collect()
}

fn lookup<'a>(index: &BTreeMap<&str, &'a Document>, id: &str) -> Result<&'a Document> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| TrainError::UnknownDocument(id.to_string()))
}

/// First `keep` sentences of a document, with the text and span layer cut
/// accordingly.
fn prefix_document(doc: &Document, keep: usize) -> Result<Document> {
    if keep >= doc.sentences.len() {
        return Ok(doc.clone());
    }
    let end = doc.sentences[keep - 1].1;
    let spans = doc
        .spans
        .iter()
        .filter(|s| s.end <= end)
        .cloned()
        .collect();
    Ok(Document::new(
        doc.id.clone(),
        doc.slice(0, end),
        doc.sentences[..keep].to_vec(),
        spans,
    )?)
}

fn segment(doc: &Document, vocab: &Vocabulary, word_level: bool) -> SubwordSequence {
    if word_level {
        segment_words(doc, vocab)
    } else {
        segment_document(doc, vocab)
    }
}

/// Builds the training windows for a plan's training split, honoring the
/// first-n-sentences budget (documents may enter partially).
pub fn build_examples(
    corpus: &Corpus,
    plan: &SplitPlan,
    vocab: &Vocabulary,
    scheme: &TagScheme,
    context_k: usize,
    word_level: bool,
) -> Result<Vec<TrainExample>> {
    let index = doc_index(corpus);
    let mut remaining = plan.train_prefix_sentences;
    let mut examples = Vec::new();
    for id in &plan.train_doc_ids {
        let doc = lookup(&index, id)?;
        let keep = match remaining {
            Some(0) => break,
            Some(budget) => {
                let keep = budget.min(doc.sentences.len());
                remaining = Some(budget - keep);
                keep
            }
            None => doc.sentences.len(),
        };
        let doc = prefix_document(doc, keep)?;
        let sw = segment(&doc, vocab, word_level);
        if sw.is_empty() {
            continue;
        }
        let aligned = align_spans(&doc.spans, &sw, scheme)?;
        let tag_ids: Vec<usize> = aligned
            .tags
            .iter()
            .map(|t| scheme.tag_id(t).expect("aligned tag in alphabet"))
            .collect();
        for window in context_windows(&sw, context_k) {
            let gold = tag_ids[window.focus_doc_range()].to_vec();
            examples.push(TrainExample { window, gold });
        }
    }
    Ok(examples)
}

/// Gold span sets for the named documents, for evaluation.
pub fn gold_spans(corpus: &Corpus, ids: &[String]) -> Result<Vec<DocSpans>> {
    let index = doc_index(corpus);
    ids.iter()
        .map(|id| Ok(DocSpans::new(id.clone(), lookup(&index, id)?.spans.clone())))
        .collect()
}

/// Predicted span sets for the named documents.
pub fn predict_corpus<S: Scalar>(
    tagger: &Tagger<S>,
    corpus: &Corpus,
    ids: &[String],
    vocab: &Vocabulary,
    context_k: usize,
    options: &TaggerOptions,
    word_level: bool,
) -> Result<Vec<DocSpans>> {
    let index = doc_index(corpus);
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        let doc = lookup(&index, id)?;
        let sw = segment(doc, vocab, word_level);
        let spans = tagger.predict_spans(&sw, context_k, options)?;
        out.push(DocSpans::new(id.clone(), spans));
    }
    Ok(out)
}

/// Adaptive-moment optimizer with decoupled weight decay; moment buffers
/// are kept in f64 regardless of the model scalar.
pub struct AdamW {
    pub learning_rate: f64,
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(hp: &Hyperparams, tensor_lens: &[usize]) -> Self {
        AdamW {
            learning_rate: hp.learning_rate,
            beta1: hp.beta1,
            beta2: hp.beta2,
            epsilon: hp.epsilon,
            weight_decay: hp.weight_decay,
            step: 0,
            m: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
            v: tensor_lens.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn begin_step(&mut self) {
        self.step += 1;
    }

    /// Applies one update to tensor `idx` from its f64 gradient.
    pub fn update<S: Scalar>(&mut self, idx: usize, params: &mut [S], grads: &[f64]) {
        debug_assert_eq!(params.len(), grads.len());
        let t = self.step as f64;
        let bc1 = 1.0 - self.beta1.powf(t);
        let bc2 = 1.0 - self.beta2.powf(t);
        let (m, v) = (&mut self.m[idx], &mut self.v[idx]);
        for i in 0..params.len() {
            let g = grads[i];
            m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
            v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            let p = params[i].to_f64_();
            let update = m_hat / (v_hat.sqrt() + self.epsilon) + self.weight_decay * p;
            params[i] = S::from_f64(p - self.learning_rate * update);
        }
    }
}

/// Shared inputs for one fine-tuning run.
pub struct TrainSetup<'a> {
    pub corpus: &'a Corpus,
    pub plan: &'a SplitPlan,
    pub vocab: &'a Vocabulary,
    pub context_k: usize,
    pub options: TaggerOptions,
    pub word_level: bool,
}

impl<'a> TrainSetup<'a> {
    pub fn new(corpus: &'a Corpus, plan: &'a SplitPlan, vocab: &'a Vocabulary) -> Self {
        TrainSetup {
            corpus,
            plan,
            vocab,
            context_k: DEFAULT_CONTEXT_K,
            options: TaggerOptions::default(),
            word_level: false,
        }
    }
}

pub struct TrainOutcome<S: Scalar> {
    /// Checkpoint of the selected epoch.
    pub tagger: Tagger<S>,
    pub record: RunRecord,
}

/// Fine-tunes `init` on the plan's training split: epochs of shuffled
/// mini-batches over context windows, loss on focus positions only, epoch
/// selection by dev F1 (ties to the earliest epoch) or train loss in
/// all-data mode. Fully deterministic given (seed, plan, hyperparams, init).
pub fn train_tagger<S: Scalar>(
    setup: &TrainSetup,
    init: Tagger<S>,
    hp: &Hyperparams,
) -> Result<TrainOutcome<S>> {
    hp.validate()?;
    setup.plan.validate()?;
    let dev_empty = setup.plan.dev_doc_ids.is_empty();
    if dev_empty != (hp.selection_metric == SelectionMetric::TrainLoss) {
        return Err(TrainError::SelectionMismatch);
    }
    let examples = build_examples(
        setup.corpus,
        setup.plan,
        setup.vocab,
        &init.scheme,
        setup.context_k,
        setup.word_level,
    )?;
    if examples.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let dev_gold = gold_spans(setup.corpus, &setup.plan.dev_doc_ids)?;

    let mut tagger = init;
    let n_enc = tagger.encoder.params.len();
    let mut tensor_lens: Vec<usize> = tagger.encoder.params.iter().map(Vec::len).collect();
    tensor_lens.extend(tagger.head.tensors().iter().map(|t| t.len()));
    let mut opt = AdamW::new(hp, &tensor_lens);
    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed);

    let mut train_loss = Vec::with_capacity(hp.epochs);
    let mut dev_f1 = Vec::with_capacity(hp.epochs);
    let mut best: Option<(f64, usize, Tagger<S>)> = None;
    let mut step = 0usize;

    for epoch in 1..=hp.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            step += 1;
            let mut acc: Vec<Vec<f64>> = tensor_lens.iter().map(|&n| vec![0.0; n]).collect();
            for &i in batch {
                let ex = &examples[i];
                let (loss, grads) = tagger.loss_and_grads(&ex.window, &ex.gold, &setup.options)?;
                if !loss.is_finite() {
                    return Err(TrainError::Diverged { step });
                }
                loss_sum += loss;
                for (a, g) in acc[..n_enc].iter_mut().zip(&grads.encoder) {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av += gv.to_f64_();
                    }
                }
                let head = [
                    &grads.head.w,
                    &grads.head.b,
                    &grads.head.trans,
                    &grads.head.start,
                    &grads.head.end,
                ];
                for (a, g) in acc[n_enc..].iter_mut().zip(head) {
                    for (av, gv) in a.iter_mut().zip(g) {
                        *av += gv;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            for a in &mut acc {
                for v in a.iter_mut() {
                    *v *= scale;
                }
            }
            opt.begin_step();
            for idx in 0..n_enc {
                opt.update(idx, &mut tagger.encoder.params[idx], &acc[idx]);
            }
            for (off, tensor) in tagger.head.tensors_mut().into_iter().enumerate() {
                opt.update(n_enc + off, tensor, &acc[n_enc + off]);
            }
        }
        let epoch_loss = loss_sum / examples.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(TrainError::Diverged { step });
        }
        train_loss.push(epoch_loss);
        let score = if dev_empty {
            -epoch_loss
        } else {
            let pred = predict_corpus(
                &tagger,
                setup.corpus,
                &setup.plan.dev_doc_ids,
                setup.vocab,
                setup.context_k,
                &setup.options,
                setup.word_level,
            )?;
            let f1 = eval::strict_micro_f1(&dev_gold, &pred)?.f1;
            dev_f1.push(f1);
            f1
        };
        // Strict improvement keeps the earliest epoch on ties.
        if best.as_ref().map_or(true, |(s, _, _)| score > *s) {
            best = Some((score, epoch, tagger.clone()));
        }
    }
    let (_, selected_epoch, selected) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        tagger: selected,
        record: RunRecord {
            seed: hp.seed,
            provenance: setup.plan.provenance.clone(),
            train_prefix_sentences: setup.plan.train_prefix_sentences,
            selection_metric: hp.selection_metric,
            train_loss,
            dev_f1,
            selected_epoch,
            checkpoint: None,
        },
    })
}

/// Schedule for masked-language-model pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlmSchedule {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub context_k: usize,
    pub seed: u64,
    pub policy: MaskPolicy,
}

impl Default for MlmSchedule {
    fn default() -> Self {
        MlmSchedule {
            epochs: 3,
            learning_rate: 1e-3,
            batch_size: 16,
            context_k: DEFAULT_CONTEXT_K,
            seed: 0,
            policy: MaskPolicy::default(),
        }
    }
}

/// Masked-language-model pretraining over the context windows of a raw
/// corpus. Returns the adapted encoder and the per-epoch mean losses.
pub fn pretrain_mlm<S: Scalar>(
    model: EncoderModel<S>,
    corpus: &Corpus,
    vocab: &Vocabulary,
    schedule: &MlmSchedule,
) -> Result<(EncoderModel<S>, Vec<f64>)> {
    let mut windows: Vec<Vec<u32>> = Vec::new();
    for doc in &corpus.documents {
        let sw = segment_document(doc, vocab);
        for w in context_windows(&sw, schedule.context_k) {
            windows.push(w.ids);
        }
    }
    if windows.is_empty() {
        return Err(TrainError::EmptyTrainingSet);
    }
    let mut model = model;
    let hp = Hyperparams {
        learning_rate: schedule.learning_rate,
        seed: schedule.seed,
        ..Hyperparams::desk_default(schedule.seed)
    };
    let lens: Vec<usize> = model.params.iter().map(Vec::len).collect();
    let mut opt = AdamW::new(&hp, &lens);
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut epoch_losses = Vec::with_capacity(schedule.epochs);
    let mut step = 0usize;
    for _ in 0..schedule.epochs {
        let mut order: Vec<usize> = (0..windows.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch_ids in order.chunks(schedule.batch_size) {
            step += 1;
            let batch: Vec<Vec<u32>> = batch_ids.iter().map(|&i| windows[i].clone()).collect();
            let (loss, grads) = encoder::mlm_step(&model, &batch, &schedule.policy, &mut rng)?;
            if !loss.is_finite() {
                return Err(TrainError::Diverged { step });
            }
            loss_sum += loss;
            batches += 1;
            opt.begin_step();
            for (idx, tensor) in model.params.iter_mut().enumerate() {
                let g: Vec<f64> = grads[idx].iter().map(|v| v.to_f64_()).collect();
                opt.update(idx, tensor, &g);
            }
        }
        epoch_losses.push(loss_sum / batches as f64);
    }
    Ok((model, epoch_losses))
}
