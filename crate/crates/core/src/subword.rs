//! BPE vocabulary training, offset-tracked segmentation, span-to-subword
//! alignment and cross-sentence context windows.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{BufRead, Write};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{encode_tags, CorpusError, Document, EntitySpan, TagScheme};

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const MASK_ID: u32 = 2;
pub const BOS_ID: u32 = 3;
pub const EOS_ID: u32 = 4;
pub const NUM_SPECIALS: usize = 5;
const SPECIAL_TOKENS: [&str; NUM_SPECIALS] = ["<pad>", "<unk>", "<mask>", "<s>", "</s>"];

/// Encoder input length limit and the focus chunk size for over-long
/// sentences (312 + 2 * 100 context subwords = 512 positions).
pub const MAX_WINDOW: usize = 512;
pub const FOCUS_CHUNK: usize = 312;
/// Default cross-sentence context width, in subwords per side.
pub const DEFAULT_CONTEXT_K: usize = 100;

#[derive(Debug, Error)]
pub enum SubwordError {
    #[error("cannot train a vocabulary on an empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {requested} below minimum {minimum} (alphabet + specials)")]
    VocabTooSmall { requested: usize, minimum: usize },
    #[error("sentence {0} does not exist or has no subwords")]
    EmptySentence(usize),
    #[error("span ({0},{1}) lies outside the segmented text")]
    SpanOutsideText(usize, usize),
    #[error("spans overlap after expansion to subword boundaries")]
    OverlapAfterExpansion(#[source] CorpusError),
    #[error("bad vocabulary file: {0}")]
    BadVocabFile(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, SubwordError>;

/// BPE vocabulary with fixed special-token ids 0..4 and an ordered merge
/// list. Token ids are dense and stable: specials, then the base alphabet in
/// sorted order, then merge outputs in merge order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocabulary {
    tokens: Vec<String>,
    merges: Vec<(String, String)>,
    #[serde(skip)]
    token_ids: HashMap<String, u32>,
}

impl Vocabulary {
    fn build_index(&mut self) {
        self.token_ids = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_ids.get(token).copied()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// `clinseq-bpe v1` text format: header, one token per line, then a
    /// `#merges` section with one `left<TAB>right` pair per line.
    pub fn write<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "clinseq-bpe v1")?;
        for token in &self.tokens {
            writeln!(out, "{token}")?;
        }
        writeln!(out, "#merges")?;
        for (l, r) in &self.merges {
            writeln!(out, "{l}\t{r}")?;
        }
        Ok(())
    }

    pub fn read<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        match lines.next() {
            Some(Ok(h)) if h == "clinseq-bpe v1" => {}
            _ => return Err(SubwordError::BadVocabFile("missing header".into())),
        }
        let mut tokens = Vec::new();
        let mut merges = Vec::new();
        let mut in_merges = false;
        for line in lines {
            let line = line?;
            if line == "#merges" {
                in_merges = true;
            } else if in_merges {
                let (l, r) = line
                    .split_once('\t')
                    .ok_or_else(|| SubwordError::BadVocabFile(format!("bad merge line {line:?}")))?;
                merges.push((l.to_string(), r.to_string()));
            } else {
                tokens.push(line);
            }
        }
        if tokens.len() < NUM_SPECIALS || tokens[..NUM_SPECIALS] != SPECIAL_TOKENS {
            return Err(SubwordError::BadVocabFile("special tokens missing".into()));
        }
        let mut vocab = Vocabulary {
            tokens,
            merges,
            token_ids: HashMap::new(),
        };
        vocab.build_index();
        Ok(vocab)
    }
}

/// Trains a BPE vocabulary by greedy most-frequent-pair merging over
/// whitespace-pretokenized words. Ties break by lexicographic `(left,
/// right)`; training stops at `vocab_size` tokens or when no pair occurs at
/// least twice. Fully deterministic; `_seed` is accepted for interface
/// symmetry with the other training entry points.
pub fn train_bpe<I, S>(corpus: I, vocab_size: usize, _seed: u64) -> Result<Vocabulary>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    let mut word_counts: BTreeMap<Vec<String>, u64> = BTreeMap::new();
    let mut alphabet: BTreeSet<String> = BTreeSet::new();
    for text in corpus {
        for word in text.as_ref().split_whitespace() {
            let symbols: Vec<String> = word.chars().map(|c| c.to_string()).collect();
            for s in &symbols {
                alphabet.insert(s.clone());
            }
            *word_counts.entry(symbols).or_insert(0) += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(SubwordError::EmptyCorpus);
    }
    let minimum = alphabet.len() + NUM_SPECIALS;
    if vocab_size < minimum {
        return Err(SubwordError::VocabTooSmall {
            requested: vocab_size,
            minimum,
        });
    }

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet);
    let mut present: BTreeSet<String> = tokens.iter().cloned().collect();
    let mut merges = Vec::new();
    let mut words: Vec<(Vec<String>, u64)> = word_counts.into_iter().collect();

    while tokens.len() < vocab_size {
        let mut pair_counts: BTreeMap<(String, String), u64> = BTreeMap::new();
        for (symbols, count) in &words {
            for pair in symbols.windows(2) {
                *pair_counts
                    .entry((pair[0].clone(), pair[1].clone()))
                    .or_insert(0) += count;
            }
        }
        // Max count, ties by lexicographic (left, right). BTreeMap iteration
        // order makes the first strictly-greater entry the winner.
        let best = pair_counts
            .iter()
            .fold(None::<(&(String, String), u64)>, |acc, (pair, &count)| {
                match acc {
                    Some((_, c)) if c >= count => acc,
                    _ => Some((pair, count)),
                }
            });
        let Some((pair, count)) = best else { break };
        if count < 2 {
            break;
        }
        let (left, right) = pair.clone();
        let merged = format!("{left}{right}");
        for (symbols, _) in &mut words {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i] == left && symbols[i + 1] == right {
                    out.push(merged.clone());
                    i += 2;
                } else {
                    out.push(symbols[i].clone());
                    i += 1;
                }
            }
            *symbols = out;
        }
        merges.push((left, right));
        if present.insert(merged.clone()) {
            tokens.push(merged);
        }
    }

    let mut vocab = Vocabulary {
        tokens,
        merges,
        token_ids: HashMap::new(),
    };
    vocab.build_index();
    Ok(vocab)
}

/// Offset-tracked subword sequence over one source text (or one document).
#[derive(Debug, Clone, PartialEq)]
pub struct SubwordSequence {
    pub ids: Vec<u32>,
    /// Per-subword `(start, end)` character span into the source text.
    pub char_spans: Vec<(usize, usize)>,
    /// Sentence of the document each subword belongs to; all zero when the
    /// sequence was built from a bare text.
    pub sentence_index: Vec<usize>,
}

impl SubwordSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn num_sentences(&self) -> usize {
        self.sentence_index.last().map_or(0, |&s| s + 1)
    }

    /// Contiguous subword index range of sentence `s`.
    pub fn sentence_range(&self, s: usize) -> Range<usize> {
        let start = self.sentence_index.partition_point(|&x| x < s);
        let end = self.sentence_index.partition_point(|&x| x <= s);
        start..end
    }
}

/// Segments one text: whitespace pretokenization, then the vocabulary's
/// merges applied in training order within each word. Characters absent from
/// the vocabulary map to UNK with a one-character span. Total and
/// deterministic.
pub fn segment(text: &str, vocab: &Vocabulary) -> SubwordSequence {
    let mut seq = SubwordSequence {
        ids: Vec::new(),
        char_spans: Vec::new(),
        sentence_index: Vec::new(),
    };
    segment_into(text, 0, 0, vocab, &mut seq);
    seq
}

fn segment_into(
    text: &str,
    char_offset: usize,
    sentence: usize,
    vocab: &Vocabulary,
    seq: &mut SubwordSequence,
) {
    // Whitespace pretokenization with character offsets.
    let mut words: Vec<(usize, Vec<(String, usize, usize)>)> = Vec::new();
    let mut current: Vec<(String, usize, usize)> = Vec::new();
    for (i, c) in text.chars().enumerate() {
        if c.is_whitespace() {
            if !current.is_empty() {
                words.push((0, std::mem::take(&mut current)));
            }
        } else {
            current.push((c.to_string(), char_offset + i, char_offset + i + 1));
        }
    }
    if !current.is_empty() {
        words.push((0, current));
    }

    for (_, mut symbols) in words {
        for (left, right) in &vocab.merges {
            let mut out = Vec::with_capacity(symbols.len());
            let mut i = 0;
            while i < symbols.len() {
                if i + 1 < symbols.len() && symbols[i].0 == *left && symbols[i + 1].0 == *right {
                    let merged = format!("{left}{right}");
                    out.push((merged, symbols[i].1, symbols[i + 1].2));
                    i += 2;
                } else {
                    out.push(std::mem::replace(&mut symbols[i], Default::default()));
                    i += 1;
                }
            }
            symbols = out;
        }
        for (sym, start, end) in symbols {
            seq.ids.push(vocab.id(&sym).unwrap_or(UNK_ID));
            seq.char_spans.push((start, end));
            seq.sentence_index.push(sentence);
        }
    }
}

/// Segments every sentence of a document into one sequence with per-subword
/// sentence indices.
pub fn segment_document(doc: &Document, vocab: &Vocabulary) -> SubwordSequence {
    let mut seq = SubwordSequence {
        ids: Vec::new(),
        char_spans: Vec::new(),
        sentence_index: Vec::new(),
    };
    for (s, &(start, end)) in doc.sentences.iter().enumerate() {
        let sent_text = doc.slice(start, end);
        segment_into(&sent_text, start, s, vocab, &mut seq);
    }
    seq
}

/// Word-level unit builder for the subword-ablation mode: each whitespace
/// word is one unit, mapped to its whole-word vocabulary token or UNK.
pub fn segment_words(doc: &Document, vocab: &Vocabulary) -> SubwordSequence {
    let mut seq = SubwordSequence {
        ids: Vec::new(),
        char_spans: Vec::new(),
        sentence_index: Vec::new(),
    };
    for (s, &(start, end)) in doc.sentences.iter().enumerate() {
        let sent_text = doc.slice(start, end);
        let mut word_start = None;
        let chars: Vec<char> = sent_text.chars().collect();
        for i in 0..=chars.len() {
            let is_ws = i == chars.len() || chars[i].is_whitespace();
            match (word_start, is_ws) {
                (None, false) => word_start = Some(i),
                (Some(w), true) => {
                    let word: String = chars[w..i].iter().collect();
                    seq.ids.push(vocab.id(&word).unwrap_or(UNK_ID));
                    seq.char_spans.push((start + w, start + i));
                    seq.sentence_index.push(s);
                    word_start = None;
                }
                _ => {}
            }
        }
    }
    seq
}

/// Tag sequence over subwords plus the count of span boundaries that had to
/// be expanded to subword boundaries.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedTags {
    pub tags: Vec<String>,
    pub misaligned_boundaries: usize,
}

/// Maps character spans to subword tags. A span covers the minimal
/// contiguous subword run containing it; boundaries strictly inside a
/// subword expand outward, counted in `misaligned_boundaries`.
pub fn align_spans(
    spans: &[EntitySpan],
    sw: &SubwordSequence,
    scheme: &TagScheme,
) -> Result<AlignedTags> {
    let mut expanded = Vec::with_capacity(spans.len());
    let mut misaligned = 0usize;
    for span in spans {
        let first = sw.char_spans.iter().position(|&(_, e)| e > span.start);
        let last = sw.char_spans.iter().rposition(|&(s, _)| s < span.end);
        let (i, j) = match (first, last) {
            (Some(i), Some(j)) if i <= j => (i, j),
            _ => return Err(SubwordError::SpanOutsideText(span.start, span.end)),
        };
        if sw.char_spans[i].0 != span.start {
            misaligned += 1;
        }
        if sw.char_spans[j].1 != span.end {
            misaligned += 1;
        }
        expanded.push(EntitySpan {
            start: sw.char_spans[i].0,
            end: sw.char_spans[j].1,
            label: span.label.clone(),
        });
    }
    let tags = encode_tags(&expanded, &sw.char_spans, scheme)
        .map_err(SubwordError::OverlapAfterExpansion)?;
    Ok(AlignedTags {
        tags,
        misaligned_boundaries: misaligned,
    })
}

/// Focus sentence (or focus chunk) plus up to `k` subwords of context on
/// each side, never crossing the document boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextWindow {
    pub ids: Vec<u32>,
    /// Focus positions within `ids`.
    pub focus_range: Range<usize>,
    /// Document subword index of `ids[0]`.
    pub doc_start: usize,
    pub k: usize,
}

impl ContextWindow {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Document subword indices covered by the focus positions.
    pub fn focus_doc_range(&self) -> Range<usize> {
        self.doc_start + self.focus_range.start..self.doc_start + self.focus_range.end
    }
}

/// Builds the context window(s) for one sentence. Focus chunks longer than
/// [`FOCUS_CHUNK`] are split into consecutive chunks sharing the same
/// context rule, keeping every window within [`MAX_WINDOW`] positions when
/// `k <= 100`.
pub fn build_context(
    doc_sw: &SubwordSequence,
    sentence_index: usize,
    k: usize,
) -> Result<Vec<ContextWindow>> {
    let range = doc_sw.sentence_range(sentence_index);
    if range.is_empty() {
        return Err(SubwordError::EmptySentence(sentence_index));
    }
    let doc_len = doc_sw.len();
    let mut windows = Vec::new();
    let mut chunk_start = range.start;
    while chunk_start < range.end {
        let chunk_end = (chunk_start + FOCUS_CHUNK).min(range.end);
        let left = k.min(chunk_start);
        let right = k.min(doc_len - chunk_end);
        let window_start = chunk_start - left;
        let window_end = chunk_end + right;
        windows.push(ContextWindow {
            ids: doc_sw.ids[window_start..window_end].to_vec(),
            focus_range: left..left + (chunk_end - chunk_start),
            doc_start: window_start,
            k,
        });
        chunk_start = chunk_end;
    }
    Ok(windows)
}

/// All context windows of a document, sentence by sentence. The focus
/// ranges tile the document's subwords exactly once.
pub fn context_windows(doc_sw: &SubwordSequence, k: usize) -> Vec<ContextWindow> {
    let mut windows = Vec::new();
    for s in 0..doc_sw.num_sentences() {
        if let Ok(mut w) = build_context(doc_sw, s, k) {
            windows.append(&mut w);
        }
    }
    windows
}
