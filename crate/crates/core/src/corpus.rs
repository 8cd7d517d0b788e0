//! Document data model, corpus file I/O and tag-scheme encoding/decoding.
//!
//! All character offsets throughout the crate count Unicode scalar values,
//! not bytes. This also applies to the offsets read from standoff `.ann`
//! files.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("sentence ranges invalid in document {0}: must be non-overlapping, increasing and within the text")]
    BadSentences(String),
    #[error("span ({start},{end},{label}) does not lie within a single sentence of document {doc}")]
    SpanOutsideSentence {
        doc: String,
        start: usize,
        end: usize,
        label: String,
    },
    #[error("overlapping gold spans in document {0}")]
    OverlappingSpans(String),
    #[error("invalid entity label {0:?}: must be non-empty, without whitespace or scheme prefix")]
    BadLabel(String),
    #[error("invalid span offsets ({0},{1})")]
    BadOffsets(usize, usize),
    #[error("line {line}: malformed tag {tag:?}")]
    MalformedTag { line: usize, tag: String },
    #[error("line {line}: tag {tag:?} uses prefix not allowed by the {scheme:?} scheme")]
    UnknownPrefix {
        line: usize,
        tag: String,
        scheme: SchemeKind,
    },
    #[error("document {0} is empty")]
    EmptyDocument(String),
    #[error("duplicate document id {0}")]
    DuplicateDocId(String),
    #[error("tag {0:?} not in the scheme alphabet")]
    TagOutsideAlphabet(String),
    #[error("span ({0},{1}) boundary falls inside a unit or outside the covered text")]
    SpanNotAligned(usize, usize),
    #[error("annotation {id}: surface {surface:?} does not match text slice {slice:?}")]
    SurfaceMismatch {
        id: String,
        surface: String,
        slice: String,
    },
    #[error("annotation {id}: offsets {start}..{end} out of range (text length {len})")]
    OffsetsOutOfRange {
        id: String,
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("annotation line {0}: malformed")]
    MalformedAnnotation(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CorpusError>;

/// Typed annotation span over character (Unicode scalar value) offsets.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EntitySpan {
    pub start: usize,
    /// Exclusive end offset.
    pub end: usize,
    pub label: String,
}

impl EntitySpan {
    pub fn new(start: usize, end: usize, label: impl Into<String>) -> Result<Self> {
        let label = label.into();
        if start >= end {
            return Err(CorpusError::BadOffsets(start, end));
        }
        validate_label(&label)?;
        Ok(EntitySpan { start, end, label })
    }

    pub fn overlaps(&self, other: &EntitySpan) -> bool {
        self.start < other.end && other.start < self.end
    }
}

fn validate_label(label: &str) -> Result<()> {
    let has_prefix = label.len() >= 2
        && label.as_bytes()[1] == b'-'
        && matches!(label.as_bytes()[0], b'B' | b'I' | b'E' | b'S' | b'O');
    if label.is_empty() || label.chars().any(char::is_whitespace) || has_prefix {
        return Err(CorpusError::BadLabel(label.to_string()));
    }
    Ok(())
}

/// One raw text with sentence boundaries and a flat gold span layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub text: String,
    /// Half-open `(start_char, end_char)` sentence ranges, strictly increasing.
    pub sentences: Vec<(usize, usize)>,
    pub spans: Vec<EntitySpan>,
}

impl Document {
    /// Validates the document invariants: sentences ordered and in range,
    /// every span inside exactly one sentence, gold spans non-overlapping.
    pub fn new(
        id: impl Into<String>,
        text: impl Into<String>,
        sentences: Vec<(usize, usize)>,
        spans: Vec<EntitySpan>,
    ) -> Result<Self> {
        let doc = Document {
            id: id.into(),
            text: text.into(),
            sentences,
            spans,
        };
        doc.validate()?;
        Ok(doc)
    }

    /// Like [`Document::new`], but merges adjacent sentence ranges until every
    /// span fits inside a single sentence. Used by the readers, where the
    /// sentence splitter may cut through a gold annotation.
    pub fn with_merged_sentences(
        id: impl Into<String>,
        text: impl Into<String>,
        mut sentences: Vec<(usize, usize)>,
        spans: Vec<EntitySpan>,
    ) -> Result<Self> {
        for span in &spans {
            loop {
                let first = sentences
                    .iter()
                    .position(|&(s, e)| span.start >= s && span.start < e);
                match first {
                    Some(i) if span.end <= sentences[i].1 => break,
                    Some(i) if i + 1 < sentences.len() => {
                        let merged = (sentences[i].0, sentences[i + 1].1);
                        sentences.splice(i..=i + 1, [merged]);
                    }
                    _ => break, // out of range; Document::new reports it
                }
            }
        }
        Document::new(id, text, sentences, spans)
    }

    pub fn char_len(&self) -> usize {
        self.text.chars().count()
    }

    /// Text slice by character offsets.
    pub fn slice(&self, start: usize, end: usize) -> String {
        self.text.chars().skip(start).take(end - start).collect()
    }

    fn validate(&self) -> Result<()> {
        let len = self.char_len();
        let mut prev_end = 0usize;
        for (i, &(s, e)) in self.sentences.iter().enumerate() {
            if s >= e || e > len || (i > 0 && s < prev_end) {
                return Err(CorpusError::BadSentences(self.id.clone()));
            }
            prev_end = e;
        }
        for span in &self.spans {
            validate_label(&span.label)?;
            if span.start >= span.end {
                return Err(CorpusError::BadOffsets(span.start, span.end));
            }
            let inside_one = self
                .sentences
                .iter()
                .any(|&(s, e)| span.start >= s && span.end <= e);
            if !inside_one {
                return Err(CorpusError::SpanOutsideSentence {
                    doc: self.id.clone(),
                    start: span.start,
                    end: span.end,
                    label: span.label.clone(),
                });
            }
        }
        let mut sorted: Vec<&EntitySpan> = self.spans.iter().collect();
        sorted.sort();
        for pair in sorted.windows(2) {
            if pair[0].overlaps(pair[1]) {
                return Err(CorpusError::OverlappingSpans(self.id.clone()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SchemeKind {
    Bio,
    Biose,
}

/// Tagging scheme over a fixed entity-type inventory.
///
/// The tag alphabet is derived deterministically: `O` first, then per entity
/// type (in `label_set` order) the prefixed tags in `B, I, E, S` order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TagScheme {
    pub kind: SchemeKind,
    pub label_set: Vec<String>,
}

impl TagScheme {
    pub fn new(kind: SchemeKind, label_set: Vec<String>) -> Self {
        TagScheme { kind, label_set }
    }

    pub fn prefixes(&self) -> &'static [char] {
        match self.kind {
            SchemeKind::Bio => &['B', 'I'],
            SchemeKind::Biose => &['B', 'I', 'E', 'S'],
        }
    }

    pub fn alphabet(&self) -> Vec<String> {
        let mut tags = vec!["O".to_string()];
        for label in &self.label_set {
            for p in self.prefixes() {
                tags.push(format!("{p}-{label}"));
            }
        }
        tags
    }

    pub fn alphabet_size(&self) -> usize {
        1 + self.label_set.len() * self.prefixes().len()
    }

    pub fn tag_id(&self, tag: &str) -> Option<usize> {
        if tag == "O" {
            return Some(0);
        }
        let (prefix, label) = tag.split_once('-')?;
        let p = self
            .prefixes()
            .iter()
            .position(|&c| prefix == c.to_string())?;
        let l = self.label_set.iter().position(|x| x == label)?;
        Some(1 + l * self.prefixes().len() + p)
    }

    /// Parses a tag string into (prefix, label), checking scheme membership.
    fn parse<'a>(&self, tag: &'a str, line: usize) -> Result<Option<(char, &'a str)>> {
        if tag == "O" {
            return Ok(None);
        }
        let (prefix, label) = tag.split_once('-').ok_or(CorpusError::MalformedTag {
            line,
            tag: tag.to_string(),
        })?;
        if label.is_empty() || prefix.chars().count() != 1 {
            return Err(CorpusError::MalformedTag {
                line,
                tag: tag.to_string(),
            });
        }
        let c = prefix.chars().next().unwrap();
        if !"BIES".contains(c) {
            return Err(CorpusError::MalformedTag {
                line,
                tag: tag.to_string(),
            });
        }
        if !self.prefixes().contains(&c) {
            return Err(CorpusError::UnknownPrefix {
                line,
                tag: tag.to_string(),
                scheme: self.kind,
            });
        }
        Ok(Some((c, label)))
    }
}

/// Ordered document collection with its entity-type inventory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub label_set: Vec<String>,
}

impl Corpus {
    pub fn from_documents(documents: Vec<Document>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut labels = BTreeSet::new();
        for doc in &documents {
            if !ids.insert(doc.id.clone()) {
                return Err(CorpusError::DuplicateDocId(doc.id.clone()));
            }
            for span in &doc.spans {
                labels.insert(span.label.clone());
            }
        }
        Ok(Corpus {
            documents,
            label_set: labels.into_iter().collect(),
        })
    }

    pub fn total_sentences(&self) -> usize {
        self.documents.iter().map(|d| d.sentences.len()).sum()
    }
}

/// Column layout for the CoNLL-style reader. The last column is always the
/// tag; `token_column` selects the surface-form column.
#[derive(Debug, Clone)]
pub struct ConllConfig {
    pub scheme_kind: SchemeKind,
    pub token_column: usize,
}

impl Default for ConllConfig {
    fn default() -> Self {
        ConllConfig {
            scheme_kind: SchemeKind::Biose,
            token_column: 0,
        }
    }
}

/// Encodes non-overlapping, boundary-aligned spans into one tag per unit.
pub fn encode_tags(
    spans: &[EntitySpan],
    unit_offsets: &[(usize, usize)],
    scheme: &TagScheme,
) -> Result<Vec<String>> {
    let mut sorted: Vec<&EntitySpan> = spans.iter().collect();
    sorted.sort();
    for pair in sorted.windows(2) {
        if pair[0].overlaps(pair[1]) {
            return Err(CorpusError::OverlappingSpans(String::new()));
        }
    }
    let mut tags = vec!["O".to_string(); unit_offsets.len()];
    for span in sorted {
        let first = unit_offsets.iter().position(|&(s, _)| s == span.start);
        let last = unit_offsets.iter().position(|&(_, e)| e == span.end);
        let (i, j) = match (first, last) {
            (Some(i), Some(j)) if i <= j => (i, j),
            _ => return Err(CorpusError::SpanNotAligned(span.start, span.end)),
        };
        if i == j {
            tags[i] = match scheme.kind {
                SchemeKind::Bio => format!("B-{}", span.label),
                SchemeKind::Biose => format!("S-{}", span.label),
            };
        } else {
            tags[i] = format!("B-{}", span.label);
            for t in tags.iter_mut().take(j).skip(i + 1) {
                *t = format!("I-{}", span.label);
            }
            tags[j] = match scheme.kind {
                SchemeKind::Bio => format!("I-{}", span.label),
                SchemeKind::Biose => format!("E-{}", span.label),
            };
        }
    }
    Ok(tags)
}

/// Total decoder: any tag sequence over the scheme alphabet yields well-formed
/// non-overlapping spans.
///
/// Repair rules: `I-x`/`E-x` without an open `x` chunk opens a new chunk; an
/// open chunk closes at `O`, at a type change, at `S-`/`B-`, or at sequence
/// end; `S-x` is always a singleton.
pub fn decode_tags(
    tags: &[impl AsRef<str>],
    unit_offsets: &[(usize, usize)],
    scheme: &TagScheme,
) -> Result<Vec<EntitySpan>> {
    assert_eq!(tags.len(), unit_offsets.len());
    let mut spans = Vec::new();
    // (label, first unit, last unit)
    let mut open: Option<(String, usize, usize)> = None;
    let close = |open: &mut Option<(String, usize, usize)>, spans: &mut Vec<EntitySpan>| {
        if let Some((label, i, j)) = open.take() {
            spans.push(EntitySpan {
                start: unit_offsets[i].0,
                end: unit_offsets[j].1,
                label,
            });
        }
    };
    for (i, tag) in tags.iter().enumerate() {
        let tag = tag.as_ref();
        if scheme.tag_id(tag).is_none() {
            return Err(CorpusError::TagOutsideAlphabet(tag.to_string()));
        }
        match scheme.parse(tag, 0)? {
            None => close(&mut open, &mut spans),
            Some(('B', label)) => {
                close(&mut open, &mut spans);
                open = Some((label.to_string(), i, i));
            }
            Some(('S', label)) => {
                close(&mut open, &mut spans);
                spans.push(EntitySpan {
                    start: unit_offsets[i].0,
                    end: unit_offsets[i].1,
                    label: label.to_string(),
                });
            }
            Some((_, label)) => match &mut open {
                Some((l, _, j)) if l == label => *j = i,
                _ => {
                    close(&mut open, &mut spans);
                    open = Some((label.to_string(), i, i));
                }
            },
        }
    }
    close(&mut open, &mut spans);
    Ok(spans)
}

/// Reads the CoNLL-style column format.
///
/// One token per line, TAB-separated, last column is the tag; a blank line
/// ends a sentence; `# doc_id = <id>` starts a new document. Character
/// offsets are reconstructed canonically by joining tokens (and sentences)
/// with single spaces.
pub fn read_conll<R: BufRead>(reader: R, cfg: &ConllConfig) -> Result<Corpus> {
    struct DocBuilder {
        id: String,
        sentences: Vec<Vec<(String, String)>>, // (token, tag)
        current: Vec<(String, String)>,
    }

    let mut documents = Vec::new();
    let mut builder: Option<DocBuilder> = None;
    let mut implicit = 0usize;

    let finish = |b: Option<DocBuilder>, documents: &mut Vec<Document>| -> Result<()> {
        let Some(mut b) = b else { return Ok(()) };
        if !b.current.is_empty() {
            b.sentences.push(std::mem::take(&mut b.current));
        }
        if b.sentences.is_empty() {
            return Err(CorpusError::EmptyDocument(b.id));
        }
        let mut text = String::new();
        let mut sentences = Vec::new();
        let mut spans = Vec::new();
        let labels: Vec<String> = {
            let mut set = BTreeSet::new();
            for s in &b.sentences {
                for (_, tag) in s {
                    if let Some((_, l)) = tag.split_once('-') {
                        set.insert(l.to_string());
                    }
                }
            }
            set.into_iter().collect()
        };
        let scheme = TagScheme::new(cfg.scheme_kind, labels);
        for sent in &b.sentences {
            if !text.is_empty() {
                text.push(' ');
            }
            let sent_start = text.chars().count();
            let mut units = Vec::new();
            for (i, (token, _)) in sent.iter().enumerate() {
                if i > 0 {
                    text.push(' ');
                }
                let start = text.chars().count();
                text.push_str(token);
                units.push((start, text.chars().count()));
            }
            let sent_end = text.chars().count();
            sentences.push((sent_start, sent_end));
            let tags: Vec<&String> = sent.iter().map(|(_, t)| t).collect();
            spans.extend(decode_tags(&tags, &units, &scheme)?);
        }
        documents.push(Document::new(b.id, text, sentences, spans)?);
        Ok(())
    };

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if let Some(rest) = line.strip_prefix("# doc_id = ") {
            finish(builder.take(), &mut documents)?;
            builder = Some(DocBuilder {
                id: rest.trim().to_string(),
                sentences: Vec::new(),
                current: Vec::new(),
            });
        } else if line.trim().is_empty() {
            if let Some(b) = &mut builder {
                if !b.current.is_empty() {
                    b.sentences.push(std::mem::take(&mut b.current));
                }
            }
        } else {
            let cols: Vec<&str> = line.split('\t').collect();
            let tag = *cols.last().unwrap();
            let token = cols.get(cfg.token_column).copied().unwrap_or(cols[0]);
            // Validate the tag string early so errors carry the line number.
            let probe = TagScheme::new(cfg.scheme_kind, Vec::new());
            if tag != "O" {
                let (prefix, label) = tag.split_once('-').ok_or(CorpusError::MalformedTag {
                    line: lineno + 1,
                    tag: tag.to_string(),
                })?;
                let _ = label;
                let c = prefix.chars().next().unwrap_or(' ');
                if prefix.chars().count() != 1 || !"BIES".contains(c) || label.is_empty() {
                    return Err(CorpusError::MalformedTag {
                        line: lineno + 1,
                        tag: tag.to_string(),
                    });
                }
                if !probe.prefixes().contains(&c) {
                    return Err(CorpusError::UnknownPrefix {
                        line: lineno + 1,
                        tag: tag.to_string(),
                        scheme: cfg.scheme_kind,
                    });
                }
            }
            let b = builder.get_or_insert_with(|| {
                implicit += 1;
                DocBuilder {
                    id: format!("doc{}", implicit - 1),
                    sentences: Vec::new(),
                    current: Vec::new(),
                }
            });
            b.current.push((token.to_string(), tag.to_string()));
        }
    }
    finish(builder.take(), &mut documents)?;
    Corpus::from_documents(documents)
}

/// Writes the CoNLL variant read by [`read_conll`]; deterministic, and the
/// exact inverse on corpora with canonical (single-space) offsets.
pub fn write_conll<W: Write>(corpus: &Corpus, scheme: &TagScheme, mut out: W) -> Result<()> {
    for doc in &corpus.documents {
        writeln!(out, "# doc_id = {}", doc.id)?;
        for &(s, e) in &doc.sentences {
            let sent_text = doc.slice(s, e);
            let mut units = Vec::new();
            let mut tokens = Vec::new();
            let mut pos = s;
            for token in sent_text.split(' ') {
                let n = token.chars().count();
                if n > 0 {
                    units.push((pos, pos + n));
                    tokens.push(token.to_string());
                }
                pos += n + 1;
            }
            let spans: Vec<EntitySpan> = doc
                .spans
                .iter()
                .filter(|sp| sp.start >= s && sp.end <= e)
                .cloned()
                .collect();
            let tags = encode_tags(&spans, &units, scheme)?;
            for (token, tag) in tokens.iter().zip(&tags) {
                writeln!(out, "{token}\t{tag}")?;
            }
            writeln!(out)?;
        }
    }
    Ok(())
}

/// Result of reading a standoff document: discontinuous annotations are not
/// representable and are skipped, counted in `skipped_discontinuous`.
#[derive(Debug)]
pub struct StandoffDocument {
    pub document: Document,
    pub skipped_discontinuous: usize,
}

/// Splits text into sentences: a sentence ends after `.`, `!` or `?`
/// followed by whitespace, or at a newline. Whitespace-only stretches are
/// not sentences.
pub fn split_sentences(text: &str) -> Vec<(usize, usize)> {
    let chars: Vec<char> = text.chars().collect();
    let mut sentences = Vec::new();
    let mut start = 0usize;
    let mut i = 0usize;
    let flush = |start: &mut usize, end: usize, sentences: &mut Vec<(usize, usize)>| {
        let mut s = *start;
        let mut e = end;
        while s < e && chars[s].is_whitespace() {
            s += 1;
        }
        while e > s && chars[e - 1].is_whitespace() {
            e -= 1;
        }
        if s < e {
            sentences.push((s, e));
        }
        *start = end;
    };
    while i < chars.len() {
        let c = chars[i];
        if c == '\n' {
            flush(&mut start, i + 1, &mut sentences);
        } else if matches!(c, '.' | '!' | '?')
            && (i + 1 == chars.len() || chars[i + 1].is_whitespace())
        {
            flush(&mut start, i + 1, &mut sentences);
        }
        i += 1;
    }
    flush(&mut start, chars.len(), &mut sentences);
    sentences
}

/// Reads a standoff text/annotation pair.
///
/// Annotation lines have the form `T<id>\t<TYPE> <start> <end>\t<surface>`,
/// with offsets counting Unicode scalar values. Discontinuous annotations
/// (`;`-separated offset lists) are skipped and counted.
pub fn read_standoff(id: &str, text: &str, ann: &str) -> Result<StandoffDocument> {
    let chars: Vec<char> = text.chars().collect();
    let mut spans = Vec::new();
    let mut skipped = 0usize;
    for (lineno, line) in ann.lines().enumerate() {
        if line.trim().is_empty() || !line.starts_with('T') {
            continue;
        }
        let mut cols = line.splitn(3, '\t');
        let ann_id = cols.next().unwrap().to_string();
        let middle = cols
            .next()
            .ok_or(CorpusError::MalformedAnnotation(lineno + 1))?;
        let surface = cols.next().unwrap_or("");
        if middle.contains(';') {
            skipped += 1;
            continue;
        }
        let mut parts = middle.split_whitespace();
        let (Some(label), Some(start), Some(end)) = (parts.next(), parts.next(), parts.next())
        else {
            return Err(CorpusError::MalformedAnnotation(lineno + 1));
        };
        let start: usize = start
            .parse()
            .map_err(|_| CorpusError::MalformedAnnotation(lineno + 1))?;
        let end: usize = end
            .parse()
            .map_err(|_| CorpusError::MalformedAnnotation(lineno + 1))?;
        if start >= end || end > chars.len() {
            return Err(CorpusError::OffsetsOutOfRange {
                id: ann_id,
                start,
                end,
                len: chars.len(),
            });
        }
        let slice: String = chars[start..end].iter().collect();
        if slice != surface {
            return Err(CorpusError::SurfaceMismatch {
                id: ann_id,
                surface: surface.to_string(),
                slice,
            });
        }
        spans.push(EntitySpan::new(start, end, label)?);
    }
    let sentences = split_sentences(text);
    let document = Document::with_merged_sentences(id, text, sentences, spans)?;
    Ok(StandoffDocument {
        document,
        skipped_discontinuous: skipped,
    })
}

/// Writes the `.ann` side of a standoff pair.
pub fn write_standoff_ann<W: Write>(doc: &Document, mut out: W) -> Result<()> {
    for (i, span) in doc.spans.iter().enumerate() {
        writeln!(
            out,
            "T{}\t{} {} {}\t{}",
            i + 1,
            span.label,
            span.start,
            span.end,
            doc.slice(span.start, span.end)
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scheme(kind: SchemeKind) -> TagScheme {
        TagScheme::new(kind, vec!["DISO".into(), "PROC".into()])
    }

    #[test]
    fn alphabet_order() {
        let s = scheme(SchemeKind::Biose);
        assert_eq!(
            s.alphabet(),
            vec!["O", "B-DISO", "I-DISO", "E-DISO", "S-DISO", "B-PROC", "I-PROC", "E-PROC", "S-PROC"]
        );
        for (i, tag) in s.alphabet().iter().enumerate() {
            assert_eq!(s.tag_id(tag), Some(i));
        }
        assert_eq!(s.tag_id("B-XXX"), None);
        assert_eq!(s.alphabet_size(), 9);
    }

    #[test]
    fn encode_single_unit_span() {
        let s = scheme(SchemeKind::Biose);
        let span = EntitySpan::new(0, 4, "DISO").unwrap();
        let tags = encode_tags(&[span], &[(0, 4)], &s).unwrap();
        assert_eq!(tags, vec!["S-DISO"]);
    }

    #[test]
    fn encode_multi_unit_span_biose_and_bio() {
        let units = [(0, 2), (3, 5), (6, 8), (9, 11), (12, 14)];
        let span = EntitySpan::new(3, 11, "DISO").unwrap();
        let tags = encode_tags(&[span.clone()], &units, &scheme(SchemeKind::Biose)).unwrap();
        assert_eq!(tags, vec!["O", "B-DISO", "I-DISO", "E-DISO", "O"]);
        let tags = encode_tags(&[span], &units, &scheme(SchemeKind::Bio)).unwrap();
        assert_eq!(tags, vec!["O", "B-DISO", "I-DISO", "I-DISO", "O"]);
    }

    #[test]
    fn encode_rejects_misaligned_span() {
        let units = [(0, 2), (3, 5)];
        let span = EntitySpan::new(1, 5, "DISO").unwrap();
        assert!(matches!(
            encode_tags(&[span], &units, &scheme(SchemeKind::Bio)),
            Err(CorpusError::SpanNotAligned(1, 5))
        ));
    }

    #[test]
    fn decode_repairs_dangling_inside() {
        let units = [(0, 2), (3, 5)];
        let spans = decode_tags(&["O", "I-DISO"], &units, &scheme(SchemeKind::Biose)).unwrap();
        assert_eq!(spans, vec![EntitySpan::new(3, 5, "DISO").unwrap()]);
    }

    #[test]
    fn decode_rejects_foreign_tag() {
        let units = [(0, 2)];
        assert!(matches!(
            decode_tags(&["E-DISO"], &units, &scheme(SchemeKind::Bio)),
            Err(CorpusError::TagOutsideAlphabet(_))
        ));
    }

    #[test]
    fn read_conll_basic() {
        let input = "# doc_id = d1\nLa\tO\nfiebre\tB-DISO\nalta\tI-DISO\n\n";
        let corpus = read_conll(input.as_bytes(), &ConllConfig::default()).unwrap();
        assert_eq!(corpus.documents.len(), 1);
        let doc = &corpus.documents[0];
        assert_eq!(doc.text, "La fiebre alta");
        assert_eq!(doc.sentences, vec![(0, 14)]);
        assert_eq!(doc.spans, vec![EntitySpan::new(3, 14, "DISO").unwrap()]);
        assert_eq!(doc.slice(3, 14), "fiebre alta");
    }

    #[test]
    fn read_conll_empty_stream() {
        let corpus = read_conll("".as_bytes(), &ConllConfig::default()).unwrap();
        assert!(corpus.documents.is_empty());
    }

    #[test]
    fn read_conll_empty_document_is_error() {
        let input = "# doc_id = d1\n# doc_id = d2\na\tO\n";
        assert!(matches!(
            read_conll(input.as_bytes(), &ConllConfig::default()),
            Err(CorpusError::EmptyDocument(id)) if id == "d1"
        ));
    }

    #[test]
    fn read_conll_rejects_biose_tag_under_bio() {
        let cfg = ConllConfig {
            scheme_kind: SchemeKind::Bio,
            token_column: 0,
        };
        let input = "# doc_id = d\nx\tS-DISO\n";
        assert!(matches!(
            read_conll(input.as_bytes(), &cfg),
            Err(CorpusError::UnknownPrefix { .. })
        ));
    }

    #[test]
    fn write_conll_inverse_of_read() {
        let input = "# doc_id = d1\nLa\tO\nfiebre\tB-DISO\nalta\tI-DISO\n\n";
        let corpus = read_conll(input.as_bytes(), &ConllConfig::default()).unwrap();
        let s = TagScheme::new(SchemeKind::Bio, corpus.label_set.clone());
        let mut out = Vec::new();
        write_conll(&corpus, &s, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), input);
    }

    #[test]
    fn write_conll_no_spans_all_o() {
        let doc = Document::new("d", "a b", vec![(0, 3)], vec![]).unwrap();
        let corpus = Corpus::from_documents(vec![doc]).unwrap();
        let s = TagScheme::new(SchemeKind::Biose, vec!["X".into()]);
        let mut out = Vec::new();
        write_conll(&corpus, &s, &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "# doc_id = d\na\tO\nb\tO\n\n");
    }

    #[test]
    fn read_standoff_basic() {
        let text = "Dolor toracico.";
        let ann = "T1\tSINTOMA 0 14\tDolor toracico";
        let got = read_standoff("d", text, ann).unwrap();
        assert_eq!(got.skipped_discontinuous, 0);
        assert_eq!(
            got.document.spans,
            vec![EntitySpan::new(0, 14, "SINTOMA").unwrap()]
        );
        assert_eq!(got.document.sentences, vec![(0, 15)]);
    }

    #[test]
    fn read_standoff_surface_mismatch() {
        let text = "Dolor toracico.";
        let ann = "T7\tSINTOMA 0 5\tFiebre";
        assert!(matches!(
            read_standoff("d", text, ann),
            Err(CorpusError::SurfaceMismatch { id, .. }) if id == "T7"
        ));
    }

    #[test]
    fn read_standoff_skips_discontinuous() {
        let text = "abc def ghi.";
        let ann = "T1\tX 0 3\tabc\nT2\tX 4 7;8 11\tdef ghi";
        let got = read_standoff("d", text, ann).unwrap();
        assert_eq!(got.skipped_discontinuous, 1);
        assert_eq!(got.document.spans.len(), 1);
    }

    #[test]
    fn read_standoff_merges_sentences_for_crossing_span() {
        let text = "uno dos. tres cuatro.";
        let ann = "T1\tX 4 13\tdos. tres";
        let got = read_standoff("d", text, ann).unwrap();
        assert_eq!(got.document.sentences, vec![(0, 21)]);
    }

    #[test]
    fn overlapping_gold_is_hard_error() {
        let spans = vec![
            EntitySpan::new(0, 5, "A").unwrap(),
            EntitySpan::new(3, 8, "B").unwrap(),
        ];
        assert!(matches!(
            Document::new("d", "abcdefghij", vec![(0, 10)], spans),
            Err(CorpusError::OverlappingSpans(_))
        ));
    }

    // Strategy: random unit layouts plus random non-overlapping aligned spans.
    fn arb_units() -> impl Strategy<Value = Vec<(usize, usize)>> {
        prop::collection::vec(1usize..4, 1..12).prop_map(|lens| {
            let mut units = Vec::new();
            let mut pos = 0;
            for len in lens {
                units.push((pos, pos + len));
                pos += len + 1;
            }
            units
        })
    }

    fn arb_spans(units: Vec<(usize, usize)>) -> impl Strategy<Value = (Vec<(usize, usize)>, Vec<EntitySpan>)> {
        let n = units.len();
        prop::collection::vec((0..n, 0..n, 0..2usize), 0..4).prop_map(move |raw| {
            let mut spans: Vec<EntitySpan> = Vec::new();
            for (a, b, label) in raw {
                let (i, j) = (a.min(b), a.max(b));
                let cand = EntitySpan {
                    start: units[i].0,
                    end: units[j].1,
                    label: if label == 0 { "DISO".into() } else { "PROC".into() },
                };
                if !spans.iter().any(|s| s.overlaps(&cand)) {
                    spans.push(cand);
                }
            }
            spans.sort();
            (units.clone(), spans)
        })
    }

    proptest! {
        #[test]
        fn decode_encode_roundtrip((units, spans) in arb_units().prop_flat_map(arb_spans)) {
            for kind in [SchemeKind::Bio, SchemeKind::Biose] {
                let s = scheme(kind);
                let tags = encode_tags(&spans, &units, &s).unwrap();
                let mut back = decode_tags(&tags, &units, &s).unwrap();
                back.sort();
                prop_assert_eq!(&back, &spans);
            }
        }

        #[test]
        fn decode_total_and_wellformed(
            ids in prop::collection::vec(0usize..9, 1..16),
            units in arb_units(),
        ) {
            let s = scheme(SchemeKind::Biose);
            let alphabet = s.alphabet();
            let n = units.len().min(ids.len());
            let tags: Vec<&String> = ids[..n].iter().map(|&i| &alphabet[i]).collect();
            let spans = decode_tags(&tags, &units[..n], &s).unwrap();
            let mut sorted = spans.clone();
            sorted.sort();
            for span in &sorted {
                prop_assert!(span.start < span.end);
            }
            for pair in sorted.windows(2) {
                prop_assert!(!pair[0].overlaps(&pair[1]));
            }
        }

        #[test]
        fn encode_chunks_wellformed((units, spans) in arb_units().prop_flat_map(arb_spans)) {
            let s = scheme(SchemeKind::Biose);
            let tags = encode_tags(&spans, &units, &s).unwrap();
            for (i, tag) in tags.iter().enumerate() {
                if let Some((p, label)) = tag.split_once('-') {
                    if p == "I" || p == "E" {
                        let prev = tags[i - 1].split_once('-').unwrap();
                        prop_assert!(prev.0 == "B" || prev.0 == "I");
                        prop_assert_eq!(prev.1, label);
                    }
                }
            }
        }
    }
}
