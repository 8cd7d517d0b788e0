//! File plumbing: atomic writes, corpus and prediction formats, aligned
//! text tables, and the bounded worker pool.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use clinseq::corpus::{read_conll, write_standoff_ann, ConllConfig, Corpus, EntitySpan};
use clinseq::eval::DocSpans;
use clinseq::subword::Vocabulary;

use crate::config::ExperimentConfig;
use crate::error::{rt, AppError, Result};

/// Writes a file atomically: temp sibling plus rename, creating parents.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let parent = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(parent).map_err(rt)?;
    let tmp = parent.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("out")
    ));
    fs::write(&tmp, bytes).map_err(rt)?;
    fs::rename(&tmp, path).map_err(rt)?;
    Ok(())
}

pub fn load_corpus(path: &Path, config: &ExperimentConfig) -> Result<Corpus> {
    let file = fs::File::open(path)
        .map_err(|e| AppError::runtime(format!("cannot open {}: {e}", path.display())))?;
    let reader = BufReader::new(file);
    match config.dataset.format.as_str() {
        "json" => serde_json::from_reader(reader)
            .map_err(|e| AppError::runtime(format!("{}: {e}", path.display()))),
        _ => read_conll(
            reader,
            &ConllConfig {
                scheme_kind: config.scheme_kind(),
                token_column: config.dataset.token_column,
            },
        )
        .map_err(|e| AppError::runtime(format!("{}: {e}", path.display()))),
    }
}

pub fn load_vocab(path: &Path) -> Result<Vocabulary> {
    let file = fs::File::open(path)
        .map_err(|e| AppError::runtime(format!("cannot open {}: {e}", path.display())))?;
    Vocabulary::read(BufReader::new(file)).map_err(rt)
}

/// Predictions as JSONL: one document per line, id plus span triples.
#[derive(serde::Serialize, serde::Deserialize)]
struct PredLine {
    doc_id: String,
    spans: Vec<(usize, usize, String)>,
}

pub fn save_predictions(path: &Path, docs: &[DocSpans]) -> Result<()> {
    if path.extension().and_then(|e| e.to_str()) == Some("jsonl") {
        let mut out = Vec::new();
        for doc in docs {
            let line = PredLine {
                doc_id: doc.doc_id.clone(),
                spans: doc
                    .spans
                    .iter()
                    .map(|s| (s.start, s.end, s.label.clone()))
                    .collect(),
            };
            out.extend(serde_json::to_vec(&line).map_err(rt)?);
            out.push(b'\n');
        }
        write_atomic(path, &out)
    } else {
        // Directory of standoff .ann files, one per document. Prediction
        // sets do not carry the original text, so the surface column is
        // left empty.
        fs::create_dir_all(path).map_err(rt)?;
        for doc in docs {
            let mut buf = Vec::new();
            for (i, span) in doc.spans.iter().enumerate() {
                writeln!(buf, "T{}\t{} {} {}\t", i + 1, span.label, span.start, span.end)
                    .map_err(rt)?;
            }
            write_atomic(&path.join(format!("{}.ann", doc.doc_id)), &buf)?;
        }
        Ok(())
    }
}

pub fn load_predictions(path: &Path) -> Result<Vec<DocSpans>> {
    let file = fs::File::open(path)
        .map_err(|e| AppError::runtime(format!("cannot open {}: {e}", path.display())))?;
    let mut docs = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(rt)?;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: PredLine = serde_json::from_str(&line)
            .map_err(|e| AppError::runtime(format!("{} line {}: {e}", path.display(), i + 1)))?;
        let spans: Vec<EntitySpan> = parsed
            .spans
            .into_iter()
            .map(|(s, e, l)| EntitySpan::new(s, e, l))
            .collect::<std::result::Result<_, _>>()
            .map_err(rt)?;
        docs.push(DocSpans::new(parsed.doc_id, spans));
    }
    Ok(docs)
}

/// Writes each document's gold layer as a standoff .ann file (used by
/// predict when asked for gold dumps in tests and debugging).
#[allow(dead_code)]
pub fn save_standoff(dir: &Path, corpus: &Corpus) -> Result<()> {
    fs::create_dir_all(dir).map_err(rt)?;
    for doc in &corpus.documents {
        let mut buf = Vec::new();
        write_standoff_ann(doc, &mut buf).map_err(rt)?;
        write_atomic(&dir.join(format!("{}.ann", doc.id)), &buf)?;
    }
    Ok(())
}

/// Renders rows as an aligned plain-text table.
pub fn aligned_table(header: &[String], rows: &[Vec<String>]) -> String {
    let cols = header.len();
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in rows {
        for c in 0..cols {
            if let Some(cell) = row.get(c) {
                widths[c] = widths[c].max(cell.chars().count());
            }
        }
    }
    let fmt_row = |cells: &[String]| -> String {
        let mut line = String::new();
        for c in 0..cols {
            if c > 0 {
                line.push_str("  ");
            }
            let cell = cells.get(c).map(String::as_str).unwrap_or("");
            line.push_str(cell);
            for _ in cell.chars().count()..widths[c] {
                line.push(' ');
            }
        }
        line.trim_end().to_string()
    };
    let mut out = String::new();
    out.push_str(&fmt_row(header));
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (cols - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for row in rows {
        out.push_str(&fmt_row(row));
        out.push('\n');
    }
    out
}

/// Bounded worker pool: runs `job(i)` for every index, at most
/// `CLINSEQ_WORKERS` (default: available parallelism) at a time. Results
/// come back in index order regardless of scheduling.
pub fn run_pool<T, F>(count: usize, job: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync,
{
    let workers = std::env::var("CLINSEQ_WORKERS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&w| w > 0)
        .unwrap_or_else(|| {
            std::thread::available_parallelism()
                .map(|n| n.get())
                .unwrap_or(1)
        })
        .min(count.max(1));
    let next = Mutex::new(0usize);
    let results: Vec<Mutex<Option<T>>> = (0..count).map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().unwrap();
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= count {
                    break;
                }
                *results[i].lock().unwrap() = Some(job(i));
            });
        }
    });
    results
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("job completed"))
        .collect()
}

/// Output directory for one run: `runs/<experiment>/<plan>/<seed>/`.
pub fn run_dir(config: &ExperimentConfig, plan_name: &str, seed: u64) -> PathBuf {
    let experiment = if config.experiment.is_empty() {
        "default"
    } else {
        &config.experiment
    };
    config
        .output_dir
        .join("runs")
        .join(experiment)
        .join(plan_name)
        .join(seed.to_string())
}
