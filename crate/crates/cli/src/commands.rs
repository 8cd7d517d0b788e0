//! Subcommand implementations.

use std::path::{Path, PathBuf};

use clinseq::checkpoint;
use clinseq::corpus::{Corpus, TagScheme};
use clinseq::ensemble::{majority_vote, PredictionSet};
use clinseq::eval::{self, DocSpans};
use clinseq::subword::{train_bpe, Vocabulary};
use clinseq::tagger::{CrfHead, Tagger, TaggerOptions};
use clinseq::train::{
    self, low_resource_subset, make_random_splits, Provenance, RunRecord, SelectionMetric,
    SplitPlan, TrainOutcome, TrainSetup,
};
use clinseq::transfer::{self, SourceCandidate};
use clinseq::Tagger32;

use crate::config::{ExperimentConfig, SplitMode};
use crate::error::{rt, AppError, Result};
use crate::io;

/// Loaded experiment data: one merged corpus plus the id lists of its
/// train/dev/test parts, the tokenizer, and the tag scheme.
pub struct Data {
    pub corpus: Corpus,
    pub train_ids: Vec<String>,
    pub dev_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub vocab: Vocabulary,
    pub scheme: TagScheme,
}

fn part_ids(corpus: &Corpus) -> Vec<String> {
    corpus.documents.iter().map(|d| d.id.clone()).collect()
}

fn train_sentences(corpus: &Corpus, ids: &[String]) -> Vec<String> {
    let index: std::collections::BTreeMap<&str, _> = corpus
        .documents
        .iter()
        .map(|d| (d.id.as_str(), d))
        .collect();
    let mut out = Vec::new();
    for id in ids {
        if let Some(doc) = index.get(id.as_str()) {
            for &(s, e) in &doc.sentences {
                out.push(doc.slice(s, e));
            }
        }
    }
    out
}

pub fn load_data(config: &ExperimentConfig) -> Result<Data> {
    let train_path = config
        .dataset
        .train
        .as_ref()
        .ok_or_else(|| AppError::config("dataset.train is required"))?;
    let train = io::load_corpus(train_path, config)?;
    let dev = config
        .dataset
        .dev
        .as_ref()
        .map(|p| io::load_corpus(p, config))
        .transpose()?;
    let test = config
        .dataset
        .test
        .as_ref()
        .map(|p| io::load_corpus(p, config))
        .transpose()?;

    let train_ids = part_ids(&train);
    let dev_ids = dev.as_ref().map(part_ids).unwrap_or_default();
    let test_ids = test.as_ref().map(part_ids).unwrap_or_default();
    let mut documents = train.documents;
    if let Some(c) = dev {
        documents.extend(c.documents);
    }
    if let Some(c) = test {
        documents.extend(c.documents);
    }
    let corpus = Corpus::from_documents(documents).map_err(rt)?;

    let vocab = match &config.tokenizer.vocab {
        Some(path) if path.exists() => io::load_vocab(path)?,
        _ => train_bpe(
            train_sentences(&corpus, &train_ids).into_iter(),
            config.tokenizer.vocab_size,
            config.seed,
        )
        .map_err(rt)?,
    };
    let scheme = TagScheme::new(config.scheme_kind(), corpus.label_set.clone());
    Ok(Data {
        corpus,
        train_ids,
        dev_ids,
        test_ids,
        vocab,
        scheme,
    })
}

/// Initial tagger for fine-tuning: transplanted from a source checkpoint,
/// built around a pretrained encoder, or freshly seeded.
fn init_tagger(config: &ExperimentConfig, data: &Data) -> Result<Tagger32> {
    if let Some(source_path) = &config.transfer_source {
        let source = checkpoint::load_tagger_from_path::<f32>(source_path).map_err(rt)?;
        return transfer::transplant(&source, data.scheme.clone(), config.seed, data.vocab.len())
            .map_err(rt);
    }
    let encoder = match &config.pretrained_encoder {
        Some(path) => {
            let expected = config
                .encoder
                .to_encoder_config(data.vocab.len(), config.seed);
            let mut model =
                checkpoint::load_encoder_expecting::<f32, _>(open(path)?, &expected).map_err(rt)?;
            // The pretraining seed travels with the checkpoint; fine-tuning
            // uses the experiment seed.
            model.config.seed = config.seed;
            model
        }
        None => clinseq::encoder::init_encoder(
            &config
                .encoder
                .to_encoder_config(data.vocab.len(), config.seed),
        )
        .map_err(rt)?,
    };
    let head = CrfHead::init(
        encoder.config.model_dim,
        data.scheme.alphabet_size(),
        config.seed,
    );
    Ok(Tagger {
        encoder,
        head,
        scheme: data.scheme.clone(),
    })
}

fn open(path: &Path) -> Result<std::io::BufReader<std::fs::File>> {
    std::fs::File::open(path)
        .map(std::io::BufReader::new)
        .map_err(|e| AppError::runtime(format!("cannot open {}: {e}", path.display())))
}

fn plans_for(config: &ExperimentConfig, data: &Data) -> Result<Vec<(String, SplitPlan)>> {
    match config.split {
        SplitMode::Standard => Ok(vec![(
            "standard".to_string(),
            SplitPlan::standard(
                data.train_ids.clone(),
                data.dev_ids.clone(),
                data.test_ids.clone(),
            )
            .map_err(rt)?,
        )]),
        SplitMode::AllData => Ok(vec![(
            "all_data".to_string(),
            SplitPlan::all_data(
                data.train_ids.clone(),
                data.dev_ids.clone(),
                data.test_ids.clone(),
            )
            .map_err(rt)?,
        )]),
        SplitMode::Random { n } => {
            let mut plans =
                make_random_splits(&data.train_ids, &data.dev_ids, n, config.seed).map_err(rt)?;
            for plan in &mut plans {
                plan.test_doc_ids = data.test_ids.clone();
            }
            Ok(plans
                .into_iter()
                .map(|p| {
                    let name = match &p.provenance {
                        Provenance::Random { part_index, .. } => format!("random-{part_index}"),
                        _ => "random".to_string(),
                    };
                    (name, p)
                })
                .collect())
        }
    }
}

fn write_manifest(config: &ExperimentConfig, subcommand: &str) -> Result<()> {
    io::write_atomic(
        &config.output_dir.join("manifest.json"),
        config.manifest_json(subcommand).as_bytes(),
    )
}

pub fn cmd_bpe_train(config: &ExperimentConfig) -> Result<()> {
    let data = load_data(config)?;
    let mut buf = Vec::new();
    data.vocab.write(&mut buf).map_err(rt)?;
    let out = config.output_dir.join("vocab.txt");
    io::write_atomic(&out, &buf)?;
    write_manifest(config, "bpe-train")?;
    println!("wrote {} ({} tokens)", out.display(), data.vocab.len());
    Ok(())
}

pub fn cmd_make_splits(config: &ExperimentConfig) -> Result<()> {
    let data = load_data(config)?;
    let plans: Vec<SplitPlan> = plans_for(config, &data)?.into_iter().map(|(_, p)| p).collect();
    let out = config.output_dir.join("splits.json");
    io::write_atomic(
        &out,
        serde_json::to_string_pretty(&plans).map_err(rt)?.as_bytes(),
    )?;
    write_manifest(config, "make-splits")?;
    println!("wrote {} ({} plans)", out.display(), plans.len());
    Ok(())
}

pub fn cmd_pretrain(config: &ExperimentConfig) -> Result<()> {
    let data = load_data(config)?;
    let model = clinseq::encoder::init_encoder::<f32>(
        &config
            .encoder
            .to_encoder_config(data.vocab.len(), config.seed),
    )
    .map_err(rt)?;
    let schedule = train::MlmSchedule {
        epochs: config.pretrain.epochs,
        learning_rate: config.pretrain.learning_rate,
        batch_size: config.pretrain.batch_size,
        context_k: config.effective_k(),
        seed: config.seed,
        policy: Default::default(),
    };
    let (model, losses) = train::pretrain_mlm(model, &data.corpus, &data.vocab, &schedule)
        .map_err(rt)?;
    let mut buf = Vec::new();
    checkpoint::save_encoder(&model, &mut buf).map_err(rt)?;
    io::write_atomic(&config.output_dir.join("encoder.clxk"), &buf)?;
    let rounded: Vec<f64> = losses.iter().map(|v| (v * 1e6).round() / 1e6).collect();
    io::write_atomic(
        &config.output_dir.join("pretrain_losses.json"),
        serde_json::to_string_pretty(&rounded).map_err(rt)?.as_bytes(),
    )?;
    write_manifest(config, "pretrain")?;
    println!("pretrained {} epochs; losses {rounded:?}", losses.len());
    Ok(())
}

fn run_one(
    config: &ExperimentConfig,
    data: &Data,
    plan: &SplitPlan,
    init: Tagger32,
) -> std::result::Result<TrainOutcome<f32>, String> {
    let metric = if plan.dev_doc_ids.is_empty() {
        SelectionMetric::TrainLoss
    } else {
        SelectionMetric::DevF1
    };
    let hp = config.hyperparams.to_hyperparams(metric, config.seed);
    let setup = TrainSetup {
        corpus: &data.corpus,
        plan,
        vocab: &data.vocab,
        context_k: config.effective_k(),
        options: config.tagger_options(),
        word_level: !config.ablations.subword,
    };
    train::train_tagger(&setup, init, &hp).map_err(|e| e.to_string())
}

fn save_run(dir: &Path, outcome: &TrainOutcome<f32>) -> Result<RunRecord> {
    let mut buf = Vec::new();
    checkpoint::save_tagger(&outcome.tagger, &mut buf).map_err(rt)?;
    let ckpt = dir.join("model.clxk");
    io::write_atomic(&ckpt, &buf)?;
    let mut record = outcome.record.rounded();
    record.checkpoint = Some(ckpt.display().to_string());
    io::write_atomic(&dir.join("record.json"), record.to_json().as_bytes())?;
    Ok(record)
}

pub fn cmd_train(config: &ExperimentConfig) -> Result<()> {
    let data = load_data(config)?;
    let init = init_tagger(config, &data)?;
    let plans = plans_for(config, &data)?;
    let results = io::run_pool(plans.len(), |i| {
        run_one(config, &data, &plans[i].1, init.clone())
    });
    let mut records = Vec::new();
    for ((name, _), result) in plans.iter().zip(results) {
        let outcome = result.map_err(AppError::runtime)?;
        let dir = io::run_dir(config, name, config.seed);
        records.push(save_run(&dir, &outcome)?);
    }
    let median = train::select_model(&records, train::SelectionCriterion::Median).map_err(rt)?;
    let best = train::select_model(&records, train::SelectionCriterion::Best).map_err(rt)?;
    let summary = serde_json::json!({
        "runs": records,
        "median_run": plans[median].0,
        "best_run": plans[best].0,
    });
    io::write_atomic(
        &config.output_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).map_err(rt)?.as_bytes(),
    )?;
    // Persist the tokenizer actually used, so predict can reuse it.
    let mut vbuf = Vec::new();
    data.vocab.write(&mut vbuf).map_err(rt)?;
    io::write_atomic(&config.output_dir.join("vocab.txt"), &vbuf)?;
    write_manifest(config, "train")?;
    println!(
        "trained {} run(s); median={} best={}",
        records.len(),
        plans[median].0,
        plans[best].0
    );
    Ok(())
}

pub fn cmd_transfer(config: &ExperimentConfig) -> Result<()> {
    let source_path = config
        .transfer_source
        .as_ref()
        .ok_or_else(|| AppError::config("transfer_source is required"))?;
    let data = load_data(config)?;
    let source = checkpoint::load_tagger_from_path::<f32>(source_path).map_err(rt)?;
    let moved = transfer::transplant(&source, data.scheme.clone(), config.seed, data.vocab.len())
        .map_err(rt)?;
    let mut buf = Vec::new();
    checkpoint::save_tagger(&moved, &mut buf).map_err(rt)?;
    let out = config.output_dir.join("transplant.clxk");
    io::write_atomic(&out, &buf)?;
    write_manifest(config, "transfer")?;
    println!("wrote {}", out.display());
    Ok(())
}

pub fn cmd_rank_sources(config: &ExperimentConfig, reference: &Path) -> Result<()> {
    if config.sources.is_empty() {
        return Err(AppError::config("sources list is required"));
    }
    let data = load_data(config)?;
    let reference = checkpoint::load_tagger_from_path::<f32>(reference).map_err(rt)?;
    let mut candidates = Vec::new();
    for s in &config.sources {
        candidates.push(SourceCandidate {
            task: s.task.clone(),
            tagger: checkpoint::load_tagger_from_path::<f32>(&s.checkpoint).map_err(rt)?,
        });
    }
    let probe = train_sentences(&data.corpus, &data.train_ids);
    let ranking = transfer::rank_sources(&probe, &reference, &candidates, &data.vocab)
        .map_err(rt)?;
    let entries: Vec<serde_json::Value> = ranking
        .entries
        .iter()
        .map(|(task, score)| {
            serde_json::json!({"task": task, "score": (score * 1e6).round() / 1e6})
        })
        .collect();
    let out = config.output_dir.join("ranking.json");
    io::write_atomic(
        &out,
        serde_json::to_string_pretty(&entries).map_err(rt)?.as_bytes(),
    )?;
    write_manifest(config, "rank-sources")?;
    for (task, score) in &ranking.entries {
        println!("{task}  {score:.6}");
    }
    Ok(())
}

pub struct PredictArgs {
    pub model: PathBuf,
    pub vocab: PathBuf,
    pub input: PathBuf,
    pub output: PathBuf,
    pub format: String,
    pub context_k: usize,
    pub no_crf: bool,
    pub no_constrain: bool,
    pub word_level: bool,
}

pub fn cmd_predict(args: &PredictArgs) -> Result<()> {
    let mut config = ExperimentConfig::default();
    config.dataset.format = args.format.clone();
    let corpus = io::load_corpus(&args.input, &config)?;
    let vocab = io::load_vocab(&args.vocab)?;
    let tagger = checkpoint::load_tagger_from_path::<f32>(&args.model).map_err(rt)?;
    let options = TaggerOptions {
        use_crf: !args.no_crf,
        constrain_decode: !args.no_constrain,
        constrain_train: false,
    };
    let ids = part_ids(&corpus);
    let docs = train::predict_corpus(
        &tagger,
        &corpus,
        &ids,
        &vocab,
        args.context_k,
        &options,
        args.word_level,
    )
    .map_err(rt)?;
    io::save_predictions(&args.output, &docs)?;
    println!("wrote {} ({} documents)", args.output.display(), docs.len());
    Ok(())
}

fn load_span_sets(path: &Path) -> Result<Vec<DocSpans>> {
    let name = path.to_string_lossy();
    if name.ends_with(".jsonl") {
        io::load_predictions(path)
    } else {
        let mut config = ExperimentConfig::default();
        config.dataset.format = if name.ends_with(".json") {
            "json".to_string()
        } else {
            "conll".to_string()
        };
        let corpus = io::load_corpus(path, &config)?;
        let ids = part_ids(&corpus);
        train::gold_spans(&corpus, &ids).map_err(rt)
    }
}

pub struct EvaluateArgs {
    pub gold: PathBuf,
    pub pred: PathBuf,
    pub compare: Option<PathBuf>,
    pub iterations: usize,
    pub seed: u64,
    pub per_type: bool,
    pub output: Option<PathBuf>,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let gold = load_span_sets(&args.gold)?;
    let pred = load_span_sets(&args.pred)?;
    let report = eval::strict_micro_f1(&gold, &pred).map_err(rt)?;
    let mut json = serde_json::to_value(&report).map_err(rt)?;

    let mut rows = vec![vec![
        "micro".to_string(),
        format!("{:.6}", report.precision),
        format!("{:.6}", report.recall),
        format!("{:.6}", report.f1),
    ]];
    if args.per_type {
        for (label, c) in &report.per_type {
            rows.push(vec![
                label.clone(),
                format!("{:.6}", c.precision()),
                format!("{:.6}", c.recall()),
                format!("{:.6}", c.f1()),
            ]);
        }
    }
    let header: Vec<String> = ["", "P", "R", "F1"].iter().map(|s| s.to_string()).collect();
    print!("{}", io::aligned_table(&header, &rows));

    if let Some(compare) = &args.compare {
        let other = load_span_sets(compare)?;
        let sig = eval::significance_test(&gold, &pred, &other, args.iterations, args.seed)
            .map_err(rt)?;
        println!(
            "significance vs {}: p = {:.6} ({})",
            compare.display(),
            sig.p_value,
            sig.code
        );
        json["significance"] = serde_json::to_value(&sig).map_err(rt)?;
    }
    if let Some(out) = &args.output {
        io::write_atomic(out, serde_json::to_string_pretty(&json).map_err(rt)?.as_bytes())?;
    }
    Ok(())
}

pub fn cmd_ensemble(preds: &[PathBuf], output: &Path) -> Result<()> {
    let mut sets = Vec::new();
    for (i, path) in preds.iter().enumerate() {
        sets.push(PredictionSet {
            model_id: format!("m{i}:{}", path.display()),
            docs: io::load_predictions(path)?,
        });
    }
    let voted = majority_vote(&sets).map_err(rt)?;
    io::save_predictions(output, &voted)?;
    println!("wrote {} from {} models", output.display(), sets.len());
    Ok(())
}

pub fn cmd_lowres_sweep(config: &ExperimentConfig) -> Result<()> {
    if config.budgets.is_empty() {
        return Err(AppError::config("budgets list is required"));
    }
    let data = load_data(config)?;
    if data.dev_ids.is_empty() {
        return Err(AppError::config(
            "lowres-sweep needs a dev set for its scores",
        ));
    }
    let base_plan = SplitPlan::standard(
        data.train_ids.clone(),
        data.dev_ids.clone(),
        data.test_ids.clone(),
    )
    .map_err(rt)?;
    let mut sources = Vec::new();
    for s in &config.sources {
        sources.push((
            s.task.clone(),
            checkpoint::load_tagger_from_path::<f32>(&s.checkpoint).map_err(rt)?,
        ));
    }
    let mut columns = vec!["no-transfer".to_string()];
    columns.extend(sources.iter().map(|(t, _)| t.clone()));

    let fresh = init_tagger(config, &data)?;
    let budgets = &config.budgets;
    let cells: Vec<(usize, usize)> = (0..budgets.len())
        .flat_map(|b| (0..columns.len()).map(move |c| (b, c)))
        .collect();
    let results = io::run_pool(cells.len(), |i| {
        let (bi, ci) = cells[i];
        let plan = low_resource_subset(&base_plan, budgets[bi]);
        let init = if ci == 0 {
            Ok(fresh.clone())
        } else {
            transfer::transplant(
                &sources[ci - 1].1,
                data.scheme.clone(),
                config.seed,
                data.vocab.len(),
            )
            .map_err(|e| e.to_string())
        };
        init.and_then(|t| run_one(config, &data, &plan, t))
    });

    // Dev-score grid; cell failures are recorded and the sweep continues.
    let mut values: Vec<Vec<Option<f64>>> = vec![vec![None; columns.len()]; budgets.len()];
    let mut errors: Vec<String> = Vec::new();
    let mut reference: Option<Tagger32> = None;
    for ((bi, ci), result) in cells.iter().zip(results) {
        // Ranking reference: the no-transfer model at the largest budget.
        if *ci == 0 && *bi == budgets.len() - 1 {
            if let Ok(outcome) = &result {
                reference = Some(outcome.tagger.clone());
            }
        }
        match result {
            Ok(outcome) => {
                let dir = io::run_dir(
                    config,
                    &format!("sweep-b{}-{}", budgets[*bi], columns[*ci]),
                    config.seed,
                );
                let record = save_run(&dir, &outcome)?;
                values[*bi][*ci] = Some((record.selection_score() * 1e6).round() / 1e6);
            }
            Err(e) => errors.push(format!(
                "budget {} column {}: {e}",
                budgets[*bi], columns[*ci]
            )),
        }
    }

    // Predict the best source by representation similarity against the
    // largest-budget no-transfer model.
    let predicted_source = if sources.is_empty() {
        None
    } else {
        let reference = match reference {
            Some(t) => t,
            None => {
                let plan = low_resource_subset(&base_plan, *budgets.last().unwrap());
                run_one(config, &data, &plan, fresh.clone())
                    .map_err(AppError::runtime)?
                    .tagger
            }
        };
        let probe = train_sentences(&data.corpus, &data.train_ids);
        let candidates: Vec<SourceCandidate<f32>> = sources
            .iter()
            .map(|(task, tagger)| SourceCandidate {
                task: task.clone(),
                tagger: tagger.clone(),
            })
            .collect();
        let ranking = transfer::rank_sources(&probe, &reference, &candidates, &data.vocab)
            .map_err(rt)?;
        Some(ranking.entries[0].0.clone())
    };

    let table_json = serde_json::json!({
        "budgets": budgets,
        "columns": columns,
        "dev_f1": values,
        "predicted_source": predicted_source,
        "errors": errors,
    });
    io::write_atomic(
        &config.output_dir.join("sweep.json"),
        serde_json::to_string_pretty(&table_json).map_err(rt)?.as_bytes(),
    )?;

    let header: Vec<String> = std::iter::once("sentences".to_string())
        .chain(columns.iter().map(|c| {
            if Some(c) == predicted_source.as_ref() {
                format!("{c}*")
            } else {
                c.clone()
            }
        }))
        .collect();
    let rows: Vec<Vec<String>> = budgets
        .iter()
        .zip(&values)
        .map(|(b, row)| {
            std::iter::once(b.to_string())
                .chain(row.iter().map(|v| match v {
                    Some(f) => format!("{f:.6}"),
                    None => "err".to_string(),
                }))
                .collect()
        })
        .collect();
    let text = io::aligned_table(&header, &rows);
    io::write_atomic(&config.output_dir.join("sweep.txt"), text.as_bytes())?;
    write_manifest(config, "lowres-sweep")?;
    print!("{text}");
    if let Some(s) = &predicted_source {
        println!("predicted source: {s}");
    }
    Ok(())
}
