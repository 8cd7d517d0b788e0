//! `clinseq` command-line front end.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::ExperimentConfig;
use error::Result;

#[derive(Parser)]
#[command(name = "clinseq", version, about = "Clinical concept extraction toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Shared config-file arguments for experiment-driven subcommands.
#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override a config field by dotted path, e.g. `--set hyperparams.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        ExperimentConfig::load(&self.config, &self.overrides)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train a subword vocabulary on the training corpus.
    BpeTrain(ConfigArgs),
    /// Materialize the configured split plans as splits.json.
    MakeSplits(ConfigArgs),
    /// Masked-language-model pretraining of the encoder.
    Pretrain(ConfigArgs),
    /// Fine-tune taggers over the configured split plans.
    Train(ConfigArgs),
    /// Transplant a source tagger checkpoint onto the target task.
    Transfer(ConfigArgs),
    /// Rank candidate source checkpoints by representation similarity.
    RankSources {
        #[command(flatten)]
        config: ConfigArgs,
        /// Target-task reference tagger checkpoint.
        #[arg(long)]
        reference: PathBuf,
    },
    /// Budget-by-source fine-tuning grid with a predicted-source marker.
    LowresSweep(ConfigArgs),
    /// Tag a corpus with a trained model.
    Predict {
        /// Tagger checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Subword vocabulary file.
        #[arg(long)]
        vocab: PathBuf,
        /// Input corpus.
        #[arg(long)]
        input: PathBuf,
        /// Output: a .jsonl file, or a directory for standoff .ann files.
        #[arg(long)]
        output: PathBuf,
        /// Input format: `conll` or `json`.
        #[arg(long, default_value = "conll")]
        format: String,
        /// Cross-sentence context width in subwords per side.
        #[arg(long, default_value_t = clinseq::subword::DEFAULT_CONTEXT_K)]
        context_k: usize,
        /// Decode from per-position scores instead of the structured layer.
        #[arg(long)]
        no_crf: bool,
        /// Allow structurally invalid tag bigrams at decode time.
        #[arg(long)]
        no_constrain: bool,
        /// Treat whole words as units instead of subwords.
        #[arg(long)]
        word_level: bool,
    },
    /// Strict span-level scoring, optionally with a paired significance test.
    Evaluate {
        /// Gold annotations: a .jsonl span file or a corpus file.
        #[arg(long)]
        gold: PathBuf,
        /// Predictions (.jsonl).
        #[arg(long)]
        pred: PathBuf,
        /// Second prediction file for a paired randomization test.
        #[arg(long)]
        compare: Option<PathBuf>,
        /// Randomization iterations for the significance test.
        #[arg(long, default_value_t = 10_000)]
        iterations: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also report per-label scores.
        #[arg(long)]
        per_type: bool,
        /// Write the JSON report here as well.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Majority-vote span combination across prediction files.
    Ensemble {
        /// Prediction files (.jsonl), one per model.
        #[arg(long = "pred", required = true)]
        preds: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::BpeTrain(args) => commands::cmd_bpe_train(&args.load()?),
        Command::MakeSplits(args) => commands::cmd_make_splits(&args.load()?),
        Command::Pretrain(args) => commands::cmd_pretrain(&args.load()?),
        Command::Train(args) => commands::cmd_train(&args.load()?),
        Command::Transfer(args) => commands::cmd_transfer(&args.load()?),
        Command::RankSources { config, reference } => {
            commands::cmd_rank_sources(&config.load()?, &reference)
        }
        Command::LowresSweep(args) => commands::cmd_lowres_sweep(&args.load()?),
        Command::Predict {
            model,
            vocab,
            input,
            output,
            format,
            context_k,
            no_crf,
            no_constrain,
            word_level,
        } => commands::cmd_predict(&commands::PredictArgs {
            model,
            vocab,
            input,
            output,
            format,
            context_k,
            no_crf,
            no_constrain,
            word_level,
        }),
        Command::Evaluate {
            gold,
            pred,
            compare,
            iterations,
            seed,
            per_type,
            output,
        } => commands::cmd_evaluate(&commands::EvaluateArgs {
            gold,
            pred,
            compare,
            iterations,
            seed,
            per_type,
            output,
        }),
        Command::Ensemble { preds, output } => commands::cmd_ensemble(&preds, &output),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
