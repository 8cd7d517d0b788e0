//! Experiment configuration: a single JSON document, schema-validated with
//! unknown keys rejected. Flags override fields by dotted path before
//! deserialization, and every artifact directory receives a `manifest.json`
//! holding the resolved config (with absolute paths), which can be re-run
//! as a config file itself.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{AppError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    #[serde(default)]
    pub test: Option<PathBuf>,
    /// `conll` or `json` (a serialized corpus).
    #[serde(default = "default_format")]
    pub format: String,
    #[serde(default)]
    pub token_column: usize,
}

fn default_format() -> String {
    "conll".to_string()
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: None,
            dev: None,
            test: None,
            format: default_format(),
            token_column: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    /// Existing vocabulary file; when absent, `bpe-train` output is expected
    /// here and `train` falls back to training one on the fly.
    #[serde(default)]
    pub vocab: Option<PathBuf>,
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_context_k")]
    pub context_k: usize,
}

fn default_vocab_size() -> usize {
    200
}

fn default_context_k() -> usize {
    clinseq::subword::DEFAULT_CONTEXT_K
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            vocab: None,
            vocab_size: default_vocab_size(),
            context_k: default_context_k(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderSettings {
    #[serde(default = "d_model_dim")]
    pub model_dim: usize,
    #[serde(default = "d_num_heads")]
    pub num_heads: usize,
    #[serde(default = "d_num_layers")]
    pub num_layers: usize,
    #[serde(default = "d_ff")]
    pub feedforward_dim: usize,
    #[serde(default = "d_max_positions")]
    pub max_positions: usize,
    #[serde(default)]
    pub dropout_rate: f64,
}

fn d_model_dim() -> usize {
    64
}
fn d_num_heads() -> usize {
    4
}
fn d_num_layers() -> usize {
    2
}
fn d_ff() -> usize {
    128
}
fn d_max_positions() -> usize {
    512
}

impl Default for EncoderSettings {
    fn default() -> Self {
        EncoderSettings {
            model_dim: d_model_dim(),
            num_heads: d_num_heads(),
            num_layers: d_num_layers(),
            feedforward_dim: d_ff(),
            max_positions: d_max_positions(),
            dropout_rate: 0.0,
        }
    }
}

impl EncoderSettings {
    pub fn to_encoder_config(&self, vocab_size: usize, seed: u64) -> clinseq::encoder::EncoderConfig {
        clinseq::encoder::EncoderConfig {
            vocab_size,
            model_dim: self.model_dim,
            num_heads: self.num_heads,
            num_layers: self.num_layers,
            feedforward_dim: self.feedforward_dim,
            max_positions: self.max_positions,
            dropout_rate: self.dropout_rate,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperSettings {
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_epsilon")]
    pub epsilon: f64,
    #[serde(default = "d_decay")]
    pub weight_decay: f64,
}

fn d_lr() -> f64 {
    3e-4
}
fn d_batch() -> usize {
    16
}
fn d_epochs() -> usize {
    20
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_epsilon() -> f64 {
    1e-8
}
fn d_decay() -> f64 {
    0.01
}

impl Default for HyperSettings {
    fn default() -> Self {
        HyperSettings {
            learning_rate: d_lr(),
            batch_size: d_batch(),
            epochs: d_epochs(),
            beta1: d_beta1(),
            beta2: d_beta2(),
            epsilon: d_epsilon(),
            weight_decay: d_decay(),
        }
    }
}

impl HyperSettings {
    pub fn to_hyperparams(
        &self,
        metric: clinseq::train::SelectionMetric,
        seed: u64,
    ) -> clinseq::train::Hyperparams {
        clinseq::train::Hyperparams {
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            weight_decay: self.weight_decay,
            selection_metric: metric,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, tag = "mode", rename_all = "snake_case")]
pub enum SplitMode {
    Standard,
    Random { n: usize },
    AllData,
}

impl Default for SplitMode {
    fn default() -> Self {
        SplitMode::Standard
    }
}

/// The ablation switch set: tag scheme, output layer, cross-sentence
/// context, and subword vs whole-word units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    #[serde(default = "yes")]
    pub biose: bool,
    #[serde(default = "yes")]
    pub crf: bool,
    #[serde(default = "yes")]
    pub context: bool,
    #[serde(default = "yes")]
    pub subword: bool,
}

fn yes() -> bool {
    true
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            biose: true,
            crf: true,
            context: true,
            subword: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    #[serde(default = "d_pre_epochs")]
    pub epochs: usize,
    #[serde(default = "d_pre_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
}

fn d_pre_epochs() -> usize {
    3
}
fn d_pre_lr() -> f64 {
    1e-3
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: d_pre_epochs(),
            learning_rate: d_pre_lr(),
            batch_size: d_batch(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceConfig {
    pub task: String,
    pub checkpoint: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Set in manifests to record which subcommand produced them.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub subcommand: Option<String>,
    #[serde(default)]
    pub experiment: String,
    #[serde(default)]
    pub dataset: DatasetConfig,
    #[serde(default)]
    pub tokenizer: TokenizerConfig,
    #[serde(default)]
    pub encoder: EncoderSettings,
    #[serde(default)]
    pub hyperparams: HyperSettings,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub split: SplitMode,
    #[serde(default)]
    pub ablations: AblationConfig,
    /// Encoder checkpoint to initialize fine-tuning from.
    #[serde(default)]
    pub pretrained_encoder: Option<PathBuf>,
    /// Source tagger checkpoint to transplant from.
    #[serde(default)]
    pub transfer_source: Option<PathBuf>,
    /// Candidate transfer sources for ranking and sweeps.
    #[serde(default)]
    pub sources: Vec<SourceConfig>,
    /// Low-resource sentence budgets.
    #[serde(default)]
    pub budgets: Vec<usize>,
    #[serde(default = "d_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
}

fn d_output_dir() -> PathBuf {
    PathBuf::from("out")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("empty config is valid")
    }
}

/// Applies `--set key.path=value` overrides onto the raw JSON tree.
fn apply_overrides(tree: &mut serde_json::Value, overrides: &[String]) -> Result<()> {
    for item in overrides {
        let (path, raw) = item
            .split_once('=')
            .ok_or_else(|| AppError::config(format!("override `{item}` is not key=value")))?;
        let value: serde_json::Value = serde_json::from_str(raw)
            .unwrap_or_else(|_| serde_json::Value::String(raw.to_string()));
        let keys: Vec<&str> = path.split('.').collect();
        let (last, parents) = keys.split_last().expect("split produced a key");
        let mut node = &mut *tree;
        for key in parents {
            node = node
                .as_object_mut()
                .ok_or_else(|| AppError::config(format!("override path `{path}` is not an object")))?
                .entry(key.to_string())
                .or_insert_with(|| serde_json::json!({}));
        }
        node.as_object_mut()
            .ok_or_else(|| AppError::config(format!("override path `{path}` is not an object")))?
            .insert(last.to_string(), value);
    }
    Ok(())
}

fn absolutize(path: &mut PathBuf, base: &Path) {
    if path.is_relative() {
        *path = base.join(&path);
    }
}

impl ExperimentConfig {
    /// Loads a config file, applies overrides, validates the schema, and
    /// resolves all paths relative to the config file's directory.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| AppError::config(format!("cannot read config {}: {e}", path.display())))?;
        let mut tree: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| AppError::config(format!("config {}: {e}", path.display())))?;
        apply_overrides(&mut tree, overrides)?;
        let mut config: ExperimentConfig = serde_json::from_value(tree)
            .map_err(|e| AppError::config(format!("config {}: {e}", path.display())))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or_else(|| PathBuf::from("."));
        let base = base
            .canonicalize()
            .map_err(|e| AppError::config(format!("config directory: {e}")))?;
        config.resolve_paths(&base);
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        for p in [
            self.dataset.train.as_mut(),
            self.dataset.dev.as_mut(),
            self.dataset.test.as_mut(),
            self.tokenizer.vocab.as_mut(),
            self.pretrained_encoder.as_mut(),
            self.transfer_source.as_mut(),
        ]
        .into_iter()
        .flatten()
        {
            absolutize(p, base);
        }
        for s in &mut self.sources {
            absolutize(&mut s.checkpoint, base);
        }
        absolutize(&mut self.output_dir, base);
    }

    pub fn validate(&self) -> Result<()> {
        if self.dataset.format != "conll" && self.dataset.format != "json" {
            return Err(AppError::config(format!(
                "dataset.format must be `conll` or `json`, got `{}`",
                self.dataset.format
            )));
        }
        if let SplitMode::Random { n } = self.split {
            if n == 0 {
                return Err(AppError::config("split.n must be positive"));
            }
        }
        Ok(())
    }

    /// Effective context width: the configured k, or 0 with context ablated.
    pub fn effective_k(&self) -> usize {
        if self.ablations.context {
            self.tokenizer.context_k
        } else {
            0
        }
    }

    pub fn tagger_options(&self) -> clinseq::tagger::TaggerOptions {
        clinseq::tagger::TaggerOptions {
            use_crf: self.ablations.crf,
            constrain_decode: true,
            constrain_train: false,
        }
    }

    pub fn scheme_kind(&self) -> clinseq::corpus::SchemeKind {
        if self.ablations.biose {
            clinseq::corpus::SchemeKind::Biose
        } else {
            clinseq::corpus::SchemeKind::Bio
        }
    }

    /// Serialized manifest: the resolved config plus the subcommand name.
    /// All paths are already absolute, so the manifest re-runs from anywhere.
    pub fn manifest_json(&self, subcommand: &str) -> String {
        let mut with_cmd = self.clone();
        with_cmd.subcommand = Some(subcommand.to_string());
        serde_json::to_string_pretty(&with_cmd).expect("config serializes")
    }
}
