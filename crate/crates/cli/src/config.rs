//! TOML run configurations. Key names follow the usual hyperparameter
//! tables (`learning_rate`, `num_train_epochs`, ...); unknown keys are
//! rejected. Every run writes the fully resolved config next to its outputs.

use std::path::{Path, PathBuf};

use gujin::model::ModelConfig;
use gujin::tasks::LabelScoring;
use gujin::training::TrainConfig;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::Failure;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(alias = "leraning_rate", skip_serializing_if = "Option::is_none")]
    pub learning_rate: Option<f64>,
    #[serde(alias = "epoches", skip_serializing_if = "Option::is_none")]
    pub num_train_epochs: Option<usize>,
    #[serde(alias = "train_batch_size", skip_serializing_if = "Option::is_none")]
    pub per_device_train_batch_size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub warmup_proportion: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_seq_length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
    /// Write `checkpoint-<step>.gjlm` every this many steps.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub checkpoint_every: Option<usize>,
}

impl TrainSection {
    /// Fills unset keys from `preset`. An unset `max_seq_length` larger than
    /// the model context is lowered to the context; the second value says so.
    pub fn resolve(&self, preset: TrainConfig, context_len: usize) -> (TrainConfig, bool) {
        let clamp = self.max_seq_length.is_none() && preset.max_seq_length > context_len;
        let cfg = TrainConfig {
            learning_rate: self.learning_rate.unwrap_or(preset.learning_rate),
            epochs: self.num_train_epochs.unwrap_or(preset.epochs),
            batch_size: self.per_device_train_batch_size.unwrap_or(preset.batch_size),
            warmup_proportion: self.warmup_proportion.unwrap_or(preset.warmup_proportion),
            max_seq_length: self
                .max_seq_length
                .unwrap_or(preset.max_seq_length.min(context_len)),
            seed: self.seed.unwrap_or(preset.seed),
            grad_clip: self.grad_clip.or(preset.grad_clip),
        };
        (cfg, clamp)
    }

    pub fn echo(cfg: &TrainConfig, checkpoint_every: Option<usize>) -> Self {
        TrainSection {
            learning_rate: Some(cfg.learning_rate),
            num_train_epochs: Some(cfg.epochs),
            per_device_train_batch_size: Some(cfg.batch_size),
            warmup_proportion: Some(cfg.warmup_proportion),
            max_seq_length: Some(cfg.max_seq_length),
            seed: Some(cfg.seed),
            grad_clip: cfg.grad_clip,
            checkpoint_every,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    #[default]
    Desk,
    Full,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub preset: Option<Preset>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_layers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_heads: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_model: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_ff: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub context_len: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub tie_embeddings: Option<bool>,
}

impl ModelSection {
    pub fn resolve(&self, vocab_size: usize) -> ModelConfig {
        let base = match self.preset.unwrap_or_default() {
            Preset::Desk => ModelConfig::desk(vocab_size),
            Preset::Full => ModelConfig {
                vocab_size,
                ..ModelConfig::full_scale(0)
            },
        };
        ModelConfig {
            n_layers: self.n_layers.unwrap_or(base.n_layers),
            n_heads: self.n_heads.unwrap_or(base.n_heads),
            d_model: self.d_model.unwrap_or(base.d_model),
            d_ff: self.d_ff.unwrap_or(base.d_ff),
            context_len: self.context_len.unwrap_or(base.context_len),
            vocab_size,
            tie_embeddings: self.tie_embeddings.unwrap_or(base.tie_embeddings),
        }
    }

    pub fn echo(cfg: &ModelConfig) -> Self {
        ModelSection {
            preset: None,
            n_layers: Some(cfg.n_layers),
            n_heads: Some(cfg.n_heads),
            d_model: Some(cfg.d_model),
            d_ff: Some(cfg.d_ff),
            context_len: Some(cfg.context_len),
            tie_embeddings: Some(cfg.tie_embeddings),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_gen_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    /// Plain text, one sentence per line.
    pub corpus: PathBuf,
    pub vocab: PathBuf,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    /// Continue from this checkpoint instead of a fresh model.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslateConfig {
    /// Aligned JSONL with `Ancient` and `Chinese` keys.
    pub pairs: PathBuf,
    pub vocab: PathBuf,
    pub output_dir: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub decode: DecodeSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifyConfig {
    /// Labeled JSONL with `text` and `label` keys.
    pub examples: PathBuf,
    pub vocab: PathBuf,
    pub output_dir: PathBuf,
    /// Declared label set; defaults to the fourteen Zi categories.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<String>,
    /// Prompt pattern; a trailing `____` marks the label position.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub template: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scoring: Option<LabelScoring>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub init_checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
}

/// Reads a config; relative paths inside it resolve against its directory.
pub fn load<T: DeserializeOwned + Relocate>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    let mut cfg: T = toml::from_str(&text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
    if let Some(dir) = path.parent() {
        cfg.relocate(dir);
    }
    Ok(cfg)
}

pub fn echo<T: Serialize>(cfg: &T, dir: &Path) -> Result<(), Failure> {
    let text = toml::to_string(cfg).map_err(|e| Failure::Usage(e.to_string()))?;
    let path = dir.join("config.toml");
    std::fs::write(&path, text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub trait Relocate {
    fn relocate(&mut self, base: &Path);
}

fn rebase(p: &mut PathBuf, base: &Path) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

fn rebase_opt(p: &mut Option<PathBuf>, base: &Path) {
    if let Some(p) = p {
        rebase(p, base);
    }
}

impl Relocate for PretrainConfig {
    fn relocate(&mut self, base: &Path) {
        rebase(&mut self.corpus, base);
        rebase(&mut self.vocab, base);
        rebase(&mut self.output_dir, base);
        rebase_opt(&mut self.validation, base);
        rebase_opt(&mut self.init_checkpoint, base);
    }
}

impl Relocate for TranslateConfig {
    fn relocate(&mut self, base: &Path) {
        rebase(&mut self.pairs, base);
        rebase(&mut self.vocab, base);
        rebase(&mut self.output_dir, base);
        rebase_opt(&mut self.validation, base);
        rebase_opt(&mut self.init_checkpoint, base);
    }
}

impl Relocate for ClassifyConfig {
    fn relocate(&mut self, base: &Path) {
        rebase(&mut self.examples, base);
        rebase(&mut self.vocab, base);
        rebase(&mut self.output_dir, base);
        rebase_opt(&mut self.validation, base);
        rebase_opt(&mut self.init_checkpoint, base);
    }
}
