//! Inference front-ends: free generation, translation decoding and
//! classification by scoring each candidate label after a prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::model::CausalLm;
use crate::numerics::log_softmax;
use crate::vocab::{Vocabulary, EOS, SEP};
use crate::{Error, Result};

/// Prompt suffix that turns the next tokens into a category name.
pub const DEFAULT_TEMPLATE: &str = "这个句子的类别是";

/// The fourteen sub-categories of the Zi (philosophers) section.
pub const ZI_CATEGORIES: [&str; 14] = [
    "儒家", "兵家", "法家", "农家", "医家", "天文算法", "艺术", "术数", "谱录", "杂家", "小说家",
    "释家", "道家", "类书",
];

const BLANK: &str = "____";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub prefix: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            prefix: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

impl PromptTemplate {
    /// Accepts a pattern such as `这个句子的类别是____`; the blank marks the
    /// generation site and is not part of the prompt.
    pub fn from_pattern(pattern: &str) -> Self {
        let prefix = match pattern.find(BLANK) {
            Some(i) => &pattern[..i],
            None => pattern,
        };
        PromptTemplate {
            prefix: prefix.trim_end().to_string(),
        }
    }

    /// `BOS text SEP prefix`
    pub fn prompt_ids(&self, vocab: &Vocabulary, text: &str) -> Vec<usize> {
        let mut ids = vocab.encode(text, true, false).ids;
        ids.push(SEP);
        ids.extend(vocab.encode(&self.prefix, false, false).ids);
        ids
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    TopK(usize),
    Temperature(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    #[serde(default = "default_max_gen_length")]
    pub max_gen_length: usize,
    #[serde(default = "default_strategy")]
    pub strategy: Strategy,
    #[serde(default)]
    pub seed: u64,
}

fn default_max_gen_length() -> usize {
    512
}

fn default_strategy() -> Strategy {
    Strategy::Greedy
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            max_gen_length: default_max_gen_length(),
            strategy: Strategy::Greedy,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_gen_length == 0 {
            return Err(Error::Param("max_gen_length must be at least 1".into()));
        }
        match self.strategy {
            Strategy::TopK(0) => Err(Error::Param("top-k needs k >= 1".into())),
            Strategy::Temperature(t) if !(t > 0.0 && t.is_finite()) => {
                Err(Error::Param(format!("temperature must be positive, got {t}")))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelScoring {
    #[default]
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub score: f64,
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn sample(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if u < w {
            return i;
        }
        u -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

fn pick(row: &[f64], strategy: Strategy, rng: &mut ChaCha8Rng) -> usize {
    match strategy {
        Strategy::Greedy => argmax(row),
        Strategy::TopK(k) => {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
            order.truncate(k.min(row.len()));
            let max = row[order[0]];
            let weights: Vec<f64> = order.iter().map(|&i| (row[i] - max).exp()).collect();
            order[sample(&weights, rng)]
        }
        Strategy::Temperature(t) => {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = row.iter().map(|&x| ((x - max) / t).exp()).collect();
            sample(&weights, rng)
        }
    }
}

/// Extends `prefix` one token at a time until EOS, `max_gen_length` new
/// tokens, or a full context. Returns only the new tokens (EOS included
/// when produced).
pub fn generate<M: CausalLm + ?Sized>(model: &M, prefix: &[usize], cfg: &DecodeConfig) -> Result<Vec<usize>> {
    cfg.validate()?;
    if prefix.is_empty() {
        return Err(Error::Param("generation needs a non-empty prefix".into()));
    }
    if prefix.len() >= model.context_len() {
        return Err(Error::TooLong {
            len: prefix.len(),
            context_len: model.context_len(),
        });
    }
    let vocab = model.vocab_size();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ids = prefix.to_vec();
    let mut out = Vec::new();
    while out.len() < cfg.max_gen_length && ids.len() < model.context_len() {
        let logits = model.logits(&ids)?;
        let row = &logits[(ids.len() - 1) * vocab..ids.len() * vocab];
        let next = pick(row, cfg.strategy, &mut rng);
        ids.push(next);
        out.push(next);
        if next == EOS {
            break;
        }
    }
    Ok(out)
}

/// `BOS ancient SEP` followed by generation; returns the decoded target.
pub fn translate<M: CausalLm + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    ancient: &str,
    cfg: &DecodeConfig,
) -> Result<String> {
    let mut prefix = vocab.encode(ancient, true, false).ids;
    prefix.push(SEP);
    let mut generated = generate(model, &prefix, cfg)?;
    if generated.last() == Some(&EOS) {
        generated.pop();
    }
    vocab.decode(&generated)
}

pub fn classify<M: CausalLm + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    text: &str,
    labels: &[String],
    template: &PromptTemplate,
) -> Result<(String, Vec<LabelScore>)> {
    classify_with(model, vocab, text, labels, template, LabelScoring::Mean)
}

/// Scores each label by its teacher-forced log-probability after the prompt.
/// Scores come back sorted descending; ties keep the declared label order.
pub fn classify_with<M: CausalLm + ?Sized>(
    model: &M,
    vocab: &Vocabulary,
    text: &str,
    labels: &[String],
    template: &PromptTemplate,
    scoring: LabelScoring,
) -> Result<(String, Vec<LabelScore>)> {
    if labels.is_empty() {
        return Err(Error::Param("empty label set".into()));
    }
    let prompt = template.prompt_ids(vocab, text);
    let width = model.vocab_size();
    let mut scores = Vec::with_capacity(labels.len());
    for label in labels {
        let label_ids = vocab.encode(label, false, false).ids;
        if label_ids.is_empty() {
            return Err(Error::Param("labels must be non-empty".into()));
        }
        let mut seq = prompt.clone();
        seq.extend_from_slice(&label_ids);
        seq.pop();
        if seq.len() > model.context_len() {
            return Err(Error::TooLong {
                len: seq.len(),
                context_len: model.context_len(),
            });
        }
        let logits = model.logits(&seq)?;
        let mut total = 0.0;
        for (i, &target) in label_ids.iter().enumerate() {
            let pos = prompt.len() - 1 + i;
            let lp = log_softmax(&logits[pos * width..(pos + 1) * width])?;
            total += lp[target];
        }
        let score = match scoring {
            LabelScoring::Mean => total / label_ids.len() as f64,
            LabelScoring::Sum => total,
        };
        scores.push(LabelScore {
            label: label.clone(),
            score,
        });
    }
    scores.sort_by(|a, b| b.score.total_cmp(&a.score));
    Ok((scores[0].label.clone(), scores))
}
