//! Causal-LM pretraining and the two fine-tuning regimes.
//!
//! Every regime reduces to a list of [`Example`]s: a token sequence plus a
//! mask over its next-token predictions. Pretraining predicts everything;
//! fine-tuning predicts only the target (translation) or label tokens and
//! the closing EOS.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{AlignedPair, LabeledText};
use crate::model::{GptModel, TokenBatch};
use crate::numerics::{adam_step, clip_grad_norm, AdamState, Graph};
use crate::tasks::PromptTemplate;
use crate::vocab::{Vocabulary, PAD, SEP};
use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub warmup_proportion: f64,
    pub max_seq_length: usize,
    pub seed: u64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    /// Pretraining defaults: lr 5e-5, 3 epochs, batch 8, no warmup.
    pub fn pretraining() -> Self {
        TrainConfig {
            learning_rate: 5e-5,
            epochs: 3,
            batch_size: 8,
            warmup_proportion: 0.0,
            max_seq_length: 256,
            seed: 42,
            grad_clip: None,
        }
    }

    /// Fine-tuning defaults: lr 1e-5, 5 epochs, batch 8, 10% warmup,
    /// sequences up to 1024 tokens.
    pub fn finetuning() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            epochs: 5,
            batch_size: 8,
            warmup_proportion: 0.1,
            max_seq_length: 1024,
            seed: 42,
            grad_clip: None,
        }
    }

    pub fn validate(&self, context_len: usize) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Param(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.epochs == 0 {
            return Err(Error::Param("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.warmup_proportion) {
            return Err(Error::Param(format!(
                "warmup_proportion must lie in [0, 1), got {}",
                self.warmup_proportion
            )));
        }
        if self.max_seq_length < 2 || self.max_seq_length > context_len {
            return Err(Error::Param(format!(
                "max_seq_length {} must lie in [2, {context_len}]",
                self.max_seq_length
            )));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Param(format!("grad_clip must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub loss_history: Vec<f64>,
    pub epoch_mean_loss: Vec<f64>,
    pub final_validation_ppl: Option<f64>,
    pub wall_clock_seconds: f64,
    pub steps: usize,
    pub dropped_examples: usize,
}

/// Linear warmup over `ceil(warmup_proportion * total_steps)` steps, then
/// linear decay to zero at `total_steps`.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let total = total_steps.max(1);
    if step >= total {
        return 0.0;
    }
    let warmup = ((cfg.warmup_proportion * total as f64).ceil() as usize).min(total - 1);
    if step < warmup {
        cfg.learning_rate * step as f64 / warmup as f64
    } else {
        cfg.learning_rate * (total - step) as f64 / (total - warmup) as f64
    }
}

/// A token sequence and, for each position but the last, whether the
/// prediction of the following token contributes to the loss.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Example {
    pub ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl Example {
    /// Loss on every prediction whose target index is `>= first_target`.
    fn with_targets_from(ids: Vec<usize>, first_target: usize) -> Self {
        let loss_mask = (1..ids.len()).map(|t| t >= first_target).collect();
        Example { ids, loss_mask }
    }

    pub fn scored_tokens(&self) -> usize {
        self.loss_mask.iter().filter(|&&m| m).count()
    }
}

/// Concatenates `BOS text EOS` for every text and cuts the stream into
/// windows of `window` tokens overlapping by one, so each token after the
/// first is predicted exactly once.
pub fn pack_pretraining<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary, window: usize) -> Result<Vec<Example>> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if window < 2 {
        return Err(Error::Param("pretraining windows need at least 2 tokens".into()));
    }
    let stream: Vec<usize> = texts
        .iter()
        .flat_map(|t| vocab.encode(t.as_ref(), true, true).ids)
        .collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + window).min(stream.len());
        out.push(Example::with_targets_from(stream[start..end].to_vec(), 1));
        start = end - 1;
    }
    Ok(out)
}

/// `BOS text EOS` per sentence with every prediction scored.
pub fn sentence_examples<S: AsRef<str>>(texts: &[S], vocab: &Vocabulary) -> Vec<Example> {
    texts
        .iter()
        .map(|t| Example::with_targets_from(vocab.encode(t.as_ref(), true, true).ids, 1))
        .collect()
}

/// `BOS ancient SEP modern EOS`, loss on the modern tokens and EOS.
pub fn translation_example(vocab: &Vocabulary, pair: &AlignedPair) -> Example {
    let mut ids = vocab.encode(&pair.ancient, true, false).ids;
    ids.push(SEP);
    let first_target = ids.len();
    ids.extend(vocab.encode(&pair.modern, false, true).ids);
    Example::with_targets_from(ids, first_target)
}

/// `BOS text SEP prefix label EOS`, loss on the label tokens and EOS.
pub fn classification_example(vocab: &Vocabulary, example: &LabeledText, template: &PromptTemplate) -> Example {
    let mut ids = template.prompt_ids(vocab, &example.text);
    let first_target = ids.len();
    ids.extend(vocab.encode(&example.label, false, true).ids);
    Example::with_targets_from(ids, first_target)
}

/// Builds the padded batch, shifted targets and loss mask for `examples`.
pub fn collate(examples: &[&Example]) -> Result<(TokenBatch, Vec<usize>, Vec<bool>)> {
    let inputs: Vec<&[usize]> = examples.iter().map(|e| &e.ids[..e.ids.len() - 1]).collect();
    let batch = TokenBatch::from_rows(&inputs, None)?;
    let mut targets = vec![PAD; batch.batch * batch.seq];
    let mut mask = vec![false; batch.batch * batch.seq];
    for (r, e) in examples.iter().enumerate() {
        let base = r * batch.seq;
        targets[base..base + e.ids.len() - 1].copy_from_slice(&e.ids[1..]);
        mask[base..base + e.loss_mask.len()].copy_from_slice(&e.loss_mask);
    }
    Ok((batch, targets, mask))
}

/// Token-weighted mean masked NLL of `examples` under `model`.
pub fn masked_nll<S: Scalar>(model: &GptModel<S>, examples: &[Example], batch_size: usize) -> Result<(f64, usize)> {
    let mut nll = 0.0;
    let mut tokens = 0;
    for chunk in examples.chunks(batch_size.max(1)) {
        let refs: Vec<&Example> = chunk.iter().filter(|e| e.scored_tokens() > 0).collect();
        if refs.is_empty() {
            continue;
        }
        let (batch, targets, mask) = collate(&refs)?;
        let mut graph = Graph::new();
        let logits = model.forward_graph(&mut graph, &batch)?;
        let loss = graph.cross_entropy(logits, &targets, &mask)?;
        let count = mask.iter().filter(|&&m| m).count();
        nll += graph.value(loss)[0].f64() * count as f64;
        tokens += count;
    }
    if tokens == 0 {
        return Err(Error::EmptyCorpus);
    }
    Ok((nll / tokens as f64, tokens))
}

pub type CheckpointFn<'a, S> = dyn FnMut(usize, &GptModel<S>) -> Result<()> + 'a;

/// Optional extras for a training run.
pub struct TrainOptions<'a, S> {
    /// Held-out examples scored after the last step.
    pub validation: Option<&'a [Example]>,
    /// Called every `checkpoint_every` steps and after the final step.
    pub checkpoint_every: Option<usize>,
    pub on_checkpoint: Option<&'a mut CheckpointFn<'a, S>>,
    /// Called after every step with the step index and loss.
    pub on_step: Option<&'a mut dyn FnMut(usize, f64)>,
}

impl<S> Default for TrainOptions<'_, S> {
    fn default() -> Self {
        TrainOptions {
            validation: None,
            checkpoint_every: None,
            on_checkpoint: None,
            on_step: None,
        }
    }
}

/// Shared optimization loop: shuffled mini-batches, masked cross-entropy,
/// optional clipping, Adam under the warmup/decay schedule.
pub fn train_examples<S: Scalar>(
    model: &mut GptModel<S>,
    examples: &[Example],
    cfg: &TrainConfig,
    mut options: TrainOptions<'_, S>,
) -> Result<TrainReport> {
    cfg.validate(model.config().context_len)?;
    let usable: Vec<&Example> = examples.iter().filter(|e| e.scored_tokens() > 0).collect();
    if usable.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let started = Instant::now();
    let per_epoch = usable.len().div_ceil(cfg.batch_size);
    let total = per_epoch * cfg.epochs;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = AdamState::new(model.params());
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut history = Vec::with_capacity(total);
    let mut epoch_means = Vec::with_capacity(cfg.epochs);
    let mut step = 0;

    model.zero_grad();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&Example> = chunk.iter().map(|&i| usable[i]).collect();
            let (batch, targets, mask) = collate(&refs)?;
            let mut graph = Graph::new();
            let logits = model.forward_graph(&mut graph, &batch)?;
            let loss_var = graph.cross_entropy(logits, &targets, &mask).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step },
                other => other,
            })?;
            let loss = graph.value(loss_var)[0].f64();
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { step });
            }
            let grads = graph.backward(loss_var)?;
            drop(graph);
            grads.accumulate_into(model.params_mut())?;
            drop(grads);
            if let Some(c) = cfg.grad_clip {
                clip_grad_norm(model.params_mut(), c);
            }
            adam_step(model.params_mut(), &mut state, lr_at(step, total, cfg)).map_err(|e| match e {
                Error::NonFinite(_) => Error::NonFiniteLoss { step },
                other => other,
            })?;
            model.zero_grad();

            history.push(loss);
            epoch_loss += loss;
            if let Some(f) = options.on_step.as_mut() {
                f(step, loss);
            }
            step += 1;
            if let (Some(every), Some(f)) = (options.checkpoint_every, options.on_checkpoint.as_mut()) {
                if every > 0 && step % every == 0 && step < total {
                    f(step, model)?;
                }
            }
        }
        epoch_means.push(epoch_loss / per_epoch as f64);
    }
    if let Some(f) = options.on_checkpoint.as_mut() {
        f(step, model)?;
    }
    let final_validation_ppl = match options.validation {
        Some(v) if !v.is_empty() => Some(masked_nll(model, v, cfg.batch_size)?.0.exp()),
        _ => None,
    };
    Ok(TrainReport {
        loss_history: history,
        epoch_mean_loss: epoch_means,
        final_validation_ppl,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
        steps: step,
        dropped_examples: 0,
    })
}

pub fn pretrain_clm<S: Scalar, T: AsRef<str>>(
    model: &mut GptModel<S>,
    texts: &[T],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    options: TrainOptions<'_, S>,
) -> Result<TrainReport> {
    cfg.validate(model.config().context_len)?;
    let examples = pack_pretraining(texts, vocab, cfg.max_seq_length)?;
    train_examples(model, &examples, cfg, options)
}

fn drop_over_length(examples: Vec<Example>, max_len: usize) -> (Vec<Example>, usize) {
    let before = examples.len();
    let kept: Vec<Example> = examples.into_iter().filter(|e| e.ids.len() <= max_len).collect();
    let dropped = before - kept.len();
    (kept, dropped)
}

pub fn finetune_translation<S: Scalar>(
    model: &mut GptModel<S>,
    pairs: &[AlignedPair],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    options: TrainOptions<'_, S>,
) -> Result<TrainReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    cfg.validate(model.config().context_len)?;
    let examples = pairs.iter().map(|p| translation_example(vocab, p)).collect();
    let (kept, dropped) = drop_over_length(examples, cfg.max_seq_length);
    if kept.is_empty() {
        return Err(Error::Param(format!(
            "all {dropped} pairs exceed max_seq_length {}",
            cfg.max_seq_length
        )));
    }
    let mut report = train_examples(model, &kept, cfg, options)?;
    report.dropped_examples = dropped;
    Ok(report)
}

pub fn finetune_classification<S: Scalar>(
    model: &mut GptModel<S>,
    examples: &[LabeledText],
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    template: &PromptTemplate,
    labels: &[String],
    options: TrainOptions<'_, S>,
) -> Result<TrainReport> {
    if examples.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if let Some(bad) = examples.iter().find(|e| !labels.contains(&e.label)) {
        return Err(Error::UnknownLabel(bad.label.clone()));
    }
    cfg.validate(model.config().context_len)?;
    let built = examples
        .iter()
        .map(|e| classification_example(vocab, e, template))
        .collect();
    let (kept, dropped) = drop_over_length(built, cfg.max_seq_length);
    if kept.is_empty() {
        return Err(Error::Param(format!(
            "all {dropped} examples exceed max_seq_length {}",
            cfg.max_seq_length
        )));
    }
    let mut report = train_examples(model, &kept, cfg, options)?;
    report.dropped_examples = dropped;
    Ok(report)
}
