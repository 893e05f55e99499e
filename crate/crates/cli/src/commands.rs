use std::fs;
use std::path::Path;

use gujin::corpus::{self, load_aligned, load_labeled, load_lines, AlignedPair, SplitSpec};
use gujin::eval::{bleu_corpus_with, classification_report, perplexity, BleuOptions};
use gujin::model::{load_checkpoint, save_checkpoint};
use gujin::tasks::{self, DecodeConfig, LabelScoring, PromptTemplate, Strategy, ZI_CATEGORIES};
use gujin::training::{
    self, classification_example, pack_pretraining, translation_example, Example, TrainConfig, TrainOptions,
    TrainReport,
};
use gujin::vocab::Vocabulary;
use gujin::Gpt;
use serde::Serialize;
use serde_json::json;

use crate::config::{self, ClassifyConfig, ModelSection, PretrainConfig, TrainSection, TranslateConfig};
use crate::{note, DecodeArgs, Failure, Format, InputArgs, ModelArgs, Scoring};

type Outcome = Result<(), Failure>;

const PROGRESS_EVERY: usize = 50;

fn data_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| data_err(path, e))
}

/// Writes `lines` (each already serialized) to `out` or stdout.
fn emit_lines(lines: &[String], out: Option<&Path>) -> Outcome {
    let mut text = lines.join("\n");
    text.push('\n');
    match out {
        Some(p) => write_text(p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("reports serialize")
}

fn emit<T: Serialize>(value: &T, out: Option<&Path>) -> Outcome {
    emit_lines(&[to_json(value)], out)
}

fn read_texts(path: &Path, format: Format) -> Result<Vec<String>, Failure> {
    let pairs = |f: fn(AlignedPair) -> Vec<String>| -> Result<Vec<String>, Failure> {
        Ok(load_aligned(path)?.into_iter().flat_map(f).collect())
    };
    match format {
        Format::Text => Ok(load_lines(path)?),
        Format::Aligned => pairs(|p| vec![p.ancient, p.modern]),
        Format::Ancient => pairs(|p| vec![p.ancient]),
        Format::Modern => pairs(|p| vec![p.modern]),
        Format::Labeled => Ok(load_labeled(path)?.into_iter().map(|e| e.text).collect()),
    }
}

/// Every line, blank ones included.
fn raw_lines(path: &Path) -> Result<Vec<String>, Failure> {
    let text = fs::read_to_string(path).map_err(|e| data_err(path, e))?;
    Ok(text.lines().map(|l| l.trim().to_string()).collect())
}

pub fn build_vocab(
    inputs: &[std::path::PathBuf],
    format: Format,
    base: Option<&Path>,
    extra: &[String],
    output: &Path,
    out: Option<&Path>,
) -> Outcome {
    let base = match base {
        Some(p) => Vocabulary::load(p)?,
        None => Vocabulary::specials_only(),
    };
    let mut texts = Vec::new();
    for path in inputs {
        if format == Format::Labeled {
            for e in load_labeled(path)? {
                texts.push(e.text);
                texts.push(e.label);
            }
        } else {
            texts.extend(read_texts(path, format)?);
        }
    }
    texts.extend(extra.iter().cloned());
    let (vocab, added) = base.extend_with_corpus(&texts);
    vocab.save(output)?;
    note(format!("{added} characters added, {} tokens total", vocab.len()));
    emit(
        &json!({ "size": vocab.len(), "added": added, "digest": vocab.digest() }),
        out,
    )
}

pub fn filter_pairs(input: &Path, output: &Path, low: f64, high: f64, out: Option<&Path>) -> Outcome {
    let pairs = load_aligned(input)?;
    let kept = corpus::filter_pairs(&pairs, low, high)?;
    corpus::write_aligned(output, &kept)?;
    let dropped = pairs.len() - kept.len();
    note(format!("kept {} of {} pairs", kept.len(), pairs.len()));
    emit(&json!({ "kept": kept.len(), "dropped": dropped }), out)
}

pub fn corpus_stats(input: &Path, format: Format, out: Option<&Path>) -> Outcome {
    let texts = read_texts(input, format)?;
    emit(&corpus::corpus_stats(&texts)?, out)
}

pub fn split(input: &Path, fraction: f64, seed: u64, train: &Path, held: &Path, out: Option<&Path>) -> Outcome {
    let lines = load_lines(input)?;
    let (a, b) = corpus::split(&lines, SplitSpec::new(fraction, seed)?)?;
    for (path, part) in [(train, &a), (held, &b)] {
        let mut text = part.join("\n");
        if !part.is_empty() {
            text.push('\n');
        }
        write_text(path, &text)?;
    }
    emit(&json!({ "train": a.len(), "held": b.len() }), out)
}

/// Loads `init` when given, growing its embedding if `vocab` extends the
/// checkpoint's vocabulary; otherwise builds a fresh model.
fn prepare_model(init: Option<&Path>, section: &ModelSection, vocab: &Vocabulary, seed: u64) -> Result<Gpt, Failure> {
    let Some(path) = init else {
        return Ok(Gpt::init(section.resolve(vocab.len()), seed)?);
    };
    let ckpt = load_checkpoint(path)?;
    if ckpt.vocab_digest == vocab.digest() {
        return Ok(ckpt.model);
    }
    let rows = ckpt.config().vocab_size;
    if vocab.len() <= rows {
        return Err(Failure::Data(format!(
            "{}: vocabulary does not match the checkpoint and does not extend it",
            path.display()
        )));
    }
    note(format!("extending embedding from {rows} to {} rows", vocab.len()));
    let mut model = ckpt.model;
    model.resize_vocab(vocab.len(), seed)?;
    Ok(model)
}

fn load_model(args: &ModelArgs) -> Result<(Gpt, Vocabulary), Failure> {
    let vocab = Vocabulary::load(&args.vocab)?;
    let ckpt = load_checkpoint(&args.model)?;
    ckpt.check_vocab(&vocab)?;
    Ok((ckpt.model, vocab))
}

fn resolve_train(section: &TrainSection, preset: TrainConfig, model: &Gpt) -> TrainConfig {
    let context = model.config().context_len;
    let (cfg, clamped) = section.resolve(preset, context);
    if clamped {
        note(format!(
            "max_seq_length not set; using the model context {context} instead of {}",
            preset.max_seq_length
        ));
    }
    cfg
}

fn prepare_output(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))
}

/// Runs training with progress logging and periodic checkpoints, then
/// writes `model.gjlm` and `report.json` into `dir`.
fn run_training(
    dir: &Path,
    model: &mut Gpt,
    vocab: &Vocabulary,
    cfg: &TrainConfig,
    checkpoint_every: Option<usize>,
    validation: Option<&[Example]>,
    train: impl FnOnce(&mut Gpt, TrainOptions<'_, f32>) -> gujin::Result<TrainReport>,
) -> Result<TrainReport, Failure> {
    let digest = vocab.digest();
    let mut save = |step: usize, m: &Gpt| save_checkpoint(m, &digest, dir.join(format!("checkpoint-{step}.gjlm")));
    let mut progress = |step: usize, loss: f64| {
        if (step + 1).is_multiple_of(PROGRESS_EVERY) {
            note(format!("step {} loss {loss:.4}", step + 1));
        }
    };
    let options = TrainOptions {
        validation,
        checkpoint_every,
        on_checkpoint: if checkpoint_every.is_some() { Some(&mut save) } else { None },
        on_step: Some(&mut progress),
    };
    note(format!(
        "training {} parameters, lr {}, {} epochs, batch {}",
        model.count_parameters(),
        cfg.learning_rate,
        cfg.epochs,
        cfg.batch_size
    ));
    let report = train(model, options)?;
    if report.dropped_examples > 0 {
        note(format!(
            "dropped {} examples longer than max_seq_length {}",
            report.dropped_examples, cfg.max_seq_length
        ));
    }
    save_checkpoint(model, &vocab.digest(), dir.join("model.gjlm"))?;
    write_text(&dir.join("report.json"), &format!("{}\n", to_json(&report)))?;
    note(format!("{} steps in {:.1}s", report.steps, report.wall_clock_seconds));
    Ok(report)
}

pub fn pretrain(path: &Path, out: Option<&Path>) -> Outcome {
    let cfg: PretrainConfig = config::load(path)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let texts = load_lines(&cfg.corpus)?;
    let seed = cfg.train.seed.unwrap_or(TrainConfig::pretraining().seed);
    let mut model = prepare_model(cfg.init_checkpoint.as_deref(), &cfg.model, &vocab, seed)?;
    let train = resolve_train(&cfg.train, TrainConfig::pretraining(), &model);
    train.validate(model.config().context_len)?;
    prepare_output(&cfg.output_dir)?;
    let effective = PretrainConfig {
        model: ModelSection::echo(model.config()),
        train: TrainSection::echo(&train, cfg.train.checkpoint_every),
        ..cfg.clone()
    };
    config::echo(&effective, &cfg.output_dir)?;
    let validation = match &cfg.validation {
        Some(p) => Some(pack_pretraining(&load_lines(p)?, &vocab, train.max_seq_length)?),
        None => None,
    };
    let report = run_training(
        &cfg.output_dir,
        &mut model,
        &vocab,
        &train,
        cfg.train.checkpoint_every,
        validation.as_deref(),
        |m, o| training::pretrain_clm(m, &texts, &vocab, &train, o),
    )?;
    emit(&report, out)
}

fn fitting(examples: Vec<Example>, max_len: usize) -> Vec<Example> {
    examples.into_iter().filter(|e| e.ids.len() <= max_len).collect()
}

pub fn finetune_translate(path: &Path, out: Option<&Path>) -> Outcome {
    let cfg: TranslateConfig = config::load(path)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let pairs = load_aligned(&cfg.pairs)?;
    let seed = cfg.train.seed.unwrap_or(TrainConfig::finetuning().seed);
    let mut model = prepare_model(cfg.init_checkpoint.as_deref(), &cfg.model, &vocab, seed)?;
    let train = resolve_train(&cfg.train, TrainConfig::finetuning(), &model);
    train.validate(model.config().context_len)?;
    let decode = DecodeConfig {
        max_gen_length: cfg.decode.max_gen_length.unwrap_or(DecodeConfig::default().max_gen_length),
        ..DecodeConfig::default()
    };
    decode.validate()?;
    prepare_output(&cfg.output_dir)?;
    let mut effective = TranslateConfig {
        model: ModelSection::echo(model.config()),
        train: TrainSection::echo(&train, cfg.train.checkpoint_every),
        ..cfg.clone()
    };
    effective.decode.max_gen_length = Some(decode.max_gen_length);
    config::echo(&effective, &cfg.output_dir)?;
    let held = match &cfg.validation {
        Some(p) => load_aligned(p)?,
        None => Vec::new(),
    };
    let validation = fitting(
        held.iter().map(|p| translation_example(&vocab, p)).collect(),
        train.max_seq_length,
    );
    let report = run_training(
        &cfg.output_dir,
        &mut model,
        &vocab,
        &train,
        cfg.train.checkpoint_every,
        (!held.is_empty()).then_some(&validation[..]),
        |m, o| training::finetune_translation(m, &pairs, &vocab, &train, o),
    )?;
    if !held.is_empty() {
        let mut candidates = Vec::with_capacity(held.len());
        for p in &held {
            candidates.push(tasks::translate(&model, &vocab, &p.ancient, &decode)?);
        }
        let references: Vec<&str> = held.iter().map(|p| p.modern.as_str()).collect();
        let bleu = bleu_corpus_with(&candidates, &references, BleuOptions::default())?;
        note(format!("validation BLEU-4 {:.4}", bleu.bleu[&4]));
        write_text(&cfg.output_dir.join("validation_bleu.json"), &format!("{}\n", to_json(&bleu)))?;
    }
    emit(&report, out)
}

fn uncovered(vocab: &Vocabulary, texts: &[&str]) -> String {
    let mut missing: Vec<char> = texts
        .iter()
        .flat_map(|t| t.chars())
        .filter(|&c| vocab.id(c).is_none())
        .collect();
    missing.sort_unstable();
    missing.dedup();
    missing.into_iter().collect()
}

pub fn finetune_classify(path: &Path, out: Option<&Path>) -> Outcome {
    let cfg: ClassifyConfig = config::load(path)?;
    let vocab = Vocabulary::load(&cfg.vocab)?;
    let examples = load_labeled(&cfg.examples)?;
    let labels: Vec<String> = if cfg.labels.is_empty() {
        ZI_CATEGORIES.iter().map(|s| s.to_string()).collect()
    } else {
        cfg.labels.clone()
    };
    let template = cfg
        .template
        .as_deref()
        .map(PromptTemplate::from_pattern)
        .unwrap_or_default();
    let mut needed: Vec<&str> = labels.iter().map(String::as_str).collect();
    needed.push(&template.prefix);
    let missing = uncovered(&vocab, &needed);
    if !missing.is_empty() {
        return Err(Failure::Usage(format!(
            "vocabulary lacks label or template characters {missing:?}; add them with build-vocab --extra"
        )));
    }
    let scoring = cfg.scoring.unwrap_or_default();
    let seed = cfg.train.seed.unwrap_or(TrainConfig::finetuning().seed);
    let mut model = prepare_model(cfg.init_checkpoint.as_deref(), &cfg.model, &vocab, seed)?;
    let train = resolve_train(&cfg.train, TrainConfig::finetuning(), &model);
    train.validate(model.config().context_len)?;
    prepare_output(&cfg.output_dir)?;
    let effective = ClassifyConfig {
        labels: labels.clone(),
        template: Some(template.prefix.clone()),
        scoring: Some(scoring),
        model: ModelSection::echo(model.config()),
        train: TrainSection::echo(&train, cfg.train.checkpoint_every),
        ..cfg.clone()
    };
    config::echo(&effective, &cfg.output_dir)?;
    let held = match &cfg.validation {
        Some(p) => load_labeled(p)?,
        None => Vec::new(),
    };
    let validation = fitting(
        held.iter()
            .filter(|e| labels.contains(&e.label))
            .map(|e| classification_example(&vocab, e, &template))
            .collect(),
        train.max_seq_length,
    );
    let report = run_training(
        &cfg.output_dir,
        &mut model,
        &vocab,
        &train,
        cfg.train.checkpoint_every,
        (!held.is_empty()).then_some(&validation[..]),
        |m, o| training::finetune_classification(m, &examples, &vocab, &train, &template, &labels, o),
    )?;
    if !held.is_empty() {
        let mut predictions = Vec::with_capacity(held.len());
        for e in &held {
            predictions.push(tasks::classify_with(&model, &vocab, &e.text, &labels, &template, scoring)?.0);
        }
        let truths: Vec<&str> = held.iter().map(|e| e.label.as_str()).collect();
        let cls = classification_report(&truths, &predictions, &labels)?;
        note(format!("validation accuracy {:.4}", cls.accuracy));
        write_text(&cfg.output_dir.join("validation_report.json"), &format!("{}\n", to_json(&cls)))?;
    }
    emit(&report, out)
}

fn inputs(args: &InputArgs) -> Result<Vec<String>, Failure> {
    let texts = match &args.input {
        Some(p) if !args.texts.is_empty() => {
            return Err(Failure::Usage(format!("give either --input {} or texts, not both", p.display())))
        }
        Some(p) => read_texts(p, args.format)?,
        None => args.texts.clone(),
    };
    if texts.is_empty() {
        return Err(Failure::Usage("no input texts".into()));
    }
    Ok(texts)
}

pub fn translate(model: &ModelArgs, input: &InputArgs, decode: &DecodeArgs, plain: bool, out: Option<&Path>) -> Outcome {
    let (model, vocab) = load_model(model)?;
    let strategy = match (decode.top_k, decode.temperature) {
        (Some(k), _) => Strategy::TopK(k),
        (None, Some(t)) => Strategy::Temperature(t),
        (None, None) => Strategy::Greedy,
    };
    let cfg = DecodeConfig {
        max_gen_length: decode.max_gen_length,
        strategy,
        seed: decode.seed,
    };
    cfg.validate()?;
    let mut lines = Vec::new();
    for text in inputs(input)? {
        let translation = tasks::translate(&model, &vocab, &text, &cfg)?;
        lines.push(if plain {
            translation
        } else {
            to_json(&json!({ "source": text, "translation": translation }))
        });
    }
    emit_lines(&lines, out)
}

pub fn classify(
    model: &ModelArgs,
    input: &InputArgs,
    labels: &Path,
    template: Option<&str>,
    scoring: Scoring,
    out: Option<&Path>,
) -> Outcome {
    let (model, vocab) = load_model(model)?;
    let labels = load_lines(labels)?;
    let template = template.map(PromptTemplate::from_pattern).unwrap_or_default();
    let scoring = match scoring {
        Scoring::Mean => LabelScoring::Mean,
        Scoring::Sum => LabelScoring::Sum,
    };
    let mut lines = Vec::new();
    for text in inputs(input)? {
        let (label, scores) = tasks::classify_with(&model, &vocab, &text, &labels, &template, scoring)?;
        lines.push(to_json(&json!({ "text": text, "label": label, "scores": scores })));
    }
    emit_lines(&lines, out)
}

pub fn eval_ppl(model: &ModelArgs, input: &Path, format: Format, out: Option<&Path>) -> Outcome {
    let (model, vocab) = load_model(model)?;
    let texts = read_texts(input, format)?;
    emit(&perplexity(&model, &vocab, &texts)?, out)
}

pub fn eval_bleu(candidates: &Path, references: &Path, max_n: usize, smooth: bool, out: Option<&Path>) -> Outcome {
    let cands = raw_lines(candidates)?;
    let refs = raw_lines(references)?;
    if cands.len() != refs.len() {
        return Err(Failure::Data(format!(
            "{} candidates but {} references",
            cands.len(),
            refs.len()
        )));
    }
    let report = bleu_corpus_with(&cands, &refs, BleuOptions { max_n, smoothing: smooth })?;
    emit(&report, out)
}

pub fn eval_cls(truths: &Path, predictions: &Path, labels: Option<&Path>, out: Option<&Path>) -> Outcome {
    let truths = load_lines(truths)?;
    let preds = load_lines(predictions)?;
    if truths.len() != preds.len() {
        return Err(Failure::Data(format!(
            "{} truths but {} predictions",
            truths.len(),
            preds.len()
        )));
    }
    let labels = match labels {
        Some(p) => load_lines(p)?,
        None => {
            let mut seen: Vec<String> = Vec::new();
            for t in &truths {
                if !seen.contains(t) {
                    seen.push(t.clone());
                }
            }
            seen
        }
    };
    emit(&classification_report(&truths, &preds, &labels)?, out)
}
