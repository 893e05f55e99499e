mod common;

use gujin::corpus::LabeledText;
use gujin::model::ModelConfig;
use gujin::tasks::PromptTemplate;
use gujin::training::{
    collate, finetune_classification, finetune_translation, lr_at, pretrain_clm, translation_example, TrainConfig,
    TrainOptions,
};
use gujin::vocab::{Vocabulary, EOS, SEP};
use gujin::{Error, Gpt};

fn small(vocab: usize) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        n_heads: 2,
        d_model: 32,
        d_ff: 64,
        context_len: 48,
        vocab_size: vocab,
        tie_embeddings: true,
    }
}

fn pair_vocab() -> Vocabulary {
    let pairs = common::toy_pairs();
    let texts: Vec<&str> = pairs.iter().flat_map(|p| [p.ancient.as_str(), p.modern.as_str()]).collect();
    Vocabulary::build_from_corpus(&texts)
}

#[test]
fn translation_loss_covers_only_target_and_eos() {
    let vocab = pair_vocab();
    let pair = &common::toy_pairs()[0];
    let ex = translation_example(&vocab, pair);
    let (_, targets, mask) = collate(&[&ex]).unwrap();
    let scored: Vec<usize> = targets.iter().zip(&mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
    let mut want = vocab.encode(&pair.modern, false, true).ids;
    assert_eq!(scored, want);
    want.pop();
    assert_eq!(vocab.decode(&want).unwrap(), pair.modern);
    let sep = ex.ids.iter().position(|&t| t == SEP).unwrap();
    assert!(mask[..sep].iter().all(|&m| !m));
    assert_eq!(*ex.ids.last().unwrap(), EOS);
}

/// Changing the source changes nothing about which tokens are scored, and a
/// source-only edit leaves the scored targets intact.
#[test]
fn source_tokens_never_scored() {
    let vocab = pair_vocab();
    let mut pair = common::toy_pairs()[1].clone();
    let a = translation_example(&vocab, &pair);
    pair.ancient = "學".repeat(9);
    let b = translation_example(&vocab, &pair);
    assert_eq!(a.scored_tokens(), b.scored_tokens());
    let tail = |e: &gujin::training::Example| {
        e.ids[1..]
            .iter()
            .zip(&e.loss_mask)
            .filter(|(_, &m)| m)
            .map(|(&t, _)| t)
            .collect::<Vec<_>>()
    };
    assert_eq!(tail(&a), tail(&b));
}

#[test]
fn smoothed_loss_does_not_increase() {
    let texts = vec!["天地玄黃宇宙洪荒"; 8];
    let vocab = Vocabulary::build_from_corpus(&texts);
    let mut m = Gpt::init(small(vocab.len()), 4).unwrap();
    let cfg = TrainConfig {
        learning_rate: 2e-3,
        epochs: 100,
        batch_size: 2,
        warmup_proportion: 0.0,
        max_seq_length: 12,
        seed: 4,
        grad_clip: None,
    };
    let report = pretrain_clm(&mut m, &texts, &vocab, &cfg, TrainOptions::default()).unwrap();
    assert!(report.steps >= 400, "{} steps", report.steps);
    let means: Vec<f64> = report
        .loss_history
        .chunks_exact(100)
        .map(|w| w.iter().sum::<f64>() / 100.0)
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + 1e-3, "{means:?}");
    }
    assert!(means.last().unwrap() < &(means[0] / 4.0));
}

#[test]
fn schedule_starts_at_zero_and_peaks_after_warmup() {
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        warmup_proportion: 0.1,
        ..TrainConfig::finetuning()
    };
    assert_eq!(lr_at(0, 100, &cfg), 0.0);
    assert_eq!(lr_at(10, 100, &cfg), 1e-3);
    assert!(lr_at(55, 100, &cfg) < 1e-3);
    assert_eq!(lr_at(100, 100, &cfg), 0.0);
}

#[test]
fn over_length_examples_are_dropped_and_counted() {
    let vocab = pair_vocab();
    let mut pairs = common::toy_pairs();
    pairs.truncate(3);
    let mut m = Gpt::init(small(vocab.len()), 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 1,
        batch_size: 2,
        warmup_proportion: 0.0,
        max_seq_length: 20,
        seed: 0,
        grad_clip: None,
    };
    // Pair lengths: BOS + ancient + SEP + modern + EOS.
    let long = pairs
        .iter()
        .filter(|p| p.ancient.chars().count() + p.modern.chars().count() + 3 > 20)
        .count();
    let report = finetune_translation(&mut m, &pairs, &vocab, &cfg, TrainOptions::default()).unwrap();
    assert_eq!(report.dropped_examples, long);
    assert!(long > 0 && long < 3);
}

#[test]
fn unknown_training_label_rejected() {
    let vocab = Vocabulary::build_from_corpus(&["天地儒家道家这个句子的类别是"]);
    let mut m = Gpt::init(small(vocab.len()), 0).unwrap();
    let labels = vec!["儒家".to_string()];
    let data = vec![LabeledText::new("天地", "道家").unwrap()];
    let err = finetune_classification(
        &mut m,
        &data,
        &vocab,
        &TrainConfig {
            max_seq_length: 32,
            ..TrainConfig::finetuning()
        },
        &PromptTemplate::default(),
        &labels,
        TrainOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, Error::UnknownLabel(_)));
}

#[test]
fn checkpoint_callback_fires_on_schedule() {
    let texts = vec!["天地玄黃"; 8];
    let vocab = Vocabulary::build_from_corpus(&texts);
    let mut m = Gpt::init(small(vocab.len()), 0).unwrap();
    let cfg = TrainConfig {
        learning_rate: 1e-3,
        epochs: 3,
        batch_size: 2,
        warmup_proportion: 0.0,
        max_seq_length: 6,
        seed: 0,
        grad_clip: None,
    };
    let mut seen = Vec::new();
    let mut cb = |step: usize, _: &Gpt| {
        seen.push(step);
        Ok(())
    };
    let report = pretrain_clm(
        &mut m,
        &texts,
        &vocab,
        &cfg,
        TrainOptions {
            checkpoint_every: Some(5),
            on_checkpoint: Some(&mut cb),
            ..TrainOptions::default()
        },
    )
    .unwrap();
    let mut want: Vec<usize> = (5..report.steps).step_by(5).collect();
    want.push(report.steps);
    assert_eq!(seen, want);
}
