//! Perplexity, corpus BLEU over characters, and per-class plus
//! support-weighted precision/recall/F1.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::model::CausalLm;
use crate::numerics::log_sum_exp;
use crate::vocab::Vocabulary;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerplexityReport {
    pub token_count: usize,
    pub nll_sum: f64,
    pub ppl: f64,
}

impl PerplexityReport {
    pub fn mean_nll(&self) -> f64 {
        self.nll_sum / self.token_count as f64
    }
}

/// Negative log-likelihood of `ids[1..]` given the preceding tokens.
///
/// Sequences longer than the context are cut into consecutive,
/// non-overlapping input windows of `context_len` tokens; the first token
/// of each later window is predicted from that window alone.
pub fn sequence_nll<M: CausalLm + ?Sized>(model: &M, ids: &[usize]) -> Result<(f64, usize)> {
    let ctx = model.context_len();
    let v = model.vocab_size();
    let mut nll = 0.0;
    let mut count = 0;
    let mut start = 0;
    while start + 1 < ids.len() {
        let end = (start + ctx).min(ids.len() - 1);
        let logits = model.logits(&ids[start..end])?;
        for (i, (row, &target)) in logits.chunks_exact(v).zip(&ids[start + 1..=end]).enumerate() {
            if target >= v {
                return Err(Error::TokenOutOfRange {
                    id: target,
                    position: start + 1 + i,
                    size: v,
                });
            }
            let (max, lse) = log_sum_exp(row);
            let lp = row[target] - max - lse;
            if !lp.is_finite() {
                return Err(Error::NonFinite(format!("log-probability of token {target}")));
            }
            nll -= lp;
            count += 1;
        }
        start = end;
    }
    Ok((nll, count))
}

/// Corpus perplexity with each text scored as `BOS text EOS`; every token
/// after BOS counts, EOS included.
pub fn perplexity<M: CausalLm + ?Sized, T: AsRef<str>>(
    model: &M,
    vocab: &Vocabulary,
    texts: &[T],
) -> Result<PerplexityReport> {
    if texts.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut nll_sum = 0.0;
    let mut token_count = 0;
    for text in texts {
        let ids = vocab.encode(text.as_ref(), true, true).ids;
        let (nll, n) = sequence_nll(model, &ids)?;
        nll_sum += nll;
        token_count += n;
    }
    Ok(PerplexityReport {
        token_count,
        nll_sum,
        ppl: (nll_sum / token_count as f64).exp(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    pub max_n: usize,
    /// Clipped n-gram matches, index `n - 1`.
    pub matches: Vec<u64>,
    /// Candidate n-gram totals, index `n - 1`.
    pub totals: Vec<u64>,
    pub precisions: Vec<f64>,
    pub candidate_length: u64,
    pub reference_length: u64,
    pub brevity_penalty: f64,
    pub bleu: BTreeMap<usize, f64>,
    pub smoothed: bool,
}

impl BleuReport {
    pub fn score(&self, n: usize) -> Option<f64> {
        self.bleu.get(&n).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BleuOptions {
    pub max_n: usize,
    /// Add one to matches and totals for orders 2 and above.
    pub smoothing: bool,
}

impl Default for BleuOptions {
    fn default() -> Self {
        BleuOptions {
            max_n: 4,
            smoothing: false,
        }
    }
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], u64> {
    let mut counts = HashMap::new();
    if chars.len() >= n {
        for w in chars.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu_corpus<C: AsRef<str>, R: AsRef<str>>(candidates: &[C], references: &[R], max_n: usize) -> Result<BleuReport> {
    bleu_corpus_with(
        candidates,
        references,
        BleuOptions {
            max_n,
            smoothing: false,
        },
    )
}

pub fn bleu_corpus_with<C: AsRef<str>, R: AsRef<str>>(
    candidates: &[C],
    references: &[R],
    options: BleuOptions,
) -> Result<BleuReport> {
    let max_n = options.max_n;
    if candidates.len() != references.len() {
        return Err(Error::Param(format!(
            "{} candidates but {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    if max_n == 0 {
        return Err(Error::Param("BLEU order must be at least 1".into()));
    }
    let mut matches = vec![0u64; max_n];
    let mut totals = vec![0u64; max_n];
    let (mut c, mut r) = (0u64, 0u64);
    for (cand, reference) in candidates.iter().zip(references) {
        let cand: Vec<char> = cand.as_ref().chars().collect();
        let reference: Vec<char> = reference.as_ref().chars().collect();
        c += cand.len() as u64;
        r += reference.len() as u64;
        for n in 1..=max_n {
            let ref_counts = ngram_counts(&reference, n);
            for (gram, count) in ngram_counts(&cand, n) {
                matches[n - 1] += count.min(ref_counts.get(gram).copied().unwrap_or(0));
            }
            totals[n - 1] += (cand.len() + 1).saturating_sub(n) as u64;
        }
    }
    let precisions: Vec<f64> = (0..max_n)
        .map(|i| {
            let (m, t) = if options.smoothing && i > 0 {
                (matches[i] + 1, totals[i] + 1)
            } else {
                (matches[i], totals[i])
            };
            if t == 0 {
                0.0
            } else {
                m as f64 / t as f64
            }
        })
        .collect();
    let brevity_penalty = if c >= r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut bleu = BTreeMap::new();
    let mut log_sum = 0.0;
    let mut zero = false;
    for k in 1..=max_n {
        let p = precisions[k - 1];
        zero |= p == 0.0;
        if !zero {
            log_sum += p.ln();
        }
        let score = if zero {
            0.0
        } else {
            (brevity_penalty * (log_sum / k as f64).exp()).min(1.0)
        };
        bleu.insert(k, score);
    }
    Ok(BleuReport {
        max_n,
        matches,
        totals,
        precisions,
        candidate_length: c,
        reference_length: r,
        brevity_penalty,
        bleu,
        smoothed: options.smoothing,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMetrics {
    pub label: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightedMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub per_label: Vec<LabelMetrics>,
    pub weighted: WeightedMetrics,
    pub accuracy: f64,
    pub count: usize,
}

impl ClassReport {
    pub fn label(&self, label: &str) -> Option<&LabelMetrics> {
        self.per_label.iter().find(|m| m.label == label)
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn classification_report<T: AsRef<str>, P: AsRef<str>, L: AsRef<str>>(
    truths: &[T],
    predictions: &[P],
    labels: &[L],
) -> Result<ClassReport> {
    if truths.len() != predictions.len() {
        return Err(Error::Param(format!(
            "{} truths but {} predictions",
            truths.len(),
            predictions.len()
        )));
    }
    if truths.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut index = HashMap::new();
    for (i, l) in labels.iter().enumerate() {
        if index.insert(l.as_ref(), i).is_some() {
            return Err(Error::Param(format!("duplicate label {:?}", l.as_ref())));
        }
    }
    let lookup = |s: &str| index.get(s).copied().ok_or_else(|| Error::UnknownLabel(s.to_string()));
    let k = labels.len();
    let (mut tp, mut predicted, mut support) = (vec![0usize; k], vec![0usize; k], vec![0usize; k]);
    for (t, p) in truths.iter().zip(predictions) {
        let (t, p) = (lookup(t.as_ref())?, lookup(p.as_ref())?);
        support[t] += 1;
        predicted[p] += 1;
        if t == p {
            tp[t] += 1;
        }
    }
    let n = truths.len();
    let per_label: Vec<LabelMetrics> = labels
        .iter()
        .enumerate()
        .map(|(i, l)| {
            let precision = ratio(tp[i], predicted[i]);
            let recall = ratio(tp[i], support[i]);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            LabelMetrics {
                label: l.as_ref().to_string(),
                precision,
                recall,
                f1,
                support: support[i],
            }
        })
        .collect();
    let weigh = |f: fn(&LabelMetrics) -> f64| {
        per_label.iter().map(|m| m.support as f64 * f(m)).sum::<f64>() / n as f64
    };
    Ok(ClassReport {
        weighted: WeightedMetrics {
            precision: weigh(|m| m.precision),
            recall: weigh(|m| m.recall),
            f1: weigh(|m| m.f1),
        },
        accuracy: ratio(tp.iter().sum(), n),
        per_label,
        count: n,
    })
}
