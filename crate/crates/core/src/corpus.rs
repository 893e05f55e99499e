//! Corpus ingestion: aligned translation pairs, labeled examples, raw
//! pretraining text, similarity filtering, splitting and length statistics.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::{Error, Result};

pub const ANCIENT_KEY: &str = "Ancient";
pub const MODERN_KEY: &str = "Chinese";

/// Default similarity band used to select aligned pairs.
pub const DEFAULT_BAND: (f64, f64) = (0.85, 0.98);

/// A classical sentence and its modern translation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedPair {
    #[serde(rename = "Ancient")]
    pub ancient: String,
    #[serde(rename = "Chinese")]
    pub modern: String,
    #[serde(skip)]
    pub similarity: Option<f64>,
}

impl AlignedPair {
    pub fn new(ancient: impl Into<String>, modern: impl Into<String>) -> Result<Self> {
        let pair = AlignedPair {
            ancient: ancient.into(),
            modern: modern.into(),
            similarity: None,
        };
        if pair.ancient.trim().is_empty() || pair.modern.trim().is_empty() {
            return Err(Error::Param("aligned pair sides must be non-empty".into()));
        }
        Ok(pair)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledText {
    pub text: String,
    pub label: String,
}

impl LabeledText {
    pub fn new(text: impl Into<String>, label: impl Into<String>) -> Result<Self> {
        let (text, label) = (text.into(), label.into());
        if text.is_empty() || label.is_empty() {
            return Err(Error::Param("labeled text and label must be non-empty".into()));
        }
        Ok(LabeledText { text, label })
    }
}

/// Sentence-length summary of a corpus side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub sentence_count: usize,
    pub total_chars: usize,
    pub mean_length: f64,
    pub variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn new(train_fraction: f64, seed: u64) -> Result<Self> {
        if !(train_fraction > 0.0 && train_fraction < 1.0) {
            return Err(Error::Param(format!(
                "train_fraction must lie in (0, 1), got {train_fraction}"
            )));
        }
        Ok(SplitSpec {
            train_fraction,
            seed,
        })
    }
}

fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn json_lines(content: &str) -> impl Iterator<Item = (usize, &str)> {
    content
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l))
        .filter(|(_, l)| !l.trim().is_empty())
}

fn string_field(record: &Value, key: &str, line: usize) -> Result<String> {
    match record.get(key) {
        None => Err(Error::MissingKey {
            key: key.to_string(),
            line,
        }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(Error::Malformed {
            line,
            message: format!("key {key} must be a string, found {other}"),
        }),
    }
}

fn parse_record(line_no: usize, line: &str) -> Result<Value> {
    let record: Value = serde_json::from_str(line).map_err(|e| Error::Malformed {
        line: line_no,
        message: e.to_string(),
    })?;
    if !record.is_object() {
        return Err(Error::Malformed {
            line: line_no,
            message: "expected a JSON object".into(),
        });
    }
    Ok(record)
}

/// Parses aligned pairs from JSONL text with keys `Ancient` and `Chinese`.
pub fn parse_aligned(content: &str) -> Result<Vec<AlignedPair>> {
    json_lines(content)
        .map(|(line_no, line)| {
            let record = parse_record(line_no, line)?;
            let ancient = string_field(&record, ANCIENT_KEY, line_no)?;
            let modern = string_field(&record, MODERN_KEY, line_no)?;
            AlignedPair::new(ancient, modern).map_err(|_| Error::Malformed {
                line: line_no,
                message: "empty sentence".into(),
            })
        })
        .collect()
}

pub fn load_aligned(path: impl AsRef<Path>) -> Result<Vec<AlignedPair>> {
    parse_aligned(&read_to_string(path.as_ref())?)
}

pub fn write_aligned(path: impl AsRef<Path>, pairs: &[AlignedPair]) -> Result<()> {
    write_jsonl(path.as_ref(), pairs)
}

pub fn parse_labeled(content: &str) -> Result<Vec<LabeledText>> {
    json_lines(content)
        .map(|(line_no, line)| {
            let record = parse_record(line_no, line)?;
            let text = string_field(&record, "text", line_no)?;
            let label = string_field(&record, "label", line_no)?;
            LabeledText::new(text, label).map_err(|e| Error::Malformed {
                line: line_no,
                message: e.to_string(),
            })
        })
        .collect()
}

pub fn load_labeled(path: impl AsRef<Path>) -> Result<Vec<LabeledText>> {
    parse_labeled(&read_to_string(path.as_ref())?)
}

pub fn write_labeled(path: impl AsRef<Path>, examples: &[LabeledText]) -> Result<()> {
    write_jsonl(path.as_ref(), examples)
}

/// Raw text, one sentence per line; blank lines are skipped.
pub fn load_lines(path: impl AsRef<Path>) -> Result<Vec<String>> {
    Ok(read_to_string(path.as_ref())?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::Param(e.to_string()))?;
        out.push(b'\n');
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))
}

fn ngram_counts(chars: &[char], n: usize) -> HashMap<&[char], usize> {
    let mut counts = HashMap::new();
    for gram in chars.windows(n) {
        *counts.entry(gram).or_insert(0) += 1;
    }
    counts
}

/// Dice coefficient over character-bigram multisets, falling back to
/// unigrams when either side is shorter than two characters.
pub fn pair_similarity(a: &str, b: &str) -> f64 {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let n = if a.len() < 2 || b.len() < 2 { 1 } else { 2 };
    let (ca, cb) = (ngram_counts(&a, n), ngram_counts(&b, n));
    let total: usize = ca.values().sum::<usize>() + cb.values().sum::<usize>();
    if total == 0 {
        return 0.0;
    }
    let shared: usize = ca
        .iter()
        .map(|(g, &c)| c.min(cb.get(g).copied().unwrap_or(0)))
        .sum();
    2.0 * shared as f64 / total as f64
}

/// Keeps pairs whose similarity lies in the closed band `[low, high]`.
pub fn filter_pairs(pairs: &[AlignedPair], low: f64, high: f64) -> Result<Vec<AlignedPair>> {
    if !(0.0..=1.0).contains(&low) || !(0.0..=1.0).contains(&high) || low > high {
        return Err(Error::Param(format!(
            "similarity band requires 0 <= low <= high <= 1, got [{low}, {high}]"
        )));
    }
    Ok(pairs
        .iter()
        .filter_map(|p| {
            let sim = pair_similarity(&p.ancient, &p.modern);
            (low..=high).contains(&sim).then(|| AlignedPair {
                similarity: Some(sim),
                ..p.clone()
            })
        })
        .collect())
}

pub fn corpus_stats<S: AsRef<str>>(sentences: &[S]) -> Result<CorpusStats> {
    if sentences.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let lengths: Vec<usize> = sentences.iter().map(|s| s.as_ref().chars().count()).collect();
    let n = lengths.len() as f64;
    let total: usize = lengths.iter().sum();
    let mean = total as f64 / n;
    let variance = lengths
        .iter()
        .map(|&l| (l as f64 - mean).powi(2))
        .sum::<f64>()
        / n;
    Ok(CorpusStats {
        sentence_count: lengths.len(),
        total_chars: total,
        mean_length: mean,
        variance,
    })
}

/// Seeded shuffle followed by a cut at `floor(N * train_fraction)`.
pub fn split<T: Clone>(items: &[T], spec: SplitSpec) -> Result<(Vec<T>, Vec<T>)> {
    if items.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let spec = SplitSpec::new(spec.train_fraction, spec.seed)?;
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let cut = (items.len() as f64 * spec.train_fraction).floor() as usize;
    let pick = |idx: &[usize]| idx.iter().map(|&i| items[i].clone()).collect::<Vec<_>>();
    Ok((pick(&order[..cut]), pick(&order[cut..])))
}
