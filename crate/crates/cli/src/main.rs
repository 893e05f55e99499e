//! `gujin` command-line front end. Reports go to stdout (or `--out`) as
//! JSON; progress goes to stderr.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numeric failure.

mod commands;
mod config;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<gujin::Error> for Failure {
    fn from(e: gujin::Error) -> Self {
        if e.is_numeric() {
            Failure::Numeric(e.to_string())
        } else if e.is_usage() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Data(e.to_string())
        }
    }
}

static QUIET: AtomicBool = AtomicBool::new(false);

pub fn note(msg: impl AsRef<str>) {
    if !QUIET.load(Ordering::Relaxed) {
        eprintln!("gujin: {}", msg.as_ref());
    }
}

#[derive(Parser)]
#[command(name = "gujin", version, about = "Character-level language modeling for classical Chinese")]
struct Cli {
    /// Suppress progress messages on stderr.
    #[arg(long, short, global = true)]
    quiet: bool,
    /// Write the report to this file instead of stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// One text per line.
    Text,
    /// Aligned JSONL, both sides.
    Aligned,
    /// Aligned JSONL, `Ancient` side.
    Ancient,
    /// Aligned JSONL, `Chinese` side.
    Modern,
    /// Labeled JSONL; `text` (plus `label` when building a vocabulary).
    Labeled,
}

#[derive(Subcommand)]
enum Command {
    /// Build a character vocabulary, or extend an existing one.
    BuildVocab {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
        /// Existing vocabulary to extend; its ids are kept.
        #[arg(long)]
        base: Option<PathBuf>,
        /// Extra strings to cover, such as a prompt template or label names.
        #[arg(long)]
        extra: Vec<String>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Keep aligned pairs whose similarity lies in [low, high].
    FilterPairs {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long, default_value_t = gujin::corpus::DEFAULT_BAND.0)]
        low: f64,
        #[arg(long, default_value_t = gujin::corpus::DEFAULT_BAND.1)]
        high: f64,
    },
    /// Sentence count, character total, mean length and variance.
    CorpusStats {
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Seeded shuffle-and-cut of a line-oriented file.
    Split {
        input: PathBuf,
        /// Share of lines that go to the training side.
        #[arg(long)]
        fraction: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long = "out-train", alias = "o-train")]
        out_train: PathBuf,
        #[arg(long = "out-held", alias = "o-held")]
        out_held: PathBuf,
    },
    /// Causal-LM pretraining from a TOML config.
    Pretrain(ConfigArg),
    /// Translation fine-tuning from a TOML config.
    FinetuneTranslate(ConfigArg),
    /// Prompt-classification fine-tuning from a TOML config.
    FinetuneClassify(ConfigArg),
    /// Translate each input line.
    Translate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        inputs: InputArgs,
        #[command(flatten)]
        decode: DecodeArgs,
        /// Print bare translations instead of JSON records.
        #[arg(long)]
        plain: bool,
    },
    /// Score every label for each input line.
    Classify {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        inputs: InputArgs,
        /// Label set, one per line.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        template: Option<String>,
        #[arg(long, value_enum, default_value = "mean")]
        scoring: Scoring,
    },
    /// Corpus perplexity report.
    EvalPpl {
        #[command(flatten)]
        model: ModelArgs,
        input: PathBuf,
        #[arg(long, value_enum, default_value = "text")]
        format: Format,
    },
    /// Corpus BLEU-1..n over characters.
    EvalBleu {
        /// Candidate translations, one per line (blank lines are empty candidates).
        #[arg(long)]
        candidates: PathBuf,
        #[arg(long)]
        references: PathBuf,
        #[arg(long, default_value_t = 4)]
        max_n: usize,
        /// Add-one smoothing for orders 2 and above.
        #[arg(long)]
        smooth: bool,
    },
    /// Per-label and weighted precision, recall and F1.
    EvalCls {
        #[arg(long)]
        truths: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        /// Declared labels, one per line; defaults to those seen in the truths.
        #[arg(long)]
        labels: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArg {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
pub struct ModelArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
}

#[derive(Args)]
pub struct InputArgs {
    /// Read inputs from this file instead of the positional texts.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "text")]
    format: Format,
    texts: Vec<String>,
}

#[derive(Args)]
pub struct DecodeArgs {
    #[arg(long, default_value_t = 512)]
    max_gen_length: usize,
    /// Sample from the k most likely tokens.
    #[arg(long, conflicts_with = "temperature")]
    top_k: Option<usize>,
    /// Sample from the tempered distribution.
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scoring {
    Mean,
    Sum,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let out = cli.out.as_deref();
    match cli.command {
        Command::BuildVocab {
            inputs,
            format,
            base,
            extra,
            output,
        } => commands::build_vocab(&inputs, format, base.as_deref(), &extra, &output, out),
        Command::FilterPairs { input, output, low, high } => commands::filter_pairs(&input, &output, low, high, out),
        Command::CorpusStats { input, format } => commands::corpus_stats(&input, format, out),
        Command::Split {
            input,
            fraction,
            seed,
            out_train,
            out_held,
        } => commands::split(&input, fraction, seed, &out_train, &out_held, out),
        Command::Pretrain(c) => commands::pretrain(&c.config, out),
        Command::FinetuneTranslate(c) => commands::finetune_translate(&c.config, out),
        Command::FinetuneClassify(c) => commands::finetune_classify(&c.config, out),
        Command::Translate {
            model,
            inputs,
            decode,
            plain,
        } => commands::translate(&model, &inputs, &decode, plain, out),
        Command::Classify {
            model,
            inputs,
            labels,
            template,
            scoring,
        } => commands::classify(&model, &inputs, &labels, template.as_deref(), scoring, out),
        Command::EvalPpl { model, input, format } => commands::eval_ppl(&model, &input, format, out),
        Command::EvalBleu {
            candidates,
            references,
            max_n,
            smooth,
        } => commands::eval_bleu(&candidates, &references, max_n, smooth, out),
        Command::EvalCls {
            truths,
            predictions,
            labels,
        } => commands::eval_cls(&truths, &predictions, labels.as_deref(), out),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    QUIET.store(cli.quiet, Ordering::Relaxed);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("gujin: error: {f}");
            ExitCode::from(f.code())
        }
    }
}
