//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 check failure, 2 input error, 3 state mismatch.

use std::ffi::OsString;
use std::fmt::Display;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::checkpoint::{self, CheckpointError};
use crate::config::TrainConfig;
use crate::corpus::{self, QAExample};
use crate::gradcheck;
use crate::inference::{self, Strategy};
use crate::jsonl::{self, SCHEMA_VERSION};
use crate::model::Model;
use crate::scalar::Scalar;
use crate::synth::{self, SynthConfig};
use crate::tokenizer::{self, Vocab};
use crate::trainer::{self, DevSet, TrainError};
use crate::windowing::Window;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_INPUT: i32 = 2;
pub const EXIT_MISMATCH: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    fn input(m: impl Display) -> Self {
        Self { code: EXIT_INPUT, message: m.to_string() }
    }
    fn mismatch(m: impl Display) -> Self {
        Self { code: EXIT_MISMATCH, message: m.to_string() }
    }
    fn check(m: impl Display) -> Self {
        Self { code: EXIT_CHECK, message: m.to_string() }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Mismatch(_) => CliError::mismatch(e),
            _ => CliError::input(e),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::Window(_) | TrainError::Score(_) => CliError::input(e),
            _ => CliError::check(e),
        }
    }
}

type CliResult = Result<(), CliError>;

#[derive(Parser, Debug)]
#[command(name = "vault", version, about = "Paragraph-first long-document question answering")]
pub struct Cli {
    /// Flat key/value config file (TOML dotted keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Caps worker threads.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F64)]
    pub precision: Precision,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    ParagraphFirst,
    SpanFirst,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::ParagraphFirst => Strategy::ParagraphFirst,
            StrategyArg::SpanFirst => Strategy::SpanFirst,
        }
    }
}

#[derive(Args, Debug)]
pub struct ModeFlags {
    /// Train with the KL weight forced to zero.
    #[arg(long)]
    pub no_gpo: bool,
    /// Train without the paragraph head; decodes span-first.
    #[arg(long)]
    pub no_papr: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Windowize a corpus for training.
    Preprocess {
        corpus: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Reuse an existing vocabulary instead of building one.
        #[arg(long)]
        vocab: Option<PathBuf>,
        /// Where a newly built vocabulary goes (default: vocab.txt beside --out).
        #[arg(long)]
        vocab_out: Option<PathBuf>,
        /// Keep every negative window.
        #[arg(long)]
        no_subsample: bool,
        #[arg(long)]
        stats: Option<PathBuf>,
    },
    /// Train from a windows file.
    Train {
        windows: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// Checkpoint path, rewritten at every epoch end.
        #[arg(long)]
        out: PathBuf,
        /// Corpus scored after every epoch.
        #[arg(long)]
        dev: Option<PathBuf>,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        modes: ModeFlags,
    },
    /// Predict LA/SA for every example of a corpus.
    Decode {
        corpus: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to paragraph-first, or span-first for checkpoints trained without the paragraph head.
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
    },
    /// Score predictions against gold annotations.
    Score {
        predictions: PathBuf,
        corpus: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every gradient.
    Gradcheck {
        #[arg(long)]
        out: Option<PathBuf>,
        /// Negative control: perturbs one analytic gradient.
        #[arg(long, hide = true)]
        corrupt_grad: bool,
    },
    /// Compare span-candidate counts of both decoding strategies.
    Bench {
        windows: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a cue-token synthetic corpus.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        docs: usize,
        #[arg(long, default_value_t = 8)]
        paragraphs: usize,
        #[arg(long, default_value_t = 6)]
        paragraph_len: usize,
        #[arg(long, default_value = "syn")]
        id_prefix: String,
    },
}

/// Parses arguments, runs, and returns the process exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli) -> CliResult {
    if let Some(n) = cli.threads {
        // Fails only if a pool already exists, which is harmless.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::load(p).map_err(CliError::input)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let cfg = cfg.resolved();
    let explicit_config = cli.config.is_some();

    match cli.command {
        Command::Preprocess { corpus, out, vocab, vocab_out, no_subsample, stats } => {
            cmd_preprocess(&cfg, &corpus, &out, vocab.as_deref(), vocab_out.as_deref(), !no_subsample, stats.as_deref())
        }
        Command::Train { windows, vocab, out, dev, report, modes } => {
            let mut cfg = cfg;
            cfg.gpo_enabled &= !modes.no_gpo;
            cfg.papr_enabled &= !modes.no_papr;
            match cli.precision {
                Precision::F64 => cmd_train::<f64>(&cfg, &windows, &vocab, &out, dev.as_deref(), report.as_deref()),
                Precision::F32 => cmd_train::<f32>(&cfg, &windows, &vocab, &out, dev.as_deref(), report.as_deref()),
            }
        }
        Command::Decode { corpus, checkpoint, vocab, out, strategy } => {
            let expected = explicit_config.then_some(&cfg);
            let strategy = strategy.map(Strategy::from);
            match cli.precision {
                Precision::F64 => cmd_decode::<f64>(expected, &corpus, &checkpoint, &vocab, &out, strategy),
                Precision::F32 => cmd_decode::<f32>(expected, &corpus, &checkpoint, &vocab, &out, strategy),
            }
        }
        Command::Score { predictions, corpus, out } => cmd_score(&predictions, &corpus, out.as_deref()),
        Command::Gradcheck { out, corrupt_grad } => cmd_gradcheck(cfg.seed, corrupt_grad, out.as_deref()),
        Command::Bench { windows, checkpoint, out } => match cli.precision {
            Precision::F64 => cmd_bench::<f64>(&windows, &checkpoint, out.as_deref()),
            Precision::F32 => cmd_bench::<f32>(&windows, &checkpoint, out.as_deref()),
        },
        Command::Synth { out, docs, paragraphs, paragraph_len, id_prefix } => {
            let sc = SynthConfig { docs, paragraphs, paragraph_len, seed: cfg.seed, id_prefix, ..SynthConfig::default() };
            if paragraphs == 0 || paragraph_len < 3 {
                return Err(CliError::input("synth needs at least 1 paragraph of at least 3 words"));
            }
            corpus::write_examples(&out, &synth::generate(&sc)).map_err(CliError::input)
        }
    }
}

fn write_text(path: &Path, text: &str) -> CliResult {
    std::fs::write(path, text).map_err(|e| CliError::input(format!("cannot write {}: {e}", path.display())))
}

fn emit_json<T: Serialize>(value: &T, out: Option<&Path>) -> CliResult {
    let text = serde_json::to_string_pretty(value).expect("report serializes") + "\n";
    print!("{text}");
    match out {
        Some(p) => write_text(p, &text),
        None => Ok(()),
    }
}

fn load_corpus(path: &Path) -> Result<Vec<QAExample>, CliError> {
    let examples = corpus::load_examples(path).map_err(CliError::input)?;
    for ex in &examples {
        corpus::validate_example(ex).map_err(|violations| {
            CliError::input(corpus::CorpusError::Invalid { id: ex.id.clone(), violations })
        })?;
    }
    Ok(examples)
}

fn load_vocab(path: &Path) -> Result<Vocab, CliError> {
    Vocab::load(path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_windows(path: &Path) -> Result<Vec<Window>, CliError> {
    jsonl::read_jsonl(path).map_err(CliError::input)
}

#[derive(Serialize)]
struct PreprocessStats {
    version: u32,
    examples: usize,
    windows: usize,
    positives: usize,
    negatives_total: usize,
    negatives_kept: usize,
}

fn cmd_preprocess(
    cfg: &TrainConfig,
    corpus_path: &Path,
    out: &Path,
    vocab_in: Option<&Path>,
    vocab_out: Option<&Path>,
    subsample: bool,
    stats_out: Option<&Path>,
) -> CliResult {
    cfg.window.validate().map_err(CliError::input)?;
    let examples = load_corpus(corpus_path)?;
    let vocab = match vocab_in {
        Some(p) => load_vocab(p)?,
        None => {
            let v = tokenizer::build_vocab(&examples, cfg.vocab_cap, cfg.p_max).map_err(CliError::input)?;
            let path = vocab_out.map(Path::to_path_buf).unwrap_or_else(|| out.with_file_name("vocab.txt"));
            v.save(&path).map_err(|e| CliError::input(format!("{}: {e}", path.display())))?;
            v
        }
    };
    let all = trainer::windowize(&examples, &vocab, &cfg.window, false).map_err(CliError::input)?;
    let positives = all.iter().filter(|w| w.labels.is_positive()).count();
    let negatives_total = all.len() - positives;
    let windows = if subsample { crate::windowing::subsample_negatives(all, &cfg.window) } else { all };
    jsonl::write_jsonl(out, &windows).map_err(CliError::input)?;
    let stats = PreprocessStats {
        version: SCHEMA_VERSION,
        examples: examples.len(),
        windows: windows.len(),
        positives,
        negatives_total,
        negatives_kept: windows.len() - positives,
    };
    emit_json(&stats, stats_out)
}

fn cmd_train<S: Scalar>(
    cfg: &TrainConfig,
    windows_path: &Path,
    vocab_path: &Path,
    out: &Path,
    dev: Option<&Path>,
    report_out: Option<&Path>,
) -> CliResult {
    let vocab = load_vocab(vocab_path)?;
    let windows = load_windows(windows_path)?;
    let mut cfg = cfg.clone();
    cfg.encoder.vocab_size = vocab.len();
    cfg.validate().map_err(CliError::input)?;
    if let Some(w) = windows.iter().find(|w| w.seq_len() != cfg.window.seq_len) {
        return Err(CliError::mismatch(format!(
            "window {}#{} has length {} but config seq_len is {}",
            w.example_id,
            w.ordinal,
            w.seq_len(),
            cfg.window.seq_len
        )));
    }
    if let Some(w) = windows.iter().find(|w| w.token_ids.iter().any(|&t| t as usize >= vocab.len())) {
        return Err(CliError::mismatch(format!("window {}#{} uses ids beyond the vocabulary", w.example_id, w.ordinal)));
    }
    let dev = match dev {
        Some(p) => {
            let examples = load_corpus(p)?;
            let windows = trainer::windowize(&examples, &vocab, &cfg.window, false).map_err(CliError::input)?;
            Some(DevSet { examples, windows })
        }
        None => None,
    };
    let (_, report) = trainer::train_windows::<S>(&windows, &cfg, dev.as_ref(), |epoch, model| {
        checkpoint::save(out, model, &cfg, epoch).map_err(|e| TrainError::Callback(e.to_string()))
    })?;
    emit_json(&report, report_out)
}

fn cmd_decode<S: Scalar>(
    expected: Option<&TrainConfig>,
    corpus_path: &Path,
    ckpt: &Path,
    vocab_path: &Path,
    out: &Path,
    strategy: Option<Strategy>,
) -> CliResult {
    let (header, model) = checkpoint::load::<S>(ckpt)?;
    let vocab = load_vocab(vocab_path)?;
    if let Some(exp) = expected {
        let mut exp = exp.clone();
        exp.encoder.vocab_size = vocab.len();
        checkpoint::check_compatible(&header, &exp)?;
    }
    if vocab.len() != header.config.encoder.vocab_size {
        return Err(CliError::mismatch(format!(
            "vocabulary has {} tokens, checkpoint expects {}",
            vocab.len(),
            header.config.encoder.vocab_size
        )));
    }
    let cfg = &header.config;
    let examples = load_corpus(corpus_path)?;
    let windows = trainer::windowize(&examples, &vocab, &cfg.window, false).map_err(CliError::input)?;
    let strategy = strategy.unwrap_or_else(|| trainer::decode_strategy(cfg));
    let preds = inference::predict(&model, &cfg.encoder, &windows, strategy, &trainer::decode_options(cfg))
        .map_err(CliError::check)?;
    // Examples that yield no windows still get a NULL line.
    let mut preds = preds;
    for ex in &examples {
        if !preds.iter().any(|p| p.example_id == ex.id) {
            preds.push(inference::aggregate(&ex.id, &[], strategy));
        }
    }
    preds.sort_by(|a, b| a.example_id.cmp(&b.example_id));
    jsonl::write_jsonl(out, &preds).map_err(CliError::input)
}

fn cmd_score(preds_path: &Path, corpus_path: &Path, out: Option<&Path>) -> CliResult {
    let preds: Vec<inference::Prediction> = jsonl::read_jsonl(preds_path).map_err(CliError::input)?;
    let examples = load_corpus(corpus_path)?;
    let report = inference::score(&preds, &examples).map_err(CliError::input)?;
    print!("{}", report.to_table());
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_text(p, &text)?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, corrupt: bool, out: Option<&Path>) -> CliResult {
    let report = gradcheck::run(seed, corrupt).map_err(CliError::check)?;
    print!("{}", report.to_table());
    if let Some(p) = out {
        let text = serde_json::to_string_pretty(&report).expect("report serializes") + "\n";
        write_text(p, &text)?;
    }
    if report.passed {
        Ok(())
    } else {
        let failed: Vec<&str> = report.groups.iter().filter(|g| !g.passed).map(|g| g.group.as_str()).collect();
        Err(CliError::check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn cmd_bench<S: Scalar>(windows_path: &Path, ckpt: &Path, out: Option<&Path>) -> CliResult {
    let (header, model): (_, Model<S>) = checkpoint::load(ckpt)?;
    let windows = load_windows(windows_path)?;
    let cfg = &header.config;
    if let Some(w) = windows.iter().find(|w| w.seq_len() != cfg.window.seq_len) {
        return Err(CliError::mismatch(format!("window {}#{} does not match checkpoint seq_len", w.example_id, w.ordinal)));
    }
    let outputs = inference::window_outputs(&model, &cfg.encoder, &windows).map_err(CliError::mismatch)?;
    let report = inference::bench_decode(&windows, &outputs, &trainer::decode_options(cfg));
    emit_json(&report, out)
}
