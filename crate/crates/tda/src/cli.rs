//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands::{
    agreement_cmd, average_cmd, decode_cmd, evaluate_cmd, gen_data, train_cmd, AgreementArgs, AverageArgs, DecodeArgs,
    EvaluateArgs, GenDataArgs, TrainArgs,
};
use crate::error::CliError;

/// Joint speech transcription and translation with dual-path agreement.
///
/// Exit codes: 0 success, 1 internal error, 2 bad arguments or
/// configuration (including missing inputs), 3 I/O failure or existing
/// output without --force, 4 training diverged, 5 checkpoint version
/// mismatch. TDA_SEED supplies the seed when none is given.
#[derive(Debug, Parser)]
#[command(name = "tda", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic speech/transcription/translation corpus.
    GenData(GenData),
    /// Train the ASR path only, for encoder initialization.
    PretrainAsr(Train),
    /// Train the dual-path model.
    Train(Train),
    /// Decode a split along one path.
    Decode(Decode),
    /// Score a decode output: BLEU for translations, WER for transcriptions.
    Evaluate(Evaluate),
    /// Report teacher-forced KL agreement between the two decoding orders.
    Agreement(Agreement),
    /// Average checkpoint parameters.
    AverageCheckpoints(Average),
}

#[derive(Debug, Args)]
pub struct GenData {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of examples (90/5/5 train/dev/test).
    #[arg(long, default_value_t = 2000)]
    n: usize,
    /// Corpus seed; falls back to TDA_SEED, then 1.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite files in a non-empty output directory.
    #[arg(long)]
    force: bool,
    /// Write feature files instead of regenerating features on load.
    #[arg(long)]
    write_features: bool,
    /// Distinct source words.
    #[arg(long)]
    lexicon_size: Option<usize>,
    /// Longest sentence in words.
    #[arg(long)]
    max_words: Option<usize>,
    /// Feature channels per frame.
    #[arg(long)]
    feat_dim: Option<usize>,
    /// Standard deviation of the frame noise.
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Debug, Args)]
pub struct Train {
    /// key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Corpus directory written by gen-data.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    /// pretrain-asr, train-tda or train-mle-only.
    #[arg(long)]
    mode: Option<String>,
    /// Weight of the agreement term; 0 trains on likelihood only.
    #[arg(long)]
    lambda: Option<String>,
    /// Checkpoint whose encoder initializes the model.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Config override, repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Write into a non-empty run directory.
    #[arg(long)]
    force: bool,
    /// No progress output.
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
pub struct Decode {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// st, asr, full-st-bt or full-asr-mt.
    #[arg(long, default_value = "st")]
    path: String,
    /// Output file, one line per example.
    #[arg(long)]
    out: PathBuf,
    /// Decoding override (beam_size, max_len, length_normalize), repeatable.
    #[arg(long, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct Evaluate {
    /// Output of decode.
    #[arg(long)]
    decoded: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct Agreement {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value = "dev")]
    split: String,
    /// Report file.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
pub struct Average {
    /// Merged checkpoint.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    force: bool,
    /// Checkpoints to average.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
}

impl From<Train> for TrainArgs {
    fn from(t: Train) -> Self {
        TrainArgs {
            config: t.config,
            corpus: t.corpus,
            out: t.out,
            mode: t.mode,
            lambda: t.lambda,
            init_from: t.init_from,
            set: t.set,
            force: t.force,
            quiet: t.quiet,
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData(a) => gen_data(&GenDataArgs {
            out: a.out,
            n: a.n,
            seed: a.seed,
            force: a.force,
            write_features: a.write_features,
            lexicon_size: a.lexicon_size,
            max_words: a.max_words,
            feat_dim: a.feat_dim,
            noise: a.noise,
        }),
        Command::PretrainAsr(t) => train_cmd(&t.into(), true),
        Command::Train(t) => train_cmd(&t.into(), false),
        Command::Decode(a) => decode_cmd(&DecodeArgs {
            checkpoint: a.checkpoint,
            corpus: a.corpus,
            split: a.split,
            path: a.path,
            out: a.out,
            set: a.set,
            force: a.force,
        }),
        Command::Evaluate(a) => evaluate_cmd(&EvaluateArgs {
            decoded: a.decoded,
            corpus: a.corpus,
            split: a.split,
            out: a.out,
            force: a.force,
        }),
        Command::Agreement(a) => agreement_cmd(&AgreementArgs {
            checkpoint: a.checkpoint,
            corpus: a.corpus,
            split: a.split,
            out: a.out,
            force: a.force,
        }),
        Command::AverageCheckpoints(a) => average_cmd(&AverageArgs {
            inputs: a.inputs,
            out: a.out,
            force: a.force,
        }),
    }
}
