//! The work behind each subcommand.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write as _;
use std::path::{Path, PathBuf};

use tda_core::data::{gen_corpus, CorpusSpec, FeatureSpec, Split};
use tda_core::decode::{DecodePath, DecodeRequest};
use tda_core::error::TrainError;
use tda_core::metrics::{agreement_report, bleu, corpus_wer, decode_all};
use tda_core::nn::{Model, ParamStore};
use tda_core::train::{
    average_checkpoints, init_encoder_from, train, Checkpoint, EvalLog, StepLog, TrainData, TrainHooks, TrainMode,
};

use crate::config::{write_kv, RunConfig};
use crate::corpus::{parse_split, write_corpus, Corpus};
use crate::error::CliError;
use crate::formats::{
    decode_line, load_checkpoint, metric_line, parse_decode_output, read_text, save_checkpoint, write_file,
    write_report,
};

pub const RUN_CONF: &str = "run.conf";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const TRAIN_LOG: &str = "train_log.tsv";
pub const BEST_FILE: &str = "best.tsv";
pub const LAST_CKPT: &str = "last.ckpt";
pub const AVERAGED_CKPT: &str = "averaged.ckpt";
pub const CHECKPOINT_DIR: &str = "checkpoints";

/// Fails with [`CliError::Exists`] if `path` is a file or a non-empty
/// directory and `force` is off.
pub fn ensure_fresh(path: &Path, force: bool) -> Result<(), CliError> {
    let occupied = match fs::metadata(path) {
        Err(_) => false,
        Ok(m) if m.is_dir() => fs::read_dir(path).map_err(|e| CliError::io(path, e))?.next().is_some(),
        Ok(_) => true,
    };
    if occupied && !force {
        return Err(CliError::Exists(path.to_path_buf()));
    }
    Ok(())
}

/// `<file>.conf` beside a single-file output.
pub fn sidecar(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".conf");
    PathBuf::from(s)
}

pub fn checkpoint_name(step: u64) -> String {
    format!("step-{step:08}.ckpt")
}

#[derive(Clone, Debug)]
pub struct GenDataArgs {
    pub out: PathBuf,
    pub n: usize,
    pub seed: Option<u64>,
    pub force: bool,
    pub write_features: bool,
    pub lexicon_size: Option<usize>,
    pub max_words: Option<usize>,
    pub feat_dim: Option<usize>,
    pub noise: Option<f64>,
}

pub fn gen_data(args: &GenDataArgs) -> Result<(), CliError> {
    ensure_fresh(&args.out, args.force)?;
    let seed = match args.seed {
        Some(s) => s,
        None => seed_env()?.unwrap_or(CorpusSpec::default().seed),
    };
    let base = CorpusSpec::default();
    let spec = CorpusSpec {
        n_examples: args.n,
        seed,
        lexicon_size: args.lexicon_size.unwrap_or(base.lexicon_size),
        max_words: args.max_words.unwrap_or(base.max_words),
        features: FeatureSpec {
            feat_dim: args.feat_dim.unwrap_or(base.features.feat_dim),
            noise: args.noise.unwrap_or(base.features.noise),
            ..base.features
        },
        ..base
    };
    let entries = gen_corpus(&spec)?;
    write_corpus(&args.out, &spec, &entries, args.write_features)
}

fn seed_env() -> Result<Option<u64>, CliError> {
    match std::env::var(crate::config::SEED_ENV) {
        Ok(s) => s
            .parse()
            .map(Some)
            .map_err(|_| CliError::Config(format!("{}={s:?} is not a seed", crate::config::SEED_ENV))),
        Err(_) => Ok(None),
    }
}

#[derive(Clone, Debug, Default)]
pub struct TrainArgs {
    pub config: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub out: PathBuf,
    pub mode: Option<String>,
    pub lambda: Option<String>,
    pub init_from: Option<PathBuf>,
    pub set: Vec<String>,
    pub force: bool,
    pub quiet: bool,
}

impl TrainArgs {
    /// Config file, then `--set` overrides, then dedicated flags, then the
    /// seed fallback.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for pair in &self.set {
            cfg.set_pair(pair)?;
        }
        if let Some(c) = &self.corpus {
            cfg.set("corpus", &c.to_string_lossy())?;
        }
        if let Some(m) = &self.mode {
            cfg.set("mode", m)?;
        }
        if let Some(l) = &self.lambda {
            cfg.set("lambda", l)?;
        }
        if let Some(p) = &self.init_from {
            cfg.set("init_from", &p.to_string_lossy())?;
        }
        cfg.seed_from_env()?;
        Ok(cfg)
    }
}

/// Writes the metric logs and checkpoints of a run as training goes.
struct RunWriter {
    dir: PathBuf,
    metrics: String,
    train_log: File,
    quiet: bool,
}

impl RunWriter {
    fn io(&self, file: &str, e: std::io::Error) -> TrainError {
        TrainError::Hook(format!("{}: {e}", self.dir.join(file).display()))
    }
}

impl TrainHooks for RunWriter {
    fn on_step(&mut self, log: &StepLog) -> Result<(), TrainError> {
        let l = &log.loss;
        let line = format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
            log.step, log.epoch, log.lr, log.tokens, l.nll_a, l.nll_b, l.kl_fwd, l.kl_bwd, l.total
        );
        self.train_log
            .write_all(line.as_bytes())
            .map_err(|e| self.io(TRAIN_LOG, e))
    }

    fn on_eval(&mut self, log: &EvalLog) -> Result<(), TrainError> {
        self.metrics.push_str(&metric_line(log.step, &log.loss));
        fs::write(self.dir.join(METRICS_FILE), &self.metrics).map_err(|e| self.io(METRICS_FILE, e))?;
        if !self.quiet {
            let bleu = log.bleu.map(|b| format!(" bleu {b:.2}")).unwrap_or_default();
            eprintln!(
                "step {} dev nll_A {:.4} nll_B {:.4} kl {:.5}/{:.5} total {:.4}{bleu}",
                log.step, log.loss.nll_a, log.loss.nll_b, log.loss.kl_fwd, log.loss.kl_bwd, log.loss.total
            );
        }
        Ok(())
    }

    fn on_checkpoint(&mut self, ckpt: &Checkpoint, _best: bool) -> Result<(), TrainError> {
        let name = format!("{CHECKPOINT_DIR}/{}", checkpoint_name(ckpt.step));
        save_checkpoint(&self.dir.join(&name), ckpt).map_err(|e| TrainError::Hook(e.to_string()))
    }
}

/// Trains per `args`; `pretrain-asr` is `train` with the mode fixed.
pub fn train_cmd(args: &TrainArgs, pretrain: bool) -> Result<(), CliError> {
    let mut cfg = args.run_config()?;
    if pretrain {
        if args.mode.as_deref().is_some_and(|m| m != TrainMode::PretrainAsr.name()) {
            return Err(CliError::Config("pretrain-asr does not take --mode".into()));
        }
        cfg.set("mode", TrainMode::PretrainAsr.name())?;
    }
    let corpus_dir = cfg
        .path("corpus")
        .ok_or_else(|| CliError::Config("no corpus given (--corpus or corpus= in the config)".into()))?;
    let tcfg = cfg.train_config()?;
    ensure_fresh(&args.out, args.force)?;
    let corpus = Corpus::open(&corpus_dir)?;
    let train_set = corpus.examples(Split::Train)?;
    let dev_set = corpus.examples(Split::Dev)?;
    let mcfg = cfg.model_config(corpus.vocab.len(), corpus.spec.features.feat_dim)?;
    let model = Model::new(mcfg.clone())?;
    let mut init = ParamStore::init(&mcfg, tcfg.seed)?;
    if let Some(p) = cfg.path("init_from") {
        let pre = load_checkpoint(&p)?;
        init_encoder_from(&mut init, &pre.params).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        if cfg.get("init_decoder") == "true" {
            init.copy_prefix_from(&pre.params, "dec.")
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        }
    }

    fs::create_dir_all(args.out.join(CHECKPOINT_DIR)).map_err(|e| CliError::io(&args.out, e))?;
    write_file(&args.out.join(RUN_CONF), cfg.resolved())?;
    let log_path = args.out.join(TRAIN_LOG);
    let mut hooks = RunWriter {
        train_log: File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?,
        dir: args.out.clone(),
        metrics: String::new(),
        quiet: args.quiet,
    };
    let data = TrainData {
        train: &train_set,
        dev: &dev_set,
        vocab: &corpus.vocab,
    };
    let outcome = train(&model, &tcfg, init, &data, &mut hooks)?;

    save_checkpoint(&args.out.join(LAST_CKPT), &outcome.last)?;
    let best: String = outcome
        .best
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let m = c.dev_metric.expect("evaluated checkpoint");
            format!(
                "{}\t{}\t{m}\t{CHECKPOINT_DIR}/{}\n",
                i + 1,
                c.step,
                checkpoint_name(c.step)
            )
        })
        .collect();
    write_file(&args.out.join(BEST_FILE), best)?;
    let averaged = Checkpoint {
        params: average_checkpoints(&outcome.best)?,
        dev_metric: None,
        adam: None,
        ..outcome.last.clone()
    };
    save_checkpoint(&args.out.join(AVERAGED_CKPT), &averaged)
}

#[derive(Clone, Debug)]
pub struct DecodeArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub split: String,
    pub path: String,
    pub out: PathBuf,
    pub set: Vec<String>,
    pub force: bool,
}

fn decode_path(s: &str) -> Result<DecodePath, CliError> {
    DecodePath::parse(s)
        .ok_or_else(|| CliError::Config(format!("unknown path {s:?} (st, asr, full-st-bt, full-asr-mt)")))
}

pub fn decode_cmd(args: &DecodeArgs) -> Result<(), CliError> {
    let path = decode_path(&args.path)?;
    let split = parse_split(&args.split)?;
    let mut cfg = RunConfig::default();
    for pair in &args.set {
        cfg.set_pair(pair)?;
    }
    let req: DecodeRequest = cfg.decode_request(path)?;
    ensure_fresh(&args.out, args.force)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = Corpus::open(&args.corpus)?;
    let examples = corpus.examples(split)?;
    let model = Model::new(ckpt.model.clone())?;
    let decoded = decode_all(&model, &ckpt.params, &examples, &req)?;
    let mut out = String::new();
    for (e, d) in examples.iter().zip(&decoded) {
        if d.empty || d.missing_tag {
            eprintln!(
                "warning: {}: {}",
                e.id,
                if d.empty {
                    "empty output"
                } else {
                    "no language switch tag"
                }
            );
        }
        out.push_str(&decode_line(&e.id, d, &corpus.vocab));
    }
    write_file(&args.out, out)?;
    let max_len = req.max_len.map_or("auto".into(), |m| m.to_string());
    write_file(
        &sidecar(&args.out),
        write_kv([
            ("command", "decode".to_string()),
            ("checkpoint", args.checkpoint.display().to_string()),
            ("corpus", args.corpus.display().to_string()),
            ("split", split.name().to_string()),
            ("path", path.name().to_string()),
            ("beam_size", req.beam_size.to_string()),
            ("max_len", max_len),
            ("length_normalize", req.length_normalize.to_string()),
        ]),
    )
}

#[derive(Clone, Debug)]
pub struct EvaluateArgs {
    pub decoded: PathBuf,
    pub corpus: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub force: bool,
}

/// Scores a decode output against the split's references: BLEU for
/// translations, WER for transcriptions, both for full paths.
pub fn evaluate_cmd(args: &EvaluateArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    ensure_fresh(&args.out, args.force)?;
    let lines = parse_decode_output(&read_text(&args.decoded)?, &args.decoded)?;
    let corpus = Corpus::open(&args.corpus)?;
    let refs: BTreeMap<String, (String, String)> = corpus
        .manifest(split)?
        .into_iter()
        .map(|m| (m.id, (m.transcription, m.translation)))
        .collect();
    let first = lines
        .first()
        .ok_or_else(|| CliError::format(&args.decoded, "no decoded examples"))?;
    let path = decode_path(&first.path).map_err(|_| CliError::format(&args.decoded, "unknown path"))?;
    if lines.iter().any(|l| l.path != first.path) {
        return Err(CliError::format(&args.decoded, "mixed decoding paths"));
    }
    // (kind, reference, hypothesis) per example and scored language
    let mut translations: Vec<(String, String, String)> = Vec::new();
    let mut transcriptions: Vec<(String, String, String)> = Vec::new();
    for l in &lines {
        let (z, y) = refs
            .get(&l.id)
            .ok_or_else(|| CliError::format(&args.decoded, format!("{} is not in the {} split", l.id, split.name())))?;
        let second = l.second.clone().unwrap_or_default();
        let (hyp_y, hyp_z) = match path {
            DecodePath::St => (Some(l.first.clone()), None),
            DecodePath::Asr => (None, Some(l.first.clone())),
            DecodePath::FullStBt => (Some(l.first.clone()), Some(second)),
            DecodePath::FullAsrMt => (Some(second), Some(l.first.clone())),
        };
        if let Some(h) = hyp_y {
            translations.push((l.id.clone(), y.clone(), h));
        }
        if let Some(h) = hyp_z {
            transcriptions.push((l.id.clone(), z.clone(), h));
        }
    }
    fn strs(v: &[(String, String, String)]) -> (Vec<&str>, Vec<&str>) {
        v.iter().map(|(_, r, h)| (r.as_str(), h.as_str())).unzip()
    }
    let mut pairs = vec![
        ("path", path.name().to_string()),
        ("split", split.name().to_string()),
        ("examples", lines.len().to_string()),
    ];
    if !translations.is_empty() {
        let (r, h) = strs(&translations);
        pairs.push(("bleu", bleu(&r, &h)?.to_string()));
    }
    if !transcriptions.is_empty() {
        let (r, h) = strs(&transcriptions);
        pairs.push(("wer", corpus_wer(&r, &h)?.to_string()));
    }
    let rows: Vec<Vec<String>> = translations
        .iter()
        .map(|t| ("translation", t))
        .chain(transcriptions.iter().map(|t| ("transcription", t)))
        .map(|(kind, (id, r, h))| vec![id.clone(), kind.to_string(), r.clone(), h.clone()])
        .collect();
    write_file(
        &args.out,
        write_report(&pairs, &["id", "kind", "reference", "hypothesis"], &rows),
    )
}

#[derive(Clone, Debug)]
pub struct AgreementArgs {
    pub checkpoint: PathBuf,
    pub corpus: PathBuf,
    pub split: String,
    pub out: PathBuf,
    pub force: bool,
}

/// Teacher-forced agreement between the two decoding orders.
pub fn agreement_cmd(args: &AgreementArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    ensure_fresh(&args.out, args.force)?;
    let ckpt = load_checkpoint(&args.checkpoint)?;
    let corpus = Corpus::open(&args.corpus)?;
    let examples = corpus.examples(split)?;
    let model = Model::new(ckpt.model.clone())?;
    let report = agreement_report(&model, &ckpt.params, &examples, ckpt.train.token_budget)?;
    let (kl_fwd, kl_bwd) = (report.kl_fwd.unwrap_or(0.0), report.kl_bwd.unwrap_or(0.0));
    let tokens: usize = report.records.iter().map(|r| r.content_tokens).sum();
    let pairs = [
        ("step", ckpt.step.to_string()),
        ("split", split.name().to_string()),
        ("examples", report.records.len().to_string()),
        ("content_tokens", tokens.to_string()),
        ("kl_fwd", kl_fwd.to_string()),
        ("kl_bwd", kl_bwd.to_string()),
        ("kl_total", (kl_fwd + kl_bwd).to_string()),
        ("nll_gap", report.nll_gap.unwrap_or(0.0).to_string()),
    ];
    let rows: Vec<Vec<String>> = report
        .records
        .iter()
        .map(|r| {
            vec![
                r.id.clone(),
                r.nll_a.to_string(),
                r.nll_b.to_string(),
                r.kl_fwd.to_string(),
                r.kl_bwd.to_string(),
                r.content_tokens.to_string(),
            ]
        })
        .collect();
    let header = ["id", "nll_A", "nll_B", "kl_fwd", "kl_bwd", "content_tokens"];
    write_file(&args.out, write_report(&pairs, &header, &rows))
}

#[derive(Clone, Debug)]
pub struct AverageArgs {
    pub inputs: Vec<PathBuf>,
    pub out: PathBuf,
    pub force: bool,
}

/// Parameter mean of the inputs under the first input's configs, stamped
/// with the latest step.
pub fn average_cmd(args: &AverageArgs) -> Result<(), CliError> {
    ensure_fresh(&args.out, args.force)?;
    let ckpts = args
        .inputs
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<Result<Vec<_>, _>>()?;
    let params = average_checkpoints(&ckpts)?;
    let first = ckpts.first().expect("checked non-empty");
    let merged = Checkpoint {
        step: ckpts.iter().map(|c| c.step).max().unwrap_or(0),
        dev_metric: None,
        adam: None,
        params,
        ..first.clone()
    };
    save_checkpoint(&args.out, &merged)
}
