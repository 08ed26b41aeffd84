//! On-disk formats: manifests, vocabulary, corpus parameters, feature files,
//! checkpoints and the tab-separated logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use tda_core::data::{CorpusEntry, CorpusSpec, FeatureSpec};
use tda_core::decode::Decoded;
use tda_core::nn::ParamStore;
use tda_core::objective::LossBreakdown;
use tda_core::train::{AdamState, Checkpoint};
use tda_core::vocab::Vocabulary;
use tda_core::Tensor;

use crate::config::{model_from_kv, model_kv, parse_kv, train_from_kv, train_kv, write_kv};
use crate::error::CliError;

pub const FEATURE_MAGIC: &[u8; 8] = b"TDAFEAT1";
pub const FEATURE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"TDACKPT1";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn read_text(path: &Path) -> Result<String, CliError> {
    fs::read_to_string(path).map_err(|e| CliError::read(path, e))
}

pub fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

/// Where an example's features come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum FeatureRef {
    /// Regenerated from the transcription with this seed.
    Synthetic(u64),
    /// A feature file, relative paths resolved against the manifest.
    File(PathBuf),
}

impl std::fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            FeatureRef::Synthetic(s) => write!(f, "synthetic:{s}"),
            FeatureRef::File(p) => write!(f, "{}", p.display()),
        }
    }
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: usize,
    pub features: FeatureRef,
    pub transcription: String,
    pub translation: String,
}

impl ManifestEntry {
    pub fn synthetic(e: &CorpusEntry) -> Self {
        Self {
            id: e.id.clone(),
            frames: e.frames,
            features: FeatureRef::Synthetic(e.feature_seed),
            transcription: e.transcription.clone(),
            translation: e.translation.clone(),
        }
    }
}

pub fn write_manifest(entries: &[ManifestEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}",
            e.id, e.frames, e.features, e.transcription, e.translation
        );
    }
    out
}

pub fn parse_manifest(text: &str, path: &Path) -> Result<Vec<ManifestEntry>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |msg: &str| CliError::format(path, format!("line {}: {msg}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 {
                return Err(bad("expected 5 tab-separated fields"));
            }
            let frames = f[1].parse().map_err(|_| bad("frames is not a number"))?;
            let features = match f[2].strip_prefix("synthetic:") {
                Some(seed) => FeatureRef::Synthetic(seed.parse().map_err(|_| bad("bad synthetic seed"))?),
                None => FeatureRef::File(PathBuf::from(f[2])),
            };
            if f[3].is_empty() || f[4].is_empty() {
                return Err(bad("empty transcription or translation"));
            }
            Ok(ManifestEntry {
                id: f[0].to_string(),
                frames,
                features,
                transcription: f[3].to_string(),
                translation: f[4].to_string(),
            })
        })
        .collect()
}

/// One token per line; the line number is the id.
pub fn write_vocab(vocab: &Vocabulary) -> String {
    vocab.tokens().iter().map(|t| format!("{t}\n")).collect()
}

pub fn parse_vocab(text: &str, path: &Path) -> Result<Vocabulary, CliError> {
    let tokens = text.lines().map(str::to_string).collect();
    Vocabulary::from_tokens(tokens).map_err(|e| CliError::format(path, e.to_string()))
}

pub fn write_corpus_conf(spec: &CorpusSpec) -> String {
    let f = &spec.features;
    write_kv([
        ("n_examples", spec.n_examples.to_string()),
        ("min_words", spec.min_words.to_string()),
        ("max_words", spec.max_words.to_string()),
        ("word_len_min", spec.word_len.0.to_string()),
        ("word_len_max", spec.word_len.1.to_string()),
        ("lexicon_size", spec.lexicon_size.to_string()),
        ("max_frames", spec.max_frames.to_string()),
        ("seed", spec.seed.to_string()),
        ("feat_dim", f.feat_dim.to_string()),
        ("frames_per_char", f.frames_per_char.to_string()),
        ("noise", f.noise.to_string()),
        ("prototype_seed", f.prototype_seed.to_string()),
    ])
}

pub fn parse_corpus_conf(text: &str, path: &Path) -> Result<CorpusSpec, CliError> {
    let kv = parse_kv(text).map_err(|e| CliError::format(path, e))?;
    let get = |k: &str| -> Result<String, CliError> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| CliError::format(path, format!("missing {k}")))
    };
    macro_rules! num {
        ($k:expr) => {
            get($k)?
                .parse()
                .map_err(|_| CliError::format(path, format!("bad value for {}", $k)))?
        };
    }
    Ok(CorpusSpec {
        n_examples: num!("n_examples"),
        min_words: num!("min_words"),
        max_words: num!("max_words"),
        word_len: (num!("word_len_min"), num!("word_len_max")),
        lexicon_size: num!("lexicon_size"),
        max_frames: num!("max_frames"),
        seed: num!("seed"),
        features: FeatureSpec {
            feat_dim: num!("feat_dim"),
            frames_per_char: num!("frames_per_char"),
            noise: num!("noise"),
            prototype_seed: num!("prototype_seed"),
        },
    })
}

/// Little-endian reader over a byte buffer.
struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CliError::format(self.path, "truncated file"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f32s(&mut self, n: usize) -> Result<Vec<f32>, CliError> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| CliError::format(self.path, "size overflow"))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn push_u32(out: &mut Vec<u8>, x: usize) {
    out.extend_from_slice(&u32::try_from(x).expect("fits in u32").to_le_bytes());
}

/// Header (magic, version, frames, feat_dim) then row-major f32 values.
pub fn encode_features(t: &Tensor<f32>) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * t.numel());
    out.extend_from_slice(FEATURE_MAGIC);
    push_u32(&mut out, FEATURE_VERSION as usize);
    push_u32(&mut out, t.shape()[0]);
    push_u32(&mut out, t.shape()[1]);
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out
}

pub fn decode_features(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, CliError> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != FEATURE_MAGIC {
        return Err(CliError::format(path, "not a feature file"));
    }
    let version = r.u32()?;
    if version != FEATURE_VERSION {
        return Err(CliError::format(
            path,
            format!("unsupported feature file version {version}"),
        ));
    }
    let (frames, dim) = (r.u32()? as usize, r.u32()? as usize);
    let data = r.f32s(frames * dim)?;
    if !r.done() {
        return Err(CliError::format(path, "trailing bytes"));
    }
    Tensor::new(&[frames, dim], data).map_err(|e| CliError::format(path, e.to_string()))
}

fn push_blob(out: &mut Vec<u8>, name: &str, t: &Tensor<f32>) {
    push_u32(out, name.len());
    out.extend_from_slice(name.as_bytes());
    push_u32(out, t.rank());
    for &d in t.shape() {
        push_u32(out, d);
    }
    for x in t.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
}

const ADAM_M: &str = "adam.m.";
const ADAM_V: &str = "adam.v.";

/// Magic, version, length-prefixed `key=value` metadata, then one named
/// blob per parameter (and per Adam moment when present).
pub fn encode_checkpoint(c: &Checkpoint) -> Vec<u8> {
    let mut meta: Vec<(&str, String)> = model_kv(&c.model);
    meta.extend(train_kv(&c.train));
    meta.push(("step", c.step.to_string()));
    meta.push(("dev_metric", c.dev_metric.map_or("none".into(), |m| m.to_string())));
    meta.push((
        "adam_step",
        c.adam.as_ref().map_or("none".into(), |a| a.step.to_string()),
    ));
    let meta = write_kv(meta);
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut out, CHECKPOINT_VERSION as usize);
    push_u32(&mut out, meta.len());
    out.extend_from_slice(meta.as_bytes());
    for (name, t) in c.params.iter() {
        push_blob(&mut out, name, t);
    }
    if let Some(a) = &c.adam {
        for (name, t) in a.m.iter() {
            push_blob(&mut out, &format!("{ADAM_M}{name}"), t);
        }
        for (name, t) in a.v.iter() {
            push_blob(&mut out, &format!("{ADAM_V}{name}"), t);
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint, CliError> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(CliError::format(path, "not a checkpoint"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CliError::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = r.u32()? as usize;
    let meta = std::str::from_utf8(r.take(len)?).map_err(|_| CliError::format(path, "metadata is not UTF-8"))?;
    let kv: BTreeMap<String, String> = parse_kv(meta).map_err(|e| CliError::format(path, e))?;
    let bad = |e: String| CliError::format(path, e);
    let model = model_from_kv(&kv).map_err(bad)?;
    let train = train_from_kv(&kv).map_err(bad)?;
    let get = |k: &str| kv.get(k).map(String::as_str).unwrap_or("");
    let step = get("step").parse().map_err(|_| bad("bad step".into()))?;
    let dev_metric = match get("dev_metric") {
        "none" => None,
        v => Some(v.parse().map_err(|_| bad("bad dev_metric".into()))?),
    };
    let adam_step: Option<u64> = match get("adam_step") {
        "none" => None,
        v => Some(v.parse().map_err(|_| bad("bad adam_step".into()))?),
    };
    let (mut params, mut m, mut v) = (ParamStore::default(), ParamStore::default(), ParamStore::default());
    while !r.done() {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| bad("blob name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<_, _>>()?;
        let data = r.f32s(shape.iter().product())?;
        let t = Tensor::new(&shape, data).map_err(|e| bad(e.to_string()))?;
        if let Some(p) = name.strip_prefix(ADAM_M) {
            m.insert(p.to_string(), t);
        } else if let Some(p) = name.strip_prefix(ADAM_V) {
            v.insert(p.to_string(), t);
        } else {
            params.insert(name, t);
        }
    }
    params.check(&model).map_err(|e| bad(e.to_string()))?;
    let adam = adam_step.map(|step| AdamState { step, m, v });
    Ok(Checkpoint {
        model,
        train,
        step,
        dev_metric,
        params,
        adam,
    })
}

pub fn save_checkpoint(path: &Path, c: &Checkpoint) -> Result<(), CliError> {
    write_file(path, encode_checkpoint(c))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::read(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// `step nll_A nll_B kl_fwd kl_bwd total`
pub fn metric_line(step: u64, l: &LossBreakdown) -> String {
    format!(
        "{step}\t{}\t{}\t{}\t{}\t{}\n",
        l.nll_a, l.nll_b, l.kl_fwd, l.kl_bwd, l.total
    )
}

/// `id path score text`, or two text fields for full paths.
pub fn decode_line(id: &str, d: &Decoded, vocab: &Vocabulary) -> String {
    let mut line = format!("{id}\t{}\t{}\t{}", d.path.name(), d.score, vocab.decode(&d.first));
    if d.path.is_full() {
        line.push('\t');
        line.push_str(&vocab.decode(&d.second));
    }
    line.push('\n');
    line
}

/// One parsed decode output line.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodedLine {
    pub id: String,
    pub path: String,
    pub score: f64,
    pub first: String,
    pub second: Option<String>,
}

pub fn parse_decode_output(text: &str, path: &Path) -> Result<Vec<DecodedLine>, CliError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, line)| {
            let bad = |msg: &str| CliError::format(path, format!("line {}: {msg}", i + 1));
            let f: Vec<&str> = line.split('\t').collect();
            if !(f.len() == 4 || f.len() == 5) {
                return Err(bad("expected 4 or 5 tab-separated fields"));
            }
            Ok(DecodedLine {
                id: f[0].to_string(),
                path: f[1].to_string(),
                score: f[2].parse().map_err(|_| bad("bad score"))?,
                first: f[3].to_string(),
                second: f.get(4).map(|s| s.to_string()),
            })
        })
        .collect()
}

/// `key=value` lines, a blank line, then a header row and TSV rows.
pub fn write_report(pairs: &[(&str, String)], header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = write_kv(pairs.iter().map(|(k, v)| (*k, v.clone())));
    out.push('\n');
    out.push_str(&header.join("\t"));
    out.push('\n');
    for r in rows {
        out.push_str(&r.join("\t"));
        out.push('\n');
    }
    out
}

/// Splits a report into its metrics and table rows (header included).
pub fn parse_report(text: &str) -> (BTreeMap<String, String>, Vec<Vec<String>>) {
    let (head, table) = text.split_once("\n\n").unwrap_or((text, ""));
    let kv = parse_kv(head).unwrap_or_default();
    let rows = table
        .lines()
        .filter(|l| !l.is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect();
    (kv, rows)
}
