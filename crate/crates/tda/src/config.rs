//! `key=value` run configuration and the metadata encoding of configs.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use tda_core::data::AugmentSpec;
use tda_core::decode::{DecodePath, DecodeRequest};
use tda_core::nn::ModelConfig;
use tda_core::train::{AdamConfig, DevMetric, TrainConfig, TrainMode};

use crate::error::CliError;

/// Every key a run config may set, with its default.
pub const KEYS: &[(&str, &str)] = &[
    ("corpus", ""),
    ("init_from", ""),
    ("model", "toy"),
    ("d_model", ""),
    ("ffn_dim", ""),
    ("heads", ""),
    ("enc_layers", ""),
    ("dec_layers", ""),
    ("conv_layers", ""),
    ("conv_kernel", ""),
    ("conv_stride", ""),
    ("max_positions", ""),
    ("tie_embeddings", ""),
    ("init_decoder", "false"),
    ("mode", "train-tda"),
    ("peak_lr", "0.002"),
    ("warmup_steps", "500"),
    ("label_smoothing", "0.1"),
    ("dropout", "0.1"),
    ("lambda", "1"),
    ("max_steps", "5000"),
    ("max_epochs", "none"),
    ("seed", "1"),
    ("checkpoint_every", "500"),
    ("keep_best_k", "10"),
    ("grad_accum", "1"),
    ("token_budget", "2000"),
    ("dev_metric", "loss"),
    ("time_masks", "0"),
    ("time_width", "0"),
    ("feat_masks", "0"),
    ("feat_width", "0"),
    ("adam_beta1", "0.9"),
    ("adam_beta2", "0.98"),
    ("adam_eps", "1e-9"),
    ("beam_size", "5"),
    ("max_len", "auto"),
    ("length_normalize", "true"),
];

/// Environment variable consulted when no seed is configured.
pub const SEED_ENV: &str = "TDA_SEED";

/// Parses `key=value` lines. Blank lines and lines starting with `#` are
/// skipped; keys must be unique.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>, String> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", i + 1))?;
        let k = k.trim().to_string();
        if out.insert(k.clone(), v.trim().to_string()).is_some() {
            return Err(format!("line {}: duplicate key {k}", i + 1));
        }
    }
    Ok(out)
}

pub fn write_kv<'a>(pairs: impl IntoIterator<Item = (&'a str, String)>) -> String {
    pairs.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

fn value<T: FromStr>(key: &str, raw: &str) -> Result<T, String>
where
    T::Err: Display,
{
    raw.parse().map_err(|e| format!("{key}={raw}: {e}"))
}

/// A run configuration: file values unioned with command-line overrides.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    values: BTreeMap<String, String>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (k, v) in parse_kv(text).map_err(CliError::Config)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::read(path, e))?;
        Self::parse(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Sets a known key; later calls win.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        if !KEYS.iter().any(|(k, _)| *k == key) {
            return Err(CliError::Config(format!("unknown config key {key:?}")));
        }
        self.values.insert(key.to_string(), value.to_string());
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), CliError> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override {pair:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    /// Explicit value, else the default. Empty means unset.
    pub fn get(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .or_else(|| KEYS.iter().find(|(k, _)| *k == key).map(|(_, d)| *d))
            .unwrap_or("")
    }

    pub fn is_set(&self, key: &str) -> bool {
        self.values.contains_key(key)
    }

    fn typed<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        value(key, self.get(key)).map_err(CliError::Config)
    }

    fn optional<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        match self.get(key) {
            "" => Ok(None),
            _ => self.typed(key).map(Some),
        }
    }

    /// Fills `seed` from `TDA_SEED` when neither the file nor the command
    /// line set it.
    pub fn seed_from_env(&mut self) -> Result<(), CliError> {
        if !self.is_set("seed") {
            if let Ok(s) = std::env::var(SEED_ENV) {
                value::<u64>(SEED_ENV, &s).map_err(CliError::Config)?;
                self.set("seed", &s)?;
            }
        }
        Ok(())
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        Some(self.get(key)).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    /// Preset named by `model` with per-key overrides; vocabulary and
    /// feature sizes come from the corpus, dropout from the train section.
    pub fn model_config(&self, vocab_size: usize, feat_dim: usize) -> Result<ModelConfig, CliError> {
        let preset = self.get("model");
        let mut m = ModelConfig::preset(preset, vocab_size)
            .ok_or_else(|| CliError::Config(format!("unknown model preset {preset:?}")))?;
        macro_rules! over {
            ($($field:ident),*) => {$(
                if let Some(v) = self.optional(stringify!($field))? {
                    m.$field = v;
                }
            )*};
        }
        over!(
            d_model,
            ffn_dim,
            heads,
            enc_layers,
            dec_layers,
            conv_layers,
            conv_kernel,
            conv_stride,
            max_positions,
            tie_embeddings
        );
        m.feat_dim = feat_dim;
        m.dropout = self.typed("dropout")?;
        m.validate()?;
        Ok(m)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let mode = self.get("mode");
        let metric = self.get("dev_metric");
        let augment = AugmentSpec {
            time_masks: self.typed("time_masks")?,
            time_width: self.typed("time_width")?,
            feat_masks: self.typed("feat_masks")?,
            feat_width: self.typed("feat_width")?,
        };
        let cfg = TrainConfig {
            peak_lr: self.typed("peak_lr")?,
            warmup_steps: self.typed("warmup_steps")?,
            label_smoothing: self.typed("label_smoothing")?,
            dropout: self.typed("dropout")?,
            lambda: self.typed("lambda")?,
            max_steps: self.typed("max_steps")?,
            max_epochs: match self.get("max_epochs") {
                "none" | "" => None,
                _ => Some(self.typed("max_epochs")?),
            },
            seed: self.typed("seed")?,
            checkpoint_every: self.typed("checkpoint_every")?,
            keep_best_k: self.typed("keep_best_k")?,
            grad_accum: self.typed("grad_accum")?,
            mode: TrainMode::parse(mode).ok_or_else(|| CliError::Config(format!("unknown mode {mode:?}")))?,
            token_budget: self.typed("token_budget")?,
            augment: (augment != AugmentSpec::default()).then_some(augment),
            dev_metric: DevMetric::parse(metric)
                .ok_or_else(|| CliError::Config(format!("unknown dev_metric {metric:?}")))?,
            adam: AdamConfig {
                beta1: self.typed("adam_beta1")?,
                beta2: self.typed("adam_beta2")?,
                eps: self.typed("adam_eps")?,
            },
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decode_request(&self, path: DecodePath) -> Result<DecodeRequest, CliError> {
        let req = DecodeRequest {
            path,
            beam_size: self.typed("beam_size")?,
            max_len: match self.get("max_len") {
                "auto" | "" => None,
                _ => Some(self.typed("max_len")?),
            },
            length_normalize: self.typed("length_normalize")?,
        };
        if req.beam_size == 0 || req.max_len == Some(0) {
            return Err(CliError::Config("beam_size and max_len must be at least 1".into()));
        }
        Ok(req)
    }

    /// Every key with its effective value, one per line in key order.
    pub fn resolved(&self) -> String {
        let mut keys: Vec<&str> = KEYS.iter().map(|(k, _)| *k).collect();
        keys.sort_unstable();
        write_kv(keys.into_iter().map(|k| (k, self.get(k).to_string())))
    }
}

/// Model config as `model.*` metadata pairs.
pub fn model_kv(m: &ModelConfig) -> Vec<(&'static str, String)> {
    vec![
        ("model.d_model", m.d_model.to_string()),
        ("model.ffn_dim", m.ffn_dim.to_string()),
        ("model.heads", m.heads.to_string()),
        ("model.enc_layers", m.enc_layers.to_string()),
        ("model.dec_layers", m.dec_layers.to_string()),
        ("model.conv_layers", m.conv_layers.to_string()),
        ("model.conv_kernel", m.conv_kernel.to_string()),
        ("model.conv_stride", m.conv_stride.to_string()),
        ("model.dropout", m.dropout.to_string()),
        ("model.vocab_size", m.vocab_size.to_string()),
        ("model.feat_dim", m.feat_dim.to_string()),
        ("model.max_positions", m.max_positions.to_string()),
        ("model.tie_embeddings", m.tie_embeddings.to_string()),
    ]
}

/// Train config as `train.*` metadata pairs.
pub fn train_kv(t: &TrainConfig) -> Vec<(&'static str, String)> {
    let aug = t.augment.unwrap_or_default();
    vec![
        ("train.peak_lr", t.peak_lr.to_string()),
        ("train.warmup_steps", t.warmup_steps.to_string()),
        ("train.label_smoothing", t.label_smoothing.to_string()),
        ("train.dropout", t.dropout.to_string()),
        ("train.lambda", t.lambda.to_string()),
        ("train.max_steps", t.max_steps.to_string()),
        (
            "train.max_epochs",
            t.max_epochs.map_or("none".into(), |e| e.to_string()),
        ),
        ("train.seed", t.seed.to_string()),
        ("train.checkpoint_every", t.checkpoint_every.to_string()),
        ("train.keep_best_k", t.keep_best_k.to_string()),
        ("train.grad_accum", t.grad_accum.to_string()),
        ("train.mode", t.mode.name().into()),
        ("train.token_budget", t.token_budget.to_string()),
        ("train.augment", t.augment.is_some().to_string()),
        ("train.time_masks", aug.time_masks.to_string()),
        ("train.time_width", aug.time_width.to_string()),
        ("train.feat_masks", aug.feat_masks.to_string()),
        ("train.feat_width", aug.feat_width.to_string()),
        ("train.dev_metric", t.dev_metric.name().into()),
        ("train.adam_beta1", t.adam.beta1.to_string()),
        ("train.adam_beta2", t.adam.beta2.to_string()),
        ("train.adam_eps", t.adam.eps.to_string()),
    ]
}

fn field<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T, String>
where
    T::Err: Display,
{
    let raw = kv.get(key).ok_or_else(|| format!("missing {key}"))?;
    value(key, raw)
}

pub fn model_from_kv(kv: &BTreeMap<String, String>) -> Result<ModelConfig, String> {
    Ok(ModelConfig {
        d_model: field(kv, "model.d_model")?,
        ffn_dim: field(kv, "model.ffn_dim")?,
        heads: field(kv, "model.heads")?,
        enc_layers: field(kv, "model.enc_layers")?,
        dec_layers: field(kv, "model.dec_layers")?,
        conv_layers: field(kv, "model.conv_layers")?,
        conv_kernel: field(kv, "model.conv_kernel")?,
        conv_stride: field(kv, "model.conv_stride")?,
        dropout: field(kv, "model.dropout")?,
        vocab_size: field(kv, "model.vocab_size")?,
        feat_dim: field(kv, "model.feat_dim")?,
        max_positions: field(kv, "model.max_positions")?,
        tie_embeddings: field(kv, "model.tie_embeddings")?,
    })
}

pub fn train_from_kv(kv: &BTreeMap<String, String>) -> Result<TrainConfig, String> {
    let mode: String = field(kv, "train.mode")?;
    let metric: String = field(kv, "train.dev_metric")?;
    let epochs: String = field(kv, "train.max_epochs")?;
    let augmented: bool = field(kv, "train.augment")?;
    let augment = AugmentSpec {
        time_masks: field(kv, "train.time_masks")?,
        time_width: field(kv, "train.time_width")?,
        feat_masks: field(kv, "train.feat_masks")?,
        feat_width: field(kv, "train.feat_width")?,
    };
    Ok(TrainConfig {
        peak_lr: field(kv, "train.peak_lr")?,
        warmup_steps: field(kv, "train.warmup_steps")?,
        label_smoothing: field(kv, "train.label_smoothing")?,
        dropout: field(kv, "train.dropout")?,
        lambda: field(kv, "train.lambda")?,
        max_steps: field(kv, "train.max_steps")?,
        max_epochs: match epochs.as_str() {
            "none" => None,
            e => Some(value("train.max_epochs", e)?),
        },
        seed: field(kv, "train.seed")?,
        checkpoint_every: field(kv, "train.checkpoint_every")?,
        keep_best_k: field(kv, "train.keep_best_k")?,
        grad_accum: field(kv, "train.grad_accum")?,
        mode: TrainMode::parse(&mode).ok_or_else(|| format!("unknown mode {mode:?}"))?,
        token_budget: field(kv, "train.token_budget")?,
        augment: augmented.then_some(augment),
        dev_metric: DevMetric::parse(&metric).ok_or_else(|| format!("unknown dev metric {metric:?}"))?,
        adam: AdamConfig {
            beta1: field(kv, "train.adam_beta1")?,
            beta2: field(kv, "train.adam_beta2")?,
            eps: field(kv, "train.adam_eps")?,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_and_malformed_keys_rejected() {
        assert!(RunConfig::parse("lambda=0.5\n# note\n\nseed = 3\n").is_ok());
        assert!(matches!(RunConfig::parse("lamda=0.5"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("lambda"), Err(CliError::Config(_))));
        assert!(matches!(RunConfig::parse("seed=1\nseed=2"), Err(CliError::Config(_))));
    }

    #[test]
    fn overrides_and_defaults() {
        let mut c = RunConfig::parse("lambda=0.5\nmax_steps=10").unwrap();
        c.set_pair("lambda=0").unwrap();
        let t = c.train_config().unwrap();
        assert_eq!(t.lambda, 0.0);
        assert_eq!(t.max_steps, 10);
        assert_eq!(t.warmup_steps, 500);
        assert!(c.resolved().contains("lambda=0\n"));
        assert!(c.set_pair("nope=1").is_err());
        let m = c.model_config(30, 16).unwrap();
        assert_eq!((m.d_model, m.vocab_size, m.dropout), (64, 30, 0.1));
        c.set("mode", "sideways").unwrap();
        assert!(c.train_config().is_err());
    }

    #[test]
    fn metadata_round_trip() {
        let t = TrainConfig {
            augment: Some(AugmentSpec {
                time_masks: 2,
                time_width: 5,
                feat_masks: 1,
                feat_width: 3,
            }),
            max_epochs: Some(4),
            peak_lr: 0.0013,
            ..TrainConfig::default()
        };
        let m = ModelConfig::small(40);
        let kv: BTreeMap<String, String> = model_kv(&m)
            .into_iter()
            .chain(train_kv(&t))
            .map(|(k, v)| (k.to_string(), v))
            .collect();
        assert_eq!(model_from_kv(&kv).unwrap(), m);
        assert_eq!(train_from_kv(&kv).unwrap(), t);
    }
}
