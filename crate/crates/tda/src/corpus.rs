//! A corpus directory: `corpus.conf`, `vocab.txt`, one manifest per split
//! and, optionally, `features/` with one feature file per example.

use std::fs;
use std::path::{Path, PathBuf};

use tda_core::data::{corpus_vocab, synth_features, CorpusEntry, CorpusSpec, Split, TripletExample};
use tda_core::vocab::Vocabulary;
use tda_core::Tensor;

use crate::error::CliError;
use crate::formats::{
    decode_features, encode_features, parse_corpus_conf, parse_manifest, parse_vocab, read_text, write_corpus_conf,
    write_file, write_manifest, write_vocab, FeatureRef, ManifestEntry,
};

pub const CONF_FILE: &str = "corpus.conf";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const FEATURE_DIR: &str = "features";

pub fn manifest_file(split: Split) -> String {
    format!("{}.tsv", split.name())
}

pub fn parse_split(s: &str) -> Result<Split, CliError> {
    Split::ALL
        .into_iter()
        .find(|sp| sp.name() == s)
        .ok_or_else(|| CliError::Config(format!("unknown split {s:?} (train, dev or test)")))
}

/// Writes a generated corpus into `dir`. With `features` set, every
/// example's matrix is materialized under `features/` and the manifests
/// point at the files.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec, entries: &[CorpusEntry], features: bool) -> Result<(), CliError> {
    write_file(&dir.join(CONF_FILE), write_corpus_conf(spec))?;
    write_file(&dir.join(VOCAB_FILE), write_vocab(&corpus_vocab(entries)))?;
    for split in Split::ALL {
        let mut lines = Vec::new();
        for e in entries.iter().filter(|e| e.split == split) {
            let mut m = ManifestEntry::synthetic(e);
            if features {
                let rel = PathBuf::from(FEATURE_DIR).join(format!("{}.feat", e.id));
                let t = synth_features(&e.transcription, &spec.features, e.feature_seed)?;
                write_file(&dir.join(&rel), encode_features(&t))?;
                m.features = FeatureRef::File(rel);
            }
            lines.push(m);
        }
        write_file(&dir.join(manifest_file(split)), write_manifest(&lines))?;
    }
    Ok(())
}

/// A corpus directory read back from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub spec: CorpusSpec,
    pub vocab: Vocabulary,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self, CliError> {
        let conf = dir.join(CONF_FILE);
        let spec = parse_corpus_conf(&read_text(&conf)?, &conf)?;
        let vocab_path = dir.join(VOCAB_FILE);
        let vocab = parse_vocab(&read_text(&vocab_path)?, &vocab_path)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            spec,
            vocab,
        })
    }

    pub fn manifest(&self, split: Split) -> Result<Vec<ManifestEntry>, CliError> {
        let path = self.dir.join(manifest_file(split));
        parse_manifest(&read_text(&path)?, &path)
    }

    fn features(&self, m: &ManifestEntry) -> Result<Tensor<f32>, CliError> {
        let t = match &m.features {
            FeatureRef::Synthetic(seed) => synth_features(&m.transcription, &self.spec.features, *seed)?,
            FeatureRef::File(rel) => {
                let path = self.dir.join(rel);
                let bytes = fs::read(&path).map_err(|e| CliError::read(&path, e))?;
                decode_features(&bytes, &path)?
            }
        };
        if t.shape()[0] != m.frames || t.shape()[1] != self.spec.features.feat_dim {
            return Err(CliError::Config(format!(
                "{}: features are {:?}, manifest says {} frames of width {}",
                m.id,
                t.shape(),
                m.frames,
                self.spec.features.feat_dim
            )));
        }
        Ok(t)
    }

    /// Tokenized examples of one split with their features.
    pub fn examples(&self, split: Split) -> Result<Vec<TripletExample>, CliError> {
        self.manifest(split)?
            .iter()
            .map(|m| {
                Ok(TripletExample {
                    features: self.features(m)?,
                    id: m.id.clone(),
                    transcription: self.vocab.encode(&m.transcription),
                    translation: self.vocab.encode(&m.translation),
                })
            })
            .collect()
    }
}
