//! Synthetic speech/transcription/translation triplets, augmentation and
//! token-budget batching.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::DataError;
use crate::nn::FeatureBatch;
use crate::objective::{build_dual_layouts, DualBatch};
use crate::rng::{derive_seed, rng};
use crate::tensor::{Real, Tensor};
use crate::vocab::{TokenId, Vocabulary};

/// Ciphers each word (`a` to `D`, rotating the alphabet by three into upper
/// case) and reverses the word order.
pub fn translate_rule(text: &str) -> Result<String, DataError> {
    let mut words = Vec::new();
    for word in text.split(' ') {
        let mut out = String::with_capacity(word.len());
        for c in word.chars() {
            if !c.is_ascii_lowercase() {
                return Err(DataError::Alphabet(c));
            }
            out.push((b'A' + (c as u8 - b'a' + 3) % 26) as char);
        }
        words.push(out);
    }
    words.reverse();
    Ok(words.join(" "))
}

/// Parameters of the synthetic acoustic front end.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FeatureSpec {
    pub feat_dim: usize,
    pub frames_per_char: usize,
    /// Standard deviation of the per-frame Gaussian noise.
    pub noise: f64,
    /// Seed of the character prototypes, shared by a whole corpus.
    pub prototype_seed: u64,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            feat_dim: 16,
            frames_per_char: 3,
            noise: 0.1,
            prototype_seed: 0x7da_5eed,
        }
    }
}

impl FeatureSpec {
    /// Unit-norm Gaussian direction for character `c`.
    pub fn prototype(&self, c: char) -> Vec<f64> {
        let mut r = rng(derive_seed(self.prototype_seed, c.encode_utf8(&mut [0; 4])));
        loop {
            let v: Vec<f64> = (0..self.feat_dim).map(|_| StandardNormal.sample(&mut r)).collect();
            let norm = Float::sqrt(v.iter().map(|x| x * x).sum::<f64>());
            if norm > 1e-12 {
                return v.into_iter().map(|x| x / norm).collect();
            }
        }
    }
}

/// `frames_per_char` noisy copies of each character's prototype, in order.
pub fn synth_features(text: &str, spec: &FeatureSpec, seed: u64) -> Result<Tensor<f32>, DataError> {
    if text.is_empty() {
        return Err(DataError::EmptyText);
    }
    let mut r = rng(seed);
    let n = text.chars().count() * spec.frames_per_char;
    let mut data = Vec::with_capacity(n * spec.feat_dim);
    for c in text.chars() {
        let proto = spec.prototype(c);
        for _ in 0..spec.frames_per_char {
            for &p in &proto {
                let e: f64 = StandardNormal.sample(&mut r);
                data.push((p + spec.noise * e) as f32);
            }
        }
    }
    Tensor::new(&[n, spec.feat_dim], data).map_err(|_| DataError::InvalidRange("zero feature dim".into()))
}

/// Corpus split.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

/// Parameters of [`gen_corpus`].
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_examples: usize,
    pub min_words: usize,
    pub max_words: usize,
    /// Inclusive word length range of the lexicon.
    pub word_len: (usize, usize),
    pub lexicon_size: usize,
    /// Examples longer than this many frames are redrawn.
    pub max_frames: usize,
    pub seed: u64,
    pub features: FeatureSpec,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_examples: 2000,
            min_words: 1,
            max_words: 3,
            word_len: (2, 4),
            lexicon_size: 200,
            max_frames: 300,
            seed: 1,
            features: FeatureSpec::default(),
        }
    }
}

const LEXICON_SEED: u64 = 0x1e_c0de;

/// One generated example; its features are a pure function of
/// `(transcription, feature_seed)` under the corpus [`FeatureSpec`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CorpusEntry {
    pub id: String,
    pub split: Split,
    pub transcription: String,
    pub translation: String,
    pub feature_seed: u64,
    pub frames: usize,
}

/// `size` distinct lowercase words with lengths in `word_len`, the same for
/// every corpus seed.
pub fn lexicon(size: usize, word_len: (usize, usize)) -> Result<Vec<String>, DataError> {
    let (lo, hi) = word_len;
    if lo == 0 || lo > hi {
        return Err(DataError::InvalidRange(format!("word lengths {lo}..={hi}")));
    }
    let capacity: f64 = (lo..=hi).map(|l| Float::powi(26.0f64, l as i32)).sum();
    if (size as f64) > capacity / 2.0 {
        return Err(DataError::InvalidRange(format!("{size} words of length {lo}..={hi}")));
    }
    let mut r = rng(derive_seed(LEXICON_SEED, &format!("{lo}-{hi}")));
    let mut seen = BTreeSet::new();
    let mut words = Vec::with_capacity(size);
    while words.len() < size {
        let len = r.random_range(lo..=hi);
        let w: String = (0..len).map(|_| r.random_range(b'a'..=b'z') as char).collect();
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }
    Ok(words)
}

/// Deterministic corpus of distinct sentences over a fixed lexicon, split
/// 90/5/5 into train/dev/test.
pub fn gen_corpus(spec: &CorpusSpec) -> Result<Vec<CorpusEntry>, DataError> {
    if spec.n_examples == 0 {
        return Err(DataError::InvalidRange("n_examples must be positive".into()));
    }
    if spec.min_words == 0 || spec.min_words > spec.max_words {
        return Err(DataError::InvalidRange(format!(
            "words per sentence {}..={}",
            spec.min_words, spec.max_words
        )));
    }
    if spec.features.frames_per_char == 0 || spec.features.feat_dim == 0 {
        return Err(DataError::InvalidRange("feature dims must be positive".into()));
    }
    let lex = lexicon(spec.lexicon_size, spec.word_len)?;
    let n_dev = spec.n_examples * 5 / 100;
    let n_test = spec.n_examples * 5 / 100;
    let n_train = spec.n_examples - n_dev - n_test;
    let mut r = rng(spec.seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(spec.n_examples);
    let mut attempts = 0usize;
    while out.len() < spec.n_examples {
        attempts += 1;
        if attempts > 100 * spec.n_examples + 1000 {
            return Err(DataError::InvalidRange(format!(
                "cannot draw {} distinct sentences of at most {} frames",
                spec.n_examples, spec.max_frames
            )));
        }
        let n_words = r.random_range(spec.min_words..=spec.max_words);
        let words: Vec<&str> = (0..n_words)
            .map(|_| lex[r.random_range(0..lex.len())].as_str())
            .collect();
        let text = words.join(" ");
        let frames = text.chars().count() * spec.features.frames_per_char;
        if frames > spec.max_frames || !seen.insert(text.clone()) {
            continue;
        }
        let i = out.len();
        let split = if i < n_train {
            Split::Train
        } else if i < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
        let id = format!("{}{:06}", split.name(), i);
        out.push(CorpusEntry {
            feature_seed: derive_seed(spec.seed, &id),
            translation: translate_rule(&text)?,
            transcription: text,
            id,
            split,
            frames,
        });
    }
    Ok(out)
}

/// Masking parameters of [`spec_augment`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct AugmentSpec {
    pub time_masks: usize,
    pub time_width: usize,
    pub feat_masks: usize,
    pub feat_width: usize,
}

/// Zeroes `time_masks` frame spans and `feat_masks` channel spans of a
/// `[frames, feat_dim]` matrix. Each width is uniform in `0..=max` (clipped
/// to the extent) and each start uniform over the positions where it fits.
pub fn spec_augment<R: Real>(features: &Tensor<R>, spec: &AugmentSpec, seed: u64) -> Tensor<R> {
    let mut out = features.clone();
    let [frames, dim] = [features.shape()[0], features.numel() / features.shape()[0]];
    let mut r = rng(seed);
    let data = out.data_mut();
    for _ in 0..spec.time_masks {
        let w = r.random_range(0..=spec.time_width.min(frames));
        let t0 = r.random_range(0..=frames - w);
        data[t0 * dim..(t0 + w) * dim].iter_mut().for_each(|x| *x = R::zero());
    }
    for _ in 0..spec.feat_masks {
        let w = r.random_range(0..=spec.feat_width.min(dim));
        let f0 = r.random_range(0..=dim - w);
        for row in data.chunks_mut(dim) {
            row[f0..f0 + w].iter_mut().for_each(|x| *x = R::zero());
        }
    }
    out
}

/// A tokenized example with materialized features.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletExample {
    pub id: String,
    /// `[frames, feat_dim]`
    pub features: Tensor<f32>,
    pub transcription: Vec<TokenId>,
    pub translation: Vec<TokenId>,
}

impl TripletExample {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    /// Length of each of the two decoder targets.
    pub fn target_len(&self) -> usize {
        self.transcription.len() + self.translation.len() + 2
    }

    /// Target tokens over both layouts, the unit of the batch budget.
    pub fn target_tokens(&self) -> usize {
        2 * self.target_len()
    }

    pub fn from_entry(entry: &CorpusEntry, vocab: &Vocabulary, spec: &FeatureSpec) -> Result<Self, DataError> {
        Ok(Self {
            id: entry.id.clone(),
            features: synth_features(&entry.transcription, spec, entry.feature_seed)?,
            transcription: vocab.encode(&entry.transcription),
            translation: vocab.encode(&entry.translation),
        })
    }
}

/// Vocabulary over every transcription and translation of `entries`.
pub fn corpus_vocab(entries: &[CorpusEntry]) -> Vocabulary {
    Vocabulary::from_texts(
        entries
            .iter()
            .flat_map(|e| [e.transcription.as_str(), e.translation.as_str()]),
    )
}

/// Tokenized examples with synthesized features for the entries of `split`.
pub fn split_examples(
    entries: &[CorpusEntry],
    split: Split,
    vocab: &Vocabulary,
    spec: &FeatureSpec,
) -> Result<Vec<TripletExample>, DataError> {
    entries
        .iter()
        .filter(|e| e.split == split)
        .map(|e| TripletExample::from_entry(e, vocab, spec))
        .collect()
}

/// Groups example indices into batches whose padded target size over both
/// layouts, `n * max_target_tokens`, stays within `budget`.
///
/// Examples are taken in order of frame count (ties by position) and a batch
/// is closed as soon as the next example would overflow it.
pub fn make_batches(examples: &[TripletExample], budget: usize) -> Result<Vec<Vec<usize>>, DataError> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.sort_by_key(|&i| (examples[i].frames(), i));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut longest = 0;
    for i in order {
        let len = examples[i].target_tokens();
        if len > budget {
            return Err(DataError::OverBudget {
                id: examples[i].id.clone(),
                tokens: len,
                budget,
            });
        }
        let grown = longest.max(len);
        if !current.is_empty() && (current.len() + 1) * grown > budget {
            batches.push(core::mem::take(&mut current));
            longest = 0;
        }
        longest = longest.max(len);
        current.push(i);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(batches)
}

/// Shuffles batch order for one epoch.
pub fn shuffle_batches(batches: &mut [Vec<usize>], seed: u64) {
    batches.shuffle(&mut rng(seed));
}

/// A collated batch ready for the model.
#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    pub dual: DualBatch<f32>,
}

/// Pads the selected examples into one batch, optionally masking features.
pub fn collate(
    examples: &[TripletExample],
    indices: &[usize],
    vocab_size: usize,
    augment: Option<(&AugmentSpec, u64)>,
) -> Result<Batch, DataError> {
    let mut feats = Vec::with_capacity(indices.len());
    let mut layouts = Vec::with_capacity(indices.len());
    for &i in indices {
        let e = &examples[i];
        feats.push(match augment {
            Some((spec, seed)) => spec_augment(&e.features, spec, derive_seed(seed, &e.id)),
            None => e.features.clone(),
        });
        layouts.push(build_dual_layouts(&e.transcription, &e.translation, vocab_size)?);
    }
    let refs: Vec<&Tensor<f32>> = feats.iter().collect();
    let features = FeatureBatch::from_examples(&refs).map_err(|e| DataError::InvalidRange(format!("{e}")))?;
    Ok(Batch {
        ids: indices.iter().map(|&i| examples[i].id.clone()).collect(),
        dual: DualBatch { features, layouts },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn cipher_examples() {
        assert_eq!(translate_rule("ab").unwrap(), "DE");
        assert_eq!(translate_rule("ab cd").unwrap(), "FG DE");
        assert_eq!(translate_rule("xyz").unwrap(), "ABC");
        assert_eq!(translate_rule("aB"), Err(DataError::Alphabet('B')));
    }

    #[test]
    fn features_shape_and_noiseless_frames() {
        let spec = FeatureSpec::default();
        assert_eq!(synth_features("abcd", &spec, 1).unwrap().shape(), &[12, 16]);
        let quiet = FeatureSpec { noise: 0.0, ..spec };
        let f = synth_features("ab", &quiet, 1).unwrap();
        let proto: Vec<f32> = quiet.prototype('b').iter().map(|&x| x as f32).collect();
        for t in 3..6 {
            assert_eq!(f.row(t), proto.as_slice());
        }
        assert!(synth_features("", &spec, 1).is_err());
    }

    #[test]
    fn corpus_split_sizes_and_determinism() {
        let spec = CorpusSpec::default();
        let a = gen_corpus(&spec).unwrap();
        let count = |s| a.iter().filter(|e| e.split == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Dev), count(Split::Test)),
            (1800, 100, 100)
        );
        assert_eq!(a, gen_corpus(&spec).unwrap());
        let ids: BTreeSet<&str> = a.iter().map(|e| e.id.as_str()).collect();
        assert_eq!(ids.len(), a.len());
        assert!(a
            .iter()
            .all(|e| e.frames == 3 * e.transcription.len() && e.frames <= 300));
    }

    #[test]
    fn augment_zero_masks_is_identity() {
        let f = synth_features("abc", &FeatureSpec::default(), 3).unwrap();
        assert_eq!(spec_augment(&f, &AugmentSpec::default(), 9), f);
    }

    #[test]
    fn budget_of_longest_gives_singletons_when_no_two_fit() {
        let spec = FeatureSpec::default();
        let ex: Vec<TripletExample> = ["abc", "abcd", "ab", "abc"]
            .iter()
            .enumerate()
            .map(|(i, t)| TripletExample {
                id: format!("{i}"),
                features: synth_features(t, &spec, i as u64).unwrap(),
                transcription: vec![5; t.len()],
                translation: vec![6; t.len()],
            })
            .collect();
        let longest = ex.iter().map(TripletExample::target_tokens).max().unwrap();
        let b = make_batches(&ex, longest).unwrap();
        assert_eq!(b, vec![vec![2], vec![0], vec![3], vec![1]]);
        assert_eq!(make_batches(&ex, usize::MAX).unwrap(), vec![vec![2, 0, 3, 1]]);
        assert!(matches!(
            make_batches(&ex, longest - 1),
            Err(DataError::OverBudget { .. })
        ));
    }

    #[test]
    fn noisy_frames_stay_near_prototypes() {
        let spec = FeatureSpec::default();
        let bound = 4.0 * spec.noise * (spec.feat_dim as f64).sqrt();
        let protos: Vec<Vec<f64>> = "abc".chars().map(|c| spec.prototype(c)).collect();
        let (mut within, mut total) = (0usize, 0usize);
        for seed in 0..1000 {
            let f = synth_features("abc", &spec, seed).unwrap();
            for t in 0..9 {
                let d2: f64 = f
                    .row(t)
                    .iter()
                    .zip(&protos[t / 3])
                    .map(|(&x, p)| (f64::from(x) - p).powi(2))
                    .sum();
                within += usize::from(d2.sqrt() < bound);
                total += 1;
            }
        }
        assert!(within as f64 / total as f64 > 0.999);
        assert_ne!(
            synth_features("abc", &spec, 1).unwrap(),
            synth_features("abc", &spec, 2).unwrap()
        );
    }

    #[test]
    fn augment_masks_spans_and_matches_expected_area() {
        let (frames, dim) = (30, 16);
        let ones = Tensor::<f32>::full(&[frames, dim], 1.0);
        let spec = AugmentSpec {
            time_masks: 1,
            time_width: 6,
            feat_masks: 1,
            feat_width: 4,
        };
        let mut zeroed = 0usize;
        for seed in 0..1000 {
            let out = spec_augment(&ones, &spec, seed);
            let zero_row: Vec<bool> = (0..frames).map(|t| out.row(t).iter().all(|&x| x == 0.0)).collect();
            let zero_col: Vec<bool> = (0..dim).map(|k| (0..frames).all(|t| out.row(t)[k] == 0.0)).collect();
            for t in 0..frames {
                for k in 0..dim {
                    let x = out.row(t)[k];
                    assert!(x == 0.0 || x == 1.0);
                    assert_eq!(x == 0.0, zero_row[t] || zero_col[k]);
                }
            }
            let runs = |v: &[bool]| v.windows(2).filter(|w| !w[0] && w[1]).count() + usize::from(v[0]);
            assert!(runs(&zero_row) <= 1 && runs(&zero_col) <= 1);
            zeroed += out.data().iter().filter(|&&x| x == 0.0).count();
        }
        // widths uniform on 0..=max: E[time share] = 3/30, E[channel share] = 2/16
        let expected = 1.0 - (1.0 - 3.0 / 30.0) * (1.0 - 2.0 / 16.0);
        let got = zeroed as f64 / (1000 * frames * dim) as f64;
        assert!((got - expected).abs() < 0.01, "{got} vs {expected}");
    }
}
