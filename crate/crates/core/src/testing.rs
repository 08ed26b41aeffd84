//! Hand-built scorers with known structure, for checking search and the
//! agreement objective without a trained model.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::data::{corpus_vocab, gen_corpus, split_examples, CorpusSpec, Split, TripletExample};
use crate::decode::{BeamHypothesis, StepScorer};
use crate::error::{DataError, DecodeError};
use crate::nn::ModelConfig;
use crate::rng::{derive_seed, rng};
use crate::vocab::{is_tag, TokenId, Vocabulary, EOS, PAD, TO_SRC, TO_TGT};

fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&l| (l - m).exp()).sum();
    let lz = m + z.ln();
    logits.iter().map(|&l| l - lz).collect()
}

fn key(tokens: &[TokenId]) -> alloc::string::String {
    tokens.iter().map(|t| alloc::format!("{t},")).collect()
}

/// A scorer whose next-token distribution depends only on the language of
/// the current segment and the tokens emitted since its tag. Both decoding
/// orders therefore assign identical conditionals to every content token.
#[derive(Clone, Debug)]
pub struct ContextBlindStub {
    pub vocab_size: usize,
    pub seed: u64,
    /// Logit bonus per emitted token for leaving the segment.
    pub stop_pull: f64,
    pub calls: usize,
}

impl ContextBlindStub {
    pub fn new(vocab_size: usize, seed: u64) -> Self {
        Self {
            vocab_size,
            seed,
            stop_pull: 0.8,
            calls: 0,
        }
    }

    /// Next-token log-probabilities after `prefix`.
    pub fn next(&self, prefix: &[TokenId]) -> Vec<f64> {
        let start = prefix.iter().rposition(|&t| is_tag(t)).unwrap_or(0);
        let lang = prefix.get(start).copied().unwrap_or(TO_TGT);
        let within = &prefix[(start + 1).min(prefix.len())..];
        let mut r = rng(derive_seed(self.seed, &alloc::format!("{lang}|{}", key(within))));
        let mut logits: Vec<f64> = (0..self.vocab_size).map(|_| r.random_range(-2.0..2.0)).collect();
        logits[PAD as usize] = -30.0;
        let pull = self.stop_pull * within.len() as f64;
        for t in [EOS, TO_SRC, TO_TGT] {
            logits[t as usize] += pull - 1.0;
        }
        log_softmax(&logits)
    }

    /// Teacher-forced rows for every position of `input`, flattened.
    pub fn teacher_forced(&self, input: &[TokenId]) -> Vec<f64> {
        (1..=input.len()).flat_map(|t| self.next(&input[..t])).collect()
    }
}

impl StepScorer for ContextBlindStub {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, DecodeError> {
        self.calls += 1;
        Ok(prefixes.iter().map(|p| self.next(p)).collect())
    }
}

/// Random log-probabilities keyed by the whole prefix, with `boost` added
/// to the logit of the next token of `path` while the prefix follows it.
#[derive(Clone, Debug)]
pub struct PlantedPathStub {
    pub vocab_size: usize,
    pub seed: u64,
    /// Emitted tokens of the favoured hypothesis.
    pub path: Vec<TokenId>,
    pub boost: f64,
}

impl PlantedPathStub {
    pub fn next(&self, prefix: &[TokenId]) -> Vec<f64> {
        let mut r = rng(derive_seed(self.seed, &key(prefix)));
        let mut logits: Vec<f64> = (0..self.vocab_size).map(|_| r.random_range(-1.5..1.5)).collect();
        let emitted = &prefix[1..];
        if emitted.len() < self.path.len() && self.path.starts_with(emitted) {
            logits[self.path[emitted.len()] as usize] += self.boost;
        }
        log_softmax(&logits)
    }
}

impl StepScorer for PlantedPathStub {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_logprobs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, DecodeError> {
        Ok(prefixes.iter().map(|p| self.next(p)).collect())
    }
}

/// Best complete hypothesis by enumerating every token sequence that ends
/// in a stop token within `max_len` tokens or runs to `max_len`. Ties go
/// to the lexicographically smaller sequence.
pub fn exhaustive_best(
    next: &dyn Fn(&[TokenId]) -> Vec<f64>,
    start_tag: TokenId,
    stop_tokens: &[TokenId],
    max_len: usize,
    banned: &[TokenId],
    length_normalize: bool,
) -> BeamHypothesis {
    let mut best: Option<(f64, BeamHypothesis)> = None;
    let mut stack = vec![(vec![start_tag], 0.0)];
    while let Some((tokens, score)) = stack.pop() {
        let lp = next(&tokens);
        for (v, &l) in lp.iter().enumerate() {
            let v = v as TokenId;
            if banned.contains(&v) || l == f64::NEG_INFINITY {
                continue;
            }
            let mut t = tokens.clone();
            t.push(v);
            let s = score + l;
            let done = stop_tokens.contains(&v) || t.len() > max_len;
            if !done {
                stack.push((t, s));
                continue;
            }
            let h = BeamHypothesis {
                tokens: t,
                score: s,
                finished: true,
                reason: None,
            };
            let rank = h.rank_score(length_normalize);
            let wins = match &best {
                None => true,
                Some((br, bh)) => rank > *br || (rank == *br && h.tokens < bh.tokens),
            };
            if wins {
                best = Some((rank, h));
            }
        }
    }
    best.expect("at least one sequence").1
}

/// A one-layer, 16-wide model that trains in milliseconds per step.
pub fn tiny_config(vocab_size: usize) -> ModelConfig {
    ModelConfig {
        d_model: 16,
        ffn_dim: 32,
        heads: 2,
        enc_layers: 1,
        dec_layers: 1,
        dropout: 0.0,
        ..ModelConfig::toy(vocab_size)
    }
}

/// Small corpus of one- and two-word sentences over a 20-word lexicon.
pub fn tiny_spec(n_examples: usize, seed: u64) -> CorpusSpec {
    CorpusSpec {
        n_examples,
        max_words: 2,
        word_len: (2, 3),
        lexicon_size: 20,
        seed,
        ..CorpusSpec::default()
    }
}

/// Vocabulary and the train and dev examples of a generated corpus.
pub fn task(spec: &CorpusSpec) -> Result<(Vocabulary, Vec<TripletExample>, Vec<TripletExample>), DataError> {
    let corpus = gen_corpus(spec)?;
    let vocab = corpus_vocab(&corpus);
    let train = split_examples(&corpus, Split::Train, &vocab, &spec.features)?;
    let dev = split_examples(&corpus, Split::Dev, &vocab, &spec.features)?;
    Ok((vocab, train, dev))
}
