//! Tag-switched beam search over either decoding order.

use alloc::vec;
use alloc::vec::Vec;

use crate::autograd::Tape;
use crate::error::DecodeError;
use crate::nn::{repeat_memory, BoundParams, Dropout, FeatureBatch, Memory, Model, ParamStore, TokenBatch};
use crate::tensor::Tensor;
use crate::vocab::{is_special, is_tag, TokenId, EOS, PAD, TO_SRC, TO_TGT, UNK};

/// Source of next-token log-probabilities. One call is one decoder step.
pub trait StepScorer {
    fn vocab_size(&self) -> usize;

    /// Log-probabilities of the next token after each prefix. All prefixes
    /// have the same length and start with the path tag.
    fn next_logprobs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, DecodeError>;
}

/// Why a hypothesis stopped growing.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Termination {
    /// Emitted a language tag listed as a stop token.
    StopTag,
    Eos,
    MaxLen,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamHypothesis {
    /// Start tag followed by every emitted token.
    pub tokens: Vec<TokenId>,
    /// Sum of the chosen tokens' log-probabilities.
    pub score: f64,
    pub finished: bool,
    pub reason: Option<Termination>,
}

impl BeamHypothesis {
    pub fn emitted(&self) -> &[TokenId] {
        &self.tokens[1..]
    }

    /// Score used for the final ranking.
    pub fn rank_score(&self, length_normalize: bool) -> f64 {
        if length_normalize {
            self.score / self.emitted().len().max(1) as f64
        } else {
            self.score
        }
    }
}

/// Search settings shared by every path.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchConfig {
    pub beam_size: usize,
    /// Most tokens emitted after the start tag.
    pub max_len: usize,
    pub length_normalize: bool,
    /// Tokens the search never emits.
    pub banned: Vec<TokenId>,
}

/// Best hypothesis and the number of decoder steps spent.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub best: BeamHypothesis,
    pub steps: usize,
}

/// Higher score first, then the lexicographically smaller sequence.
fn better(a: (f64, &[TokenId]), b: (f64, &[TokenId])) -> core::cmp::Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(b.1))
}

/// Beam search from `start_tag` until every kept hypothesis emits a stop
/// token or reaches `max_len` tokens.
///
/// Each step keeps the best `beam_size` unfinished extensions by raw
/// cumulative score. Stop tokens and max-length hits among the top
/// `beam_size` candidates join a pool of the `beam_size` best finished
/// hypotheses by [`BeamHypothesis::rank_score`]. The search ends when the
/// pool is full and no live hypothesis, ended now, would outrank its worst
/// member, so a beam of one is greedy decoding.
pub fn beam_search(
    scorer: &mut impl StepScorer,
    start_tag: TokenId,
    stop_tokens: &[TokenId],
    cfg: &SearchConfig,
) -> Result<SearchOutcome, DecodeError> {
    if cfg.beam_size == 0 {
        return Err(DecodeError::BeamSize);
    }
    if cfg.max_len == 0 {
        return Err(DecodeError::MaxLen);
    }
    if stop_tokens.is_empty() {
        return Err(DecodeError::NoStopTokens);
    }
    if !is_tag(start_tag) {
        return Err(DecodeError::StartTag(start_tag));
    }
    let vocab = scorer.vocab_size();
    let mut active = vec![BeamHypothesis {
        tokens: vec![start_tag],
        score: 0.0,
        finished: false,
        reason: None,
    }];
    let norm = cfg.length_normalize;
    // best first, at most `beam_size`
    let mut finished: Vec<BeamHypothesis> = Vec::new();
    let mut steps = 0;
    while !active.is_empty() {
        let prefixes: Vec<&[TokenId]> = active.iter().map(|h| h.tokens.as_slice()).collect();
        let lps = scorer.next_logprobs(&prefixes)?;
        steps += 1;
        let mut cands: Vec<(f64, usize, TokenId)> = Vec::with_capacity(active.len() * vocab);
        for (parent, (h, lp)) in active.iter().zip(&lps).enumerate() {
            for (v, &l) in lp.iter().enumerate() {
                let v = v as TokenId;
                if l == f64::NEG_INFINITY || cfg.banned.contains(&v) {
                    continue;
                }
                cands.push((h.score + l, parent, v));
            }
        }
        let seq = |&(_, parent, v): &(f64, usize, TokenId)| {
            let mut t = active[parent].tokens.clone();
            t.push(v);
            t
        };
        let mut ranked: Vec<(f64, Vec<TokenId>)> = cands.iter().map(|c| (c.0, seq(c))).collect();
        ranked.sort_by(|a, b| better((a.0, &a.1), (b.0, &b.1)));
        let mut next = Vec::with_capacity(cfg.beam_size);
        for (rank, (score, tokens)) in ranked.into_iter().enumerate() {
            if next.len() == cfg.beam_size {
                break;
            }
            let last = *tokens.last().expect("non-empty");
            let reason = if stop_tokens.contains(&last) {
                Some(if last == EOS {
                    Termination::Eos
                } else {
                    Termination::StopTag
                })
            } else if tokens.len() > cfg.max_len {
                Some(Termination::MaxLen)
            } else {
                None
            };
            let h = BeamHypothesis {
                tokens,
                score,
                finished: reason.is_some(),
                reason,
            };
            if !h.finished {
                next.push(h);
            } else if rank < cfg.beam_size {
                finished.push(h);
                finished.sort_by(|a, b| better((a.rank_score(norm), &a.tokens), (b.rank_score(norm), &b.tokens)));
                finished.truncate(cfg.beam_size);
            }
        }
        if next.is_empty() && finished.is_empty() {
            return Err(DecodeError::NoCandidates);
        }
        if finished.len() == cfg.beam_size {
            let worst = finished[finished.len() - 1].rank_score(norm);
            if next.iter().all(|h| h.rank_score(norm) <= worst) {
                break;
            }
        }
        active = next;
    }
    let best = finished
        .into_iter()
        .next()
        .expect("search ends with a finished hypothesis");
    Ok(SearchOutcome { best, steps })
}

/// Which decoding order to run and where to stop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodePath {
    /// Translation only: starts at `<2tgt>`, stops at `<2src>` or `</s>`.
    St,
    /// Transcription only: starts at `<2src>`, stops at `<2tgt>` or `</s>`.
    Asr,
    /// Translation then transcription, until `</s>`.
    FullStBt,
    /// Transcription then translation, until `</s>`.
    FullAsrMt,
}

impl DecodePath {
    pub const ALL: [DecodePath; 4] = [
        DecodePath::St,
        DecodePath::Asr,
        DecodePath::FullStBt,
        DecodePath::FullAsrMt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecodePath::St => "st",
            DecodePath::Asr => "asr",
            DecodePath::FullStBt => "full-st-bt",
            DecodePath::FullAsrMt => "full-asr-mt",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.name() == s)
    }

    pub fn start_tag(self) -> TokenId {
        match self {
            DecodePath::St | DecodePath::FullStBt => TO_TGT,
            DecodePath::Asr | DecodePath::FullAsrMt => TO_SRC,
        }
    }

    /// The tag that introduces the other language.
    pub fn switch_tag(self) -> TokenId {
        if self.start_tag() == TO_TGT {
            TO_SRC
        } else {
            TO_TGT
        }
    }

    pub fn stop_tokens(self) -> Vec<TokenId> {
        match self {
            DecodePath::St | DecodePath::Asr => vec![self.switch_tag(), EOS],
            DecodePath::FullStBt | DecodePath::FullAsrMt => vec![EOS],
        }
    }

    pub fn is_full(self) -> bool {
        matches!(self, DecodePath::FullStBt | DecodePath::FullAsrMt)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecodeRequest {
    pub path: DecodePath,
    pub beam_size: usize,
    /// Defaults to twice the encoder length plus ten.
    pub max_len: Option<usize>,
    pub length_normalize: bool,
}

impl DecodeRequest {
    pub fn new(path: DecodePath) -> Self {
        Self {
            path,
            beam_size: 5,
            max_len: None,
            length_normalize: true,
        }
    }

    pub fn greedy(path: DecodePath) -> Self {
        Self {
            beam_size: 1,
            ..Self::new(path)
        }
    }
}

/// Result of one decode.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub path: DecodePath,
    /// Every token emitted after the start tag, including tags and `</s>`.
    pub emitted: Vec<TokenId>,
    /// Content tokens of the first language (the only one for single paths).
    pub first: Vec<TokenId>,
    /// Content tokens after the switch tag (full paths only).
    pub second: Vec<TokenId>,
    /// Sum of log-probabilities of all emitted tokens.
    pub score: f64,
    pub steps: usize,
    pub reason: Termination,
    /// No content token in `first`.
    pub empty: bool,
    /// Full path ended without the switch tag.
    pub missing_tag: bool,
}

/// Runs the search for `req.path` and splits the output into segments.
pub fn decode_with(
    scorer: &mut impl StepScorer,
    req: &DecodeRequest,
    default_max_len: usize,
) -> Result<Decoded, DecodeError> {
    let path = req.path;
    let cfg = SearchConfig {
        beam_size: req.beam_size,
        max_len: req.max_len.unwrap_or(default_max_len),
        length_normalize: req.length_normalize,
        banned: vec![PAD, UNK, path.start_tag()],
    };
    let out = beam_search(scorer, path.start_tag(), &path.stop_tokens(), &cfg)?;
    let emitted = out.best.emitted().to_vec();
    let content = |s: &[TokenId]| s.iter().copied().filter(|&t| !is_special(t)).collect::<Vec<_>>();
    let (first, second, missing_tag) = if path.is_full() {
        match emitted.iter().position(|&t| t == path.switch_tag()) {
            Some(i) => (content(&emitted[..i]), content(&emitted[i + 1..]), false),
            None => (content(&emitted), Vec::new(), true),
        }
    } else {
        (content(&emitted), Vec::new(), false)
    };
    Ok(Decoded {
        path,
        empty: first.is_empty(),
        emitted,
        first,
        second,
        score: out.best.score,
        steps: out.steps,
        reason: out.best.reason.unwrap_or(Termination::MaxLen),
        missing_tag,
    })
}

/// Scores prefixes with the trained model for one utterance. The encoder
/// runs once; each step re-runs the decoder over the full prefixes.
pub struct ModelScorer<'m> {
    model: &'m Model,
    tape: Tape<f32>,
    params: BoundParams,
    memory: Memory,
    mark: usize,
}

impl<'m> ModelScorer<'m> {
    pub fn new(model: &'m Model, params: &ParamStore<f32>, features: &Tensor<f32>) -> Result<Self, DecodeError> {
        if features.rank() != 2 || features.shape()[0] == 0 {
            return Err(DecodeError::EmptyMemory);
        }
        let mut tape = Tape::new();
        let params = BoundParams::bind(&mut tape, params, false);
        let batch = FeatureBatch::from_examples(&[features])?;
        let memory = model.encode(&mut tape, &params, &batch, &mut Dropout::disabled())?;
        let mark = tape.len();
        Ok(Self {
            model,
            tape,
            params,
            memory,
            mark,
        })
    }

    /// Encoder positions after down-sampling.
    pub fn memory_len(&self) -> usize {
        self.memory.lengths[0]
    }

    /// `2 * memory_len + 10`.
    pub fn default_max_len(&self) -> usize {
        2 * self.memory_len() + 10
    }

    /// Teacher-forced log-probabilities of every position of `input`,
    /// `[input.len(), vocab]` flattened.
    pub fn teacher_forced(&mut self, input: &[TokenId]) -> Result<Vec<f64>, DecodeError> {
        self.tape.truncate(self.mark);
        let tokens = TokenBatch::from_rows(&[input], PAD);
        let lp = self.model.decode(
            &mut self.tape,
            &self.params,
            &self.memory,
            &tokens,
            &mut Dropout::disabled(),
        )?;
        Ok(self.tape.value(lp).to_f64_vec())
    }
}

impl StepScorer for ModelScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_logprobs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, DecodeError> {
        self.tape.truncate(self.mark);
        let n = prefixes.len();
        let len = prefixes.first().map_or(0, |p| p.len());
        let memory = if n == 1 {
            self.memory.clone()
        } else {
            repeat_memory(&mut self.tape, &self.memory, &[n])?
        };
        let tokens = TokenBatch::from_rows(prefixes, PAD);
        let lp = self
            .model
            .decode(&mut self.tape, &self.params, &memory, &tokens, &mut Dropout::disabled())?;
        let v = self.vocab_size();
        let data = self.tape.value(lp).data();
        Ok((0..n)
            .map(|b| {
                let r = b * len + len - 1;
                data[r * v..(r + 1) * v].iter().map(|&x| f64::from(x)).collect()
            })
            .collect())
    }
}

/// Decodes one utterance along `req.path` with the model.
pub fn decode_features(
    model: &Model,
    params: &ParamStore<f32>,
    features: &Tensor<f32>,
    req: &DecodeRequest,
) -> Result<Decoded, DecodeError> {
    let mut scorer = ModelScorer::new(model, params, features)?;
    let max_len = scorer.default_max_len();
    decode_with(&mut scorer, req, max_len)
}

/// Translation via the ST-BT order, stopping at `<2src>`.
pub fn decode_st(
    model: &Model,
    params: &ParamStore<f32>,
    features: &Tensor<f32>,
    req: &DecodeRequest,
) -> Result<Decoded, DecodeError> {
    decode_features(
        model,
        params,
        features,
        &DecodeRequest {
            path: DecodePath::St,
            ..req.clone()
        },
    )
}

/// Transcription via the ASR-MT order, stopping at `<2tgt>`.
pub fn decode_asr(
    model: &Model,
    params: &ParamStore<f32>,
    features: &Tensor<f32>,
    req: &DecodeRequest,
) -> Result<Decoded, DecodeError> {
    decode_features(
        model,
        params,
        features,
        &DecodeRequest {
            path: DecodePath::Asr,
            ..req.clone()
        },
    )
}

/// Both segments in the requested order, until `</s>`.
pub fn decode_full(
    model: &Model,
    params: &ParamStore<f32>,
    features: &Tensor<f32>,
    req: &DecodeRequest,
) -> Result<Decoded, DecodeError> {
    if !req.path.is_full() {
        return Err(DecodeError::NotFullPath(req.path.name()));
    }
    decode_features(model, params, features, req)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng;
    use crate::testing::{exhaustive_best, ContextBlindStub, PlantedPathStub};
    use rand::Rng as _;

    fn greedy(
        next: &dyn Fn(&[TokenId]) -> Vec<f64>,
        start: TokenId,
        stops: &[TokenId],
        max_len: usize,
        banned: &[TokenId],
    ) -> Vec<TokenId> {
        let mut t = vec![start];
        while t.len() - 1 < max_len {
            let lp = next(&t);
            let mut best = None;
            for (v, &l) in lp.iter().enumerate() {
                if banned.contains(&(v as TokenId)) {
                    continue;
                }
                if best.is_none_or(|(_, bl)| l > bl) {
                    best = Some((v as TokenId, l));
                }
            }
            let v = best.unwrap().0;
            t.push(v);
            if stops.contains(&v) {
                break;
            }
        }
        t
    }

    fn cfg(beam_size: usize, max_len: usize, banned: Vec<TokenId>) -> SearchConfig {
        SearchConfig {
            beam_size,
            max_len,
            length_normalize: true,
            banned,
        }
    }

    #[test]
    fn beam_one_is_greedy() {
        for seed in 0..50 {
            let mut stub = ContextBlindStub::new(9, seed);
            let banned = vec![PAD, UNK, TO_TGT];
            let stops = [TO_SRC, EOS];
            let out = beam_search(&mut stub, TO_TGT, &stops, &cfg(1, 12, banned.clone())).unwrap();
            let s2 = stub.clone();
            assert_eq!(out.best.tokens, greedy(&|p| s2.next(p), TO_TGT, &stops, 12, &banned));
        }
    }

    #[test]
    fn planted_path_found_for_any_beam() {
        let mut r = rng(77);
        for case in 0..100 {
            // the search core treats ids generically, so any non-stop id is content here
            let vocab = r.random_range(3..=6) as TokenId;
            let max_len = r.random_range(1..=4);
            let content: Vec<TokenId> = (0..max_len - 1)
                .map(|_| loop {
                    let v = r.random_range(0..vocab);
                    if v != EOS {
                        break v;
                    }
                })
                .collect();
            let mut path = content;
            path.push(EOS);
            let stub = PlantedPathStub {
                vocab_size: vocab as usize,
                seed: case,
                path: path.clone(),
                boost: 6.0,
            };
            let banned: [TokenId; 0] = [];
            let oracle = exhaustive_best(&|p| stub.next(p), TO_SRC, &[EOS], max_len, &banned, true);
            assert_eq!(oracle.emitted(), &path[..]);
            for beam in 1..=5 {
                let out = beam_search(&mut stub.clone(), TO_SRC, &[EOS], &cfg(beam, max_len, banned.to_vec())).unwrap();
                assert_eq!(out.best.tokens, oracle.tokens, "case {case} beam {beam}");
                assert!((out.best.score - oracle.score).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn termination_contract() {
        for seed in 0..30 {
            let mut stub = ContextBlindStub::new(8, seed);
            stub.stop_pull = 0.1;
            for beam in [1, 3, 5] {
                let out = beam_search(&mut stub, TO_TGT, &[EOS], &cfg(beam, 6, vec![PAD, UNK, TO_TGT])).unwrap();
                let h = out.best;
                let last = *h.tokens.last().unwrap();
                assert!(last == EOS || h.emitted().len() == 6);
                assert!(h.finished);
                assert_eq!(h.reason == Some(Termination::MaxLen), last != EOS);
                // every non-final token is not a stop token
                assert!(!h.emitted()[..h.emitted().len() - 1].contains(&EOS));
            }
        }
    }

    #[test]
    fn argument_errors() {
        let mut stub = ContextBlindStub::new(8, 0);
        assert_eq!(
            beam_search(&mut stub, TO_TGT, &[EOS], &cfg(0, 5, vec![])),
            Err(DecodeError::BeamSize)
        );
        assert_eq!(
            beam_search(&mut stub, TO_TGT, &[EOS], &cfg(1, 0, vec![])),
            Err(DecodeError::MaxLen)
        );
        assert_eq!(
            beam_search(&mut stub, TO_TGT, &[], &cfg(1, 5, vec![])),
            Err(DecodeError::NoStopTokens)
        );
        assert_eq!(
            beam_search(&mut stub, 7, &[EOS], &cfg(1, 5, vec![])),
            Err(DecodeError::StartTag(7))
        );
        assert_eq!(DecodePath::parse("full-asr-mt"), Some(DecodePath::FullAsrMt));
        assert_eq!(DecodePath::parse("x"), None);
    }

    #[test]
    fn early_stop_matches_full_segment() {
        for seed in 0..40 {
            for (single, full) in [
                (DecodePath::St, DecodePath::FullStBt),
                (DecodePath::Asr, DecodePath::FullAsrMt),
            ] {
                let mut stub = ContextBlindStub::new(10, seed);
                let s = decode_with(&mut stub, &DecodeRequest::greedy(single), 20).unwrap();
                assert_eq!(stub.calls, s.steps);
                let mut stub = ContextBlindStub::new(10, seed);
                let f = decode_with(&mut stub, &DecodeRequest::greedy(full), 20).unwrap();
                assert_eq!(s.first, f.first);
                assert!(!s.emitted.contains(&TO_SRC) || single == DecodePath::St);
                assert!(s.first.iter().all(|&t| !is_tag(t)));
                if s.reason != Termination::MaxLen {
                    assert_eq!(s.steps, s.first.len() + 1);
                }
            }
        }
    }

    #[test]
    fn split_segments() {
        // scorer that spells y1, <2src>, z1, </s>
        struct Script(Vec<TokenId>);
        impl StepScorer for Script {
            fn vocab_size(&self) -> usize {
                8
            }
            fn next_logprobs(&mut self, prefixes: &[&[TokenId]]) -> Result<Vec<Vec<f64>>, DecodeError> {
                Ok(prefixes
                    .iter()
                    .map(|p| {
                        let want = self.0.get(p.len() - 1).copied().unwrap_or(EOS);
                        (0..8).map(|v| if v == want { -0.1 } else { -5.0 }).collect()
                    })
                    .collect())
            }
        }
        let mut s = Script(vec![5, TO_SRC, 6, EOS]);
        let d = decode_with(&mut s, &DecodeRequest::new(DecodePath::FullStBt), 10).unwrap();
        assert_eq!((d.first.clone(), d.second.clone()), (vec![5], vec![6]));
        assert!(!d.missing_tag);
        assert!((d.score + 0.4).abs() < 1e-12);
        let mut s = Script(vec![5, 6, EOS]);
        let d = decode_with(&mut s, &DecodeRequest::new(DecodePath::FullStBt), 10).unwrap();
        assert!(d.missing_tag);
        assert!(d.second.is_empty());
        let mut s = Script(vec![EOS]);
        let d = decode_with(&mut s, &DecodeRequest::new(DecodePath::St), 10).unwrap();
        assert!(d.empty);
    }

    #[test]
    fn score_matches_teacher_forcing() {
        for seed in 0..30 {
            for path in DecodePath::ALL {
                let mut stub = ContextBlindStub::new(9, seed);
                let d = decode_with(&mut stub, &DecodeRequest::new(path), 15).unwrap();
                let mut input = vec![path.start_tag()];
                input.extend(&d.emitted[..d.emitted.len() - 1]);
                let lp = stub.teacher_forced(&input);
                let rescored: f64 = d.emitted.iter().enumerate().map(|(t, &v)| lp[t * 9 + v as usize]).sum();
                assert!((rescored - d.score).abs() < 1e-9);
            }
        }
    }
}
