//! Word error rate, corpus BLEU and dual-path agreement diagnostics.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;

use crate::autograd::Tape;
use crate::data::{collate, make_batches, TripletExample};
use crate::decode::{decode_features, DecodePath, DecodeRequest, Decoded};
use crate::error::{MetricError, ObjectiveError};
use crate::nn::{BoundParams, Dropout, Model, ParamStore, TokenBatch};
use crate::objective::{paired_rows, token_kl, DualLayout};
use crate::vocab::{Vocabulary, PAD};

/// Levenshtein distance with unit costs.
pub fn edit_distance<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, x) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, y) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(x != y);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        core::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Edit distance divided by the reference length.
pub fn wer<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> Result<f64, MetricError> {
    if reference.is_empty() {
        return Err(MetricError::EmptyReference);
    }
    Ok(edit_distance(reference, hypothesis) as f64 / reference.len() as f64)
}

fn check_corpus(refs: usize, hyps: usize) -> Result<(), MetricError> {
    if hyps == 0 {
        return Err(MetricError::EmptyCorpus);
    }
    if refs != hyps {
        return Err(MetricError::LengthMismatch { refs, hyps });
    }
    Ok(())
}

/// Total edit distance over total reference words, whitespace tokenized.
pub fn corpus_wer(references: &[&str], hypotheses: &[&str]) -> Result<f64, MetricError> {
    check_corpus(references.len(), hypotheses.len())?;
    let mut dist = 0;
    let mut words = 0;
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        dist += edit_distance(&r, &h);
        words += r.len();
    }
    if words == 0 {
        return Err(MetricError::EmptyReference);
    }
    Ok(dist as f64 / words as f64)
}

fn ngram_counts<'a>(tokens: &[&'a str], n: usize) -> BTreeMap<Vec<&'a str>, usize> {
    let mut counts = BTreeMap::new();
    for w in tokens.windows(n) {
        *counts.entry(w.to_vec()).or_insert(0) += 1;
    }
    counts
}

/// Corpus BLEU over orders 1 to 4 on whitespace tokens, in `[0, 100]`.
///
/// Clipped n-gram matches and totals are pooled over the corpus. For orders
/// above one, a zero match count is smoothed to `(0 + 1) / (total + 1)`.
/// The brevity penalty is `exp(1 - r / c)` when the hypothesis length `c`
/// is below the reference length `r`.
pub fn bleu(references: &[&str], hypotheses: &[&str]) -> Result<f64, MetricError> {
    check_corpus(references.len(), hypotheses.len())?;
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut ref_len, mut hyp_len) = (0usize, 0usize);
    for (r, h) in references.iter().zip(hypotheses) {
        let r: Vec<&str> = r.split_whitespace().collect();
        let h: Vec<&str> = h.split_whitespace().collect();
        ref_len += r.len();
        hyp_len += h.len();
        for n in 1..=4 {
            let rc = ngram_counts(&r, n);
            let hc = ngram_counts(&h, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if hyp_len == 0 || matches[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..4 {
        let p = if n > 0 && matches[n] == 0 {
            1.0 / (totals[n] + 1) as f64
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_p += Float::ln(p);
    }
    let bp = if hyp_len < ref_len {
        Float::exp(1.0 - ref_len as f64 / hyp_len as f64)
    } else {
        1.0
    };
    Ok(100.0 * bp * Float::exp(log_p / 4.0))
}

/// Teacher-forced agreement figures of one example.
#[derive(Clone, Debug, PartialEq)]
pub struct AgreementRecord {
    pub id: String,
    pub nll_a: f64,
    pub nll_b: f64,
    /// Summed over the example's content positions.
    pub kl_fwd: f64,
    pub kl_bwd: f64,
    pub content_tokens: usize,
}

/// Corpus metrics and per-example records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    pub bleu: Option<f64>,
    pub wer: Option<f64>,
    /// Token means over all content positions of the set.
    pub kl_fwd: Option<f64>,
    pub kl_bwd: Option<f64>,
    /// Mean over examples of `|nll_A - nll_B|`.
    pub nll_gap: Option<f64>,
    pub records: Vec<AgreementRecord>,
}

impl EvalReport {
    /// Fills the corpus means from `records`.
    pub fn from_records(records: Vec<AgreementRecord>) -> Self {
        let tokens: usize = records.iter().map(|r| r.content_tokens).sum();
        let n = records.len().max(1) as f64;
        let t = tokens.max(1) as f64;
        Self {
            kl_fwd: Some(records.iter().map(|r| r.kl_fwd).sum::<f64>() / t),
            kl_bwd: Some(records.iter().map(|r| r.kl_bwd).sum::<f64>() / t),
            nll_gap: Some(records.iter().map(|r| (r.nll_a - r.nll_b).abs()).sum::<f64>() / n),
            records,
            ..Self::default()
        }
    }
}

/// Per-example agreement figures from raw layout log-probabilities
/// (`[batch * seq_len, vocab]`, row-major) of one batch.
pub fn agreement_records(
    ids: &[String],
    layouts: &[DualLayout],
    lp_a: &[f64],
    lp_b: &[f64],
    seq_len: usize,
    vocab: usize,
) -> Result<Vec<AgreementRecord>, ObjectiveError> {
    let row = |lp: &'_ [f64], r: usize| -> Vec<f64> { lp[r * vocab..(r + 1) * vocab].to_vec() };
    let mut out = Vec::with_capacity(layouts.len());
    for (b, (id, l)) in ids.iter().zip(layouts).enumerate() {
        let (a_rows, b_rows) = paired_rows(core::slice::from_ref(l), seq_len)?;
        let (mut kl_fwd, mut kl_bwd) = (0.0, 0.0);
        for (&ra, &rb) in a_rows.iter().zip(&b_rows) {
            let (pa, pb) = (row(lp_a, b * seq_len + ra), row(lp_b, b * seq_len + rb));
            kl_fwd += token_kl(&pa, &pb)?;
            kl_bwd += token_kl(&pb, &pa)?;
        }
        let nll = |lp: &[f64], target: &[u32]| -> f64 {
            target
                .iter()
                .enumerate()
                .map(|(t, &id)| -lp[(b * seq_len + t) * vocab + id as usize])
                .sum()
        };
        out.push(AgreementRecord {
            id: id.clone(),
            nll_a: nll(lp_a, &l.a_target),
            nll_b: nll(lp_b, &l.b_target),
            kl_fwd,
            kl_bwd,
            content_tokens: a_rows.len(),
        });
    }
    Ok(out)
}

/// Runs both layouts teacher-forced over `examples` (no dropout) and
/// reports token-mean KL in both directions and the mean NLL gap.
pub fn agreement_report(
    model: &Model,
    params: &ParamStore<f32>,
    examples: &[TripletExample],
    budget: usize,
) -> Result<EvalReport, MetricError> {
    let vocab = model.config().vocab_size;
    let mut records = Vec::with_capacity(examples.len());
    let batches = make_batches(examples, budget)?;
    for idx in batches {
        let batch = collate(examples, &idx, vocab, None)?;
        let mut tape = Tape::<f32>::new();
        let p = BoundParams::bind(&mut tape, params, false);
        let mut off = Dropout::disabled();
        let memory = model.encode(&mut tape, &p, &batch.dual.features, &mut off)?;
        let rows = |f: fn(&DualLayout) -> &[u32]| {
            let r: Vec<&[u32]> = batch.dual.layouts.iter().map(f).collect();
            TokenBatch::from_rows(&r, PAD)
        };
        let a_in = rows(|l| &l.a_input);
        let b_in = rows(|l| &l.b_input);
        let lp_a = model.decode(&mut tape, &p, &memory, &a_in, &mut off)?;
        let lp_b = model.decode(&mut tape, &p, &memory, &b_in, &mut off)?;
        let lp_a = tape.value(lp_a).to_f64_vec();
        let lp_b = tape.value(lp_b).to_f64_vec();
        records.extend(agreement_records(
            &batch.ids,
            &batch.dual.layouts,
            &lp_a,
            &lp_b,
            a_in.len,
            vocab,
        )?);
    }
    Ok(EvalReport::from_records(records))
}

/// Decodes every example along `req.path`.
pub fn decode_all(
    model: &Model,
    params: &ParamStore<f32>,
    examples: &[TripletExample],
    req: &DecodeRequest,
) -> Result<Vec<Decoded>, MetricError> {
    examples
        .iter()
        .map(|e| decode_features(model, params, &e.features, req).map_err(MetricError::from))
        .collect()
}

/// Corpus BLEU of translations decoded along the ST path.
pub fn st_bleu(
    model: &Model,
    params: &ParamStore<f32>,
    examples: &[TripletExample],
    vocab: &Vocabulary,
    req: &DecodeRequest,
) -> Result<f64, MetricError> {
    let req = DecodeRequest {
        path: DecodePath::St,
        ..req.clone()
    };
    let hyps: Vec<String> = decode_all(model, params, examples, &req)?
        .iter()
        .map(|d| vocab.decode(&d.first))
        .collect();
    let refs: Vec<String> = examples.iter().map(|e| vocab.decode(&e.translation)).collect();
    bleu(&as_strs(&refs), &as_strs(&hyps))
}

/// Corpus WER of transcriptions decoded along the ASR path.
pub fn asr_wer(
    model: &Model,
    params: &ParamStore<f32>,
    examples: &[TripletExample],
    vocab: &Vocabulary,
    req: &DecodeRequest,
) -> Result<f64, MetricError> {
    let req = DecodeRequest {
        path: DecodePath::Asr,
        ..req.clone()
    };
    let hyps: Vec<String> = decode_all(model, params, examples, &req)?
        .iter()
        .map(|d| vocab.decode(&d.first))
        .collect();
    let refs: Vec<String> = examples.iter().map(|e| vocab.decode(&e.transcription)).collect();
    corpus_wer(&as_strs(&refs), &as_strs(&hyps))
}

fn as_strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn wer_examples() {
        let r = ["a", "b", "c", "d"];
        assert_eq!(wer(&r, &r).unwrap(), 0.0);
        assert_eq!(wer(&r, &["a", "x", "c"]).unwrap(), 0.5);
        assert_eq!(wer(&r, &[]).unwrap(), 1.0);
        assert_eq!(wer::<&str>(&[], &["a"]), Err(MetricError::EmptyReference));
    }

    #[test]
    fn bleu_examples() {
        assert_eq!(bleu(&["a b c d", "e f"], &["a b c d", "e f"]).unwrap(), 100.0);
        let hand = 100.0 * (0.75f64 * (1.0 / 3.0) * (1.0 / 3.0) * 0.5).powf(0.25);
        assert_abs_diff_eq!(hand, 45.18, epsilon = 1e-2);
        assert_abs_diff_eq!(bleu(&["a b c d"], &["a b x d"]).unwrap(), hand, epsilon = 1e-9);
        assert_eq!(bleu(&["a"], &["b"]).unwrap(), 0.0);
        assert!(bleu(&[], &[]).is_err());
        assert!(bleu(&["a"], &["a", "b"]).is_err());
    }

    #[test]
    fn brevity_penalty() {
        // perfect 1-grams, half length: every order matches fully
        let got = bleu(&["a b c d e f g h"], &["a b c d"]).unwrap();
        assert_abs_diff_eq!(got, 100.0 * (1.0f64 - 2.0).exp(), epsilon = 1e-9);
    }
}
