//! Dual-layout targets, smoothed NLL, token-level KL agreement and the
//! combined training objective.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::Range;

use crate::autograd::{Tape, Var};
use crate::error::ObjectiveError;
use crate::nn::{BoundParams, Dropout, FeatureBatch, Model, TokenBatch};
use crate::tensor::{Real, Tensor};
use crate::vocab::{is_special, TokenId, EOS, PAD, TO_SRC, TO_TGT};

/// Teacher-forcing inputs and targets for both decoding orders of one example.
///
/// Layout A decodes transcription then translation, layout B the reverse.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DualLayout {
    /// `[<2src>, z, <2tgt>, y]`
    pub a_input: Vec<TokenId>,
    /// `[z, <2tgt>, y, </s>]`
    pub a_target: Vec<TokenId>,
    /// `[<2tgt>, y, <2src>, z]`
    pub b_input: Vec<TokenId>,
    /// `[y, <2src>, z, </s>]`
    pub b_target: Vec<TokenId>,
    pub z_span_a: Range<usize>,
    pub y_span_a: Range<usize>,
    pub z_span_b: Range<usize>,
    pub y_span_b: Range<usize>,
}

fn check_content(which: &'static str, s: &[TokenId], vocab_size: usize) -> Result<(), ObjectiveError> {
    if s.is_empty() {
        return Err(ObjectiveError::EmptySequence(which));
    }
    for &id in s {
        if is_special(id) {
            return Err(ObjectiveError::SpecialToken { which, id });
        }
        if id as usize >= vocab_size {
            return Err(ObjectiveError::TargetOutOfVocab { id, vocab: vocab_size });
        }
    }
    Ok(())
}

/// Builds both layouts from a transcription `z` and translation `y`.
pub fn build_dual_layouts(z: &[TokenId], y: &[TokenId], vocab_size: usize) -> Result<DualLayout, ObjectiveError> {
    check_content("transcription", z, vocab_size)?;
    check_content("translation", y, vocab_size)?;
    let (nz, ny) = (z.len(), y.len());
    let cat = |parts: &[&[TokenId]]| parts.concat();
    Ok(DualLayout {
        a_input: cat(&[&[TO_SRC], z, &[TO_TGT], y]),
        a_target: cat(&[z, &[TO_TGT], y, &[EOS]]),
        b_input: cat(&[&[TO_TGT], y, &[TO_SRC], z]),
        b_target: cat(&[y, &[TO_SRC], z, &[EOS]]),
        z_span_a: 0..nz,
        y_span_a: nz + 1..nz + 1 + ny,
        z_span_b: ny + 1..ny + 1 + nz,
        y_span_b: 0..ny,
    })
}

impl DualLayout {
    /// Length of each target, `|z| + |y| + 2`.
    pub fn target_len(&self) -> usize {
        self.a_target.len()
    }

    /// `(z, y)` read back from layout A.
    pub fn segments_a(&self) -> (&[TokenId], &[TokenId]) {
        (
            &self.a_target[self.z_span_a.clone()],
            &self.a_target[self.y_span_a.clone()],
        )
    }

    /// `(z, y)` read back from layout B.
    pub fn segments_b(&self) -> (&[TokenId], &[TokenId]) {
        (
            &self.b_target[self.z_span_b.clone()],
            &self.b_target[self.y_span_b.clone()],
        )
    }

    /// Layout A cut after the `<2tgt>` tag: transcription-only training.
    pub fn asr_input(&self) -> &[TokenId] {
        &self.a_input[..self.z_span_a.end + 1]
    }

    pub fn asr_target(&self) -> &[TokenId] {
        &self.a_target[..self.z_span_a.end + 1]
    }
}

/// `Σ_v exp(p[v]) (p[v] - q[v])` for log-distributions `p` and `q`.
pub fn token_kl(p: &[f64], q: &[f64]) -> Result<f64, ObjectiveError> {
    if p.len() != q.len() {
        return Err(ObjectiveError::VocabMismatch(p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&lp, _)| lp != f64::NEG_INFINITY)
        .map(|(&lp, &lq)| lp.exp() * (lp - lq))
        .sum())
}

/// Result of [`nll_loss`].
#[derive(Clone, Debug)]
pub struct NllOutput {
    /// Sum of per-token losses over non-pad targets.
    pub sum: Var,
    /// Loss of every non-pad target, in row order.
    pub per_token: Vec<f64>,
}

/// Label-smoothed negative log-likelihood of `targets` under `logprobs`
/// (`[positions, vocab]`), summed over targets that are not `pad`.
///
/// Each token costs `(1 - eps) (-lp[target]) + eps mean_v (-lp[v])`, the mean
/// running over every vocabulary entry except `pad`.
pub fn nll_loss<R: Real>(
    tape: &mut Tape<R>,
    logprobs: Var,
    targets: &[TokenId],
    pad: Option<TokenId>,
    eps: f64,
) -> Result<NllOutput, ObjectiveError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(ObjectiveError::Smoothing(eps));
    }
    let shape = tape.shape(logprobs).to_vec();
    let [rows, vocab] = shape[..] else {
        return Err(ObjectiveError::SpanMismatch(format!(
            "log-probabilities of shape {shape:?}"
        )));
    };
    if targets.len() > rows {
        return Err(ObjectiveError::SpanMismatch(format!(
            "{} targets for {rows} positions",
            targets.len()
        )));
    }
    if let Some(&id) = targets.iter().find(|&&t| t as usize >= vocab) {
        return Err(ObjectiveError::TargetOutOfVocab { id, vocab });
    }
    let spread = match pad {
        Some(p) if (p as usize) < vocab => vocab - 1,
        _ => vocab,
    };
    let smooth = eps / spread as f64;
    let mut row_weights = vec![smooth; vocab];
    if let Some(p) = pad.filter(|&p| (p as usize) < vocab) {
        row_weights[p as usize] = 0.0;
    }
    let mut w = vec![R::zero(); rows * vocab];
    let mut per_token = Vec::new();
    let lp = tape.value(logprobs).data();
    for (r, &t) in targets.iter().enumerate() {
        if Some(t) == pad {
            continue;
        }
        let row = &mut w[r * vocab..(r + 1) * vocab];
        let lrow = &lp[r * vocab..(r + 1) * vocab];
        let mut loss = 0.0;
        for (v, (x, &l)) in row.iter_mut().zip(lrow).enumerate() {
            let mut wv = row_weights[v];
            if v == t as usize {
                wv += 1.0 - eps;
            }
            *x = R::from_f64(wv);
            if wv != 0.0 {
                loss -= wv * l.as_f64();
            }
        }
        per_token.push(loss);
    }
    let w = tape.constant(Tensor::new(&shape, w)?);
    let weighted = tape.mul(logprobs, w)?;
    let total = tape.sum(weighted)?;
    let sum = tape.neg(total)?;
    Ok(NllOutput { sum, per_token })
}

/// Rows of the layout-A and layout-B outputs that predict the same content
/// token, for a batch whose targets are padded to `seq_len`.
pub fn paired_rows(layouts: &[DualLayout], seq_len: usize) -> Result<(Vec<usize>, Vec<usize>), ObjectiveError> {
    let mut a_rows = Vec::new();
    let mut b_rows = Vec::new();
    for (b, l) in layouts.iter().enumerate() {
        if l.y_span_a.len() != l.y_span_b.len() || l.z_span_a.len() != l.z_span_b.len() {
            return Err(ObjectiveError::SpanMismatch(format!(
                "example {b}: y {:?}/{:?}, z {:?}/{:?}",
                l.y_span_a, l.y_span_b, l.z_span_a, l.z_span_b
            )));
        }
        if l.target_len() > seq_len {
            return Err(ObjectiveError::SpanMismatch(format!(
                "example {b} has {} targets, batch holds {seq_len}",
                l.target_len()
            )));
        }
        for (sa, sb) in [(&l.y_span_a, &l.y_span_b), (&l.z_span_a, &l.z_span_b)] {
            a_rows.extend(sa.clone().map(|t| b * seq_len + t));
            b_rows.extend(sb.clone().map(|t| b * seq_len + t));
        }
    }
    Ok((a_rows, b_rows))
}

/// Summed `(kl_fwd, kl_bwd)` over all paired content positions of a batch.
/// Gradients flow into both distributions of each term.
pub fn kl_agreement<R: Real>(
    tape: &mut Tape<R>,
    logprobs_a: Var,
    logprobs_b: Var,
    layouts: &[DualLayout],
    seq_len: usize,
) -> Result<(Var, Var), ObjectiveError> {
    let (sa, sb) = (tape.shape(logprobs_a).to_vec(), tape.shape(logprobs_b).to_vec());
    if sa != sb || sa.len() != 2 {
        return Err(ObjectiveError::VocabMismatch(
            sa.last().copied().unwrap_or(0),
            sb.last().copied().unwrap_or(0),
        ));
    }
    let (a_rows, b_rows) = paired_rows(layouts, seq_len)?;
    if a_rows.iter().chain(&b_rows).any(|&r| r >= sa[0]) {
        return Err(ObjectiveError::SpanMismatch(format!(
            "{} rows cannot hold the paired positions",
            sa[0]
        )));
    }
    let pa = tape.gather_rows(logprobs_a, &a_rows)?;
    let pb = tape.gather_rows(logprobs_b, &b_rows)?;
    let d_ab = tape.sub(pa, pb)?;
    let d_ba = tape.neg(d_ab)?;
    let ea = tape.exp(pa)?;
    let eb = tape.exp(pb)?;
    let f = tape.mul(ea, d_ab)?;
    let kl_fwd = tape.sum(f)?;
    let g = tape.mul(eb, d_ba)?;
    let kl_bwd = tape.sum(g)?;
    Ok((kl_fwd, kl_bwd))
}

/// The terms of the training objective and their combination.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub nll_a: f64,
    pub nll_b: f64,
    pub kl_fwd: f64,
    pub kl_bwd: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `total = nll_a + nll_b + lambda (kl_fwd + kl_bwd)`. With `lambda = 0` the
/// KL terms are not touched, so the total is exactly the MLE sum.
pub fn tda_objective(
    nll_a: f64,
    nll_b: f64,
    kl_fwd: f64,
    kl_bwd: f64,
    lambda: f64,
) -> Result<LossBreakdown, ObjectiveError> {
    if !(lambda >= 0.0) {
        return Err(ObjectiveError::NegativeLambda(lambda));
    }
    let mle = nll_a + nll_b;
    let total = if lambda == 0.0 {
        mle
    } else {
        mle + lambda * (kl_fwd + kl_bwd)
    };
    Ok(LossBreakdown {
        nll_a,
        nll_b,
        kl_fwd,
        kl_bwd,
        lambda,
        total,
    })
}

impl LossBreakdown {
    /// Every term divided by `n` (the total is recombined, not divided).
    pub fn per_token(&self, n: usize) -> Self {
        let n = n.max(1) as f64;
        tda_objective(
            self.nll_a / n,
            self.nll_b / n,
            self.kl_fwd / n,
            self.kl_bwd / n,
            self.lambda,
        )
        .expect("lambda already validated")
    }

    /// Termwise sum of two breakdowns with the same lambda.
    pub fn accumulate(&self, other: &Self) -> Self {
        tda_objective(
            self.nll_a + other.nll_a,
            self.nll_b + other.nll_b,
            self.kl_fwd + other.kl_fwd,
            self.kl_bwd + other.kl_bwd,
            self.lambda,
        )
        .expect("lambda already validated")
    }
}

/// A padded batch of examples with both layouts.
#[derive(Clone, Debug)]
pub struct DualBatch<R> {
    pub features: FeatureBatch<R>,
    pub layouts: Vec<DualLayout>,
}

impl<R: Real> DualBatch<R> {
    pub fn len(&self) -> usize {
        self.layouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layouts.is_empty()
    }

    /// Non-pad target tokens over both layouts.
    pub fn dual_tokens(&self) -> usize {
        2 * self.layouts.iter().map(DualLayout::target_len).sum::<usize>()
    }

    /// Target tokens of the transcription-only layout.
    pub fn asr_tokens(&self) -> usize {
        self.layouts.iter().map(|l| l.asr_target().len()).sum()
    }

    pub fn cast<S: Real>(&self) -> DualBatch<S> {
        DualBatch {
            features: FeatureBatch {
                features: self.features.features.cast(),
                lengths: self.features.lengths.clone(),
            },
            layouts: self.layouts.clone(),
        }
    }
}

fn rows<'a>(layouts: &'a [DualLayout], f: impl Fn(&'a DualLayout) -> &'a [TokenId]) -> TokenBatch {
    let r: Vec<&[TokenId]> = layouts.iter().map(f).collect();
    TokenBatch::from_rows(&r, PAD)
}

/// Which terms a training step optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Transcription NLL of layout A up to and including `<2tgt>`.
    Asr,
    /// Both layouts' NLL plus `lambda` times the two KL terms.
    Dual { lambda: f64 },
}

/// Summed loss terms of one batch, on the tape and as numbers.
#[derive(Clone, Debug)]
pub struct BatchLoss {
    /// Unnormalized objective, ready to be scaled and differentiated.
    pub total: Var,
    /// Unnormalized values.
    pub sums: LossBreakdown,
    /// Non-pad target tokens contributing to the NLL terms.
    pub tokens: usize,
}

/// One encoder pass and one teacher-forced decoder pass per layout.
///
/// KL terms are always evaluated for reporting; they join the differentiated
/// total only when `lambda > 0`.
pub fn batch_loss<R: Real>(
    tape: &mut Tape<R>,
    model: &Model,
    params: &BoundParams,
    batch: &DualBatch<R>,
    objective: Objective,
    eps: f64,
    dropout: &mut Dropout<'_>,
) -> Result<BatchLoss, ObjectiveError> {
    let memory = model.encode(tape, params, &batch.features, dropout)?;
    let pad = Some(PAD);
    match objective {
        Objective::Asr => {
            let input = rows(&batch.layouts, DualLayout::asr_input);
            let target = rows(&batch.layouts, DualLayout::asr_target);
            let lp = model.decode(tape, params, &memory, &input, dropout)?;
            let nll = nll_loss(tape, lp, &target.ids, pad, eps)?;
            let value = tape.value(nll.sum).data()[0].as_f64();
            Ok(BatchLoss {
                total: nll.sum,
                sums: tda_objective(value, 0.0, 0.0, 0.0, 0.0)?,
                tokens: batch.asr_tokens(),
            })
        }
        Objective::Dual { lambda } => {
            if !(lambda >= 0.0) {
                return Err(ObjectiveError::NegativeLambda(lambda));
            }
            let a_in = rows(&batch.layouts, |l| &l.a_input);
            let a_tgt = rows(&batch.layouts, |l| &l.a_target);
            let b_in = rows(&batch.layouts, |l| &l.b_input);
            let b_tgt = rows(&batch.layouts, |l| &l.b_target);
            let lp_a = model.decode(tape, params, &memory, &a_in, dropout)?;
            let lp_b = model.decode(tape, params, &memory, &b_in, dropout)?;
            let nll_a = nll_loss(tape, lp_a, &a_tgt.ids, pad, eps)?;
            let nll_b = nll_loss(tape, lp_b, &b_tgt.ids, pad, eps)?;
            let (kl_fwd, kl_bwd) = kl_agreement(tape, lp_a, lp_b, &batch.layouts, a_tgt.len)?;
            let value = |tape: &Tape<R>, v: Var| tape.value(v).data()[0].as_f64();
            let sums = tda_objective(
                value(tape, nll_a.sum),
                value(tape, nll_b.sum),
                value(tape, kl_fwd),
                value(tape, kl_bwd),
                lambda,
            )?;
            let mut total = tape.add(nll_a.sum, nll_b.sum)?;
            if lambda > 0.0 {
                let kl = tape.add(kl_fwd, kl_bwd)?;
                let kl = tape.scale(kl, R::from_f64(lambda))?;
                total = tape.add(total, kl)?;
            }
            Ok(BatchLoss {
                total,
                sums,
                tokens: batch.dual_tokens(),
            })
        }
    }
}
