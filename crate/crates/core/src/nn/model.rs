use alloc::format;
use alloc::vec::Vec;

use num_traits::Float;

use super::layers::{
    feed_forward, layer_norm, linear, multi_head_attention, sinusoidal_positions, AttnDims, AttnMask, Dropout,
};
use super::{BoundParams, ModelConfig};
use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::tensor::{Real, Tensor};

/// Zero-padded acoustic features `[batch, frames, feat_dim]` with valid lengths.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBatch<R> {
    pub features: Tensor<R>,
    pub lengths: Vec<usize>,
}

impl<R: Real> FeatureBatch<R> {
    /// Pads per-example `[frames, feat_dim]` matrices into one batch.
    pub fn from_examples(examples: &[&Tensor<R>]) -> Result<Self, ModelError> {
        let first = examples.first().ok_or(ModelError::EmptyInput)?;
        let feat_dim = *first.shape().last().ok_or(ModelError::EmptyInput)?;
        let frames = examples.iter().map(|e| e.shape()[0]).max().unwrap_or(0);
        let mut data = alloc::vec![R::zero(); examples.len() * frames * feat_dim];
        let mut lengths = Vec::with_capacity(examples.len());
        for (b, e) in examples.iter().enumerate() {
            if e.rank() != 2 || e.shape()[1] != feat_dim {
                return Err(ModelError::Config(format!("feature shape {:?}", e.shape())));
            }
            let n = e.shape()[0];
            let dst = b * frames * feat_dim;
            data[dst..dst + n * feat_dim].copy_from_slice(e.data());
            lengths.push(n);
        }
        Ok(Self {
            features: Tensor::new(&[examples.len(), frames, feat_dim], data)?,
            lengths,
        })
    }

    pub fn batch(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.features.shape()[1]
    }
}

/// Padded decoder token ids `[batch, len]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub batch: usize,
    pub len: usize,
    pub ids: Vec<u32>,
}

impl TokenBatch {
    pub fn from_rows(rows: &[&[u32]], pad: u32) -> Self {
        let len = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(rows.len() * len);
        for r in rows {
            ids.extend_from_slice(r);
            ids.extend(core::iter::repeat_n(pad, len - r.len()));
        }
        Self {
            batch: rows.len(),
            len,
            ids,
        }
    }

    pub fn row(&self, b: usize) -> &[u32] {
        &self.ids[b * self.len..(b + 1) * self.len]
    }
}

/// Encoder states `[batch * frames, d_model]` with per-example valid lengths.
#[derive(Clone, Debug)]
pub struct Memory {
    pub states: Var,
    pub batch: usize,
    pub frames: usize,
    pub lengths: Vec<usize>,
}

/// The encoder-decoder forward computation over bound parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
}

impl Model {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        Ok(Self { cfg })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Two strided convolutions, `[batch, frames, feat]` to
    /// `[batch * frames', d_model]`. Returns the output and valid lengths.
    pub fn conv_subsample<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        features: Var,
        lengths: &[usize],
    ) -> Result<(Var, usize, Vec<usize>), ModelError> {
        let geom = self.cfg.conv_geometry();
        let shape = tape.shape(features).to_vec();
        let [batch, frames, _] = shape[..] else {
            return Err(ModelError::Config(format!("features of shape {shape:?}")));
        };
        if frames + 2 * geom.pad < geom.kernel {
            return Err(ModelError::InputTooShort {
                frames,
                kernel: geom.kernel,
            });
        }
        let mut x = features;
        let mut len = frames;
        let mut valid = lengths.to_vec();
        for i in 0..self.cfg.conv_layers {
            let cols = tape.im2col(x, &geom, &valid)?;
            len = geom.out_len(len);
            valid.iter_mut().for_each(|l| *l = geom.out_len(*l));
            let mut y = linear(tape, p, &format!("conv.{i}"), cols)?;
            if i + 1 < self.cfg.conv_layers {
                y = tape.gelu(y)?;
                y = tape.reshape(y, &[batch, len, self.cfg.d_model])?;
            }
            x = y;
        }
        Ok((x, len, valid))
    }

    /// Contextual encoder states for a feature batch.
    pub fn encode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        feats: &FeatureBatch<R>,
        dropout: &mut Dropout<'_>,
    ) -> Result<Memory, ModelError> {
        if feats.lengths.contains(&0) || feats.features.numel() == 0 {
            return Err(ModelError::EmptyInput);
        }
        let d = self.cfg.d_model;
        let batch = feats.batch();
        let input = tape.constant(feats.features.clone());
        let (x, frames, lengths) = self.conv_subsample(tape, p, input, &feats.lengths)?;
        if frames > self.cfg.max_positions {
            return Err(ModelError::TooLong {
                len: frames,
                max: self.cfg.max_positions,
            });
        }
        let x = tape.reshape(x, &[batch, frames, d])?;
        let pos = tape.constant(sinusoidal_positions(frames, d));
        let x = tape.add(x, pos)?;
        let x = tape.reshape(x, &[batch * frames, d])?;
        let mut x = dropout.apply(tape, x)?;
        let mask = AttnMask::key_padding(&lengths, frames, frames);
        let dims = AttnDims {
            batch,
            queries: frames,
            keys: frames,
            heads: self.cfg.heads,
            d_model: d,
        };
        for i in 0..self.cfg.enc_layers {
            let pre = format!("enc.{i}");
            let h = layer_norm(tape, p, &format!("{pre}.ln1"), x)?;
            let a = multi_head_attention(tape, p, &format!("{pre}.attn"), h, h, dims, &mask, dropout)?;
            let a = dropout.apply(tape, a.output)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, p, &format!("{pre}.ln2"), x)?;
            let f = feed_forward(tape, p, &pre, h, dropout)?;
            let f = dropout.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        let states = layer_norm(tape, p, "enc.ln", x)?;
        Ok(Memory {
            states,
            batch,
            frames,
            lengths,
        })
    }

    /// Teacher-forced decoder pass. Returns next-token log-probabilities of
    /// shape `[batch * len, vocab]`; position `t` depends only on
    /// `tokens[..=t]` and the memory.
    pub fn decode<R: Real>(
        &self,
        tape: &mut Tape<R>,
        p: &BoundParams,
        memory: &Memory,
        tokens: &TokenBatch,
        dropout: &mut Dropout<'_>,
    ) -> Result<Var, ModelError> {
        let d = self.cfg.d_model;
        let (batch, len) = (tokens.batch, tokens.len);
        if len == 0 || batch == 0 {
            return Err(ModelError::EmptyInput);
        }
        if batch != memory.batch {
            return Err(ModelError::Config(format!(
                "{batch} token rows for a memory of {} examples",
                memory.batch
            )));
        }
        if len > self.cfg.max_positions {
            return Err(ModelError::TooLong {
                len,
                max: self.cfg.max_positions,
            });
        }
        if let Some(&id) = tokens.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_size) {
            return Err(ModelError::TokenOutOfVocab {
                id,
                vocab: self.cfg.vocab_size,
            });
        }
        let embed = p.get("dec.embed")?;
        let idx: Vec<usize> = tokens.ids.iter().map(|&t| t as usize).collect();
        let x = tape.gather_rows(embed, &idx)?;
        let x = tape.scale(x, R::from_f64(Float::sqrt(d as f64)))?;
        let x = tape.reshape(x, &[batch, len, d])?;
        let pos = tape.constant(sinusoidal_positions(len, d));
        let x = tape.add(x, pos)?;
        let x = tape.reshape(x, &[batch * len, d])?;
        let mut x = dropout.apply(tape, x)?;

        let self_mask = AttnMask::causal(batch, len);
        let cross_mask = AttnMask::key_padding(&memory.lengths, len, memory.frames);
        let heads = self.cfg.heads;
        let self_dims = AttnDims {
            batch,
            queries: len,
            keys: len,
            heads,
            d_model: d,
        };
        let cross_dims = AttnDims {
            keys: memory.frames,
            ..self_dims
        };
        for i in 0..self.cfg.dec_layers {
            let pre = format!("dec.{i}");
            let h = layer_norm(tape, p, &format!("{pre}.ln1"), x)?;
            let a = multi_head_attention(
                tape,
                p,
                &format!("{pre}.self_attn"),
                h,
                h,
                self_dims,
                &self_mask,
                dropout,
            )?;
            let a = dropout.apply(tape, a.output)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, p, &format!("{pre}.ln2"), x)?;
            let a = multi_head_attention(
                tape,
                p,
                &format!("{pre}.cross_attn"),
                h,
                memory.states,
                cross_dims,
                &cross_mask,
                dropout,
            )?;
            let a = dropout.apply(tape, a.output)?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, p, &format!("{pre}.ln3"), x)?;
            let f = feed_forward(tape, p, &pre, h, dropout)?;
            let f = dropout.apply(tape, f)?;
            x = tape.add(x, f)?;
        }
        let h = layer_norm(tape, p, "dec.ln", x)?;
        let out_proj = if self.cfg.tie_embeddings {
            embed
        } else {
            p.get("dec.out_proj")?
        };
        let logits = tape.matmul_nt(h, out_proj)?;
        Ok(tape.log_softmax(logits, 1)?)
    }
}

/// Repeats encoder memory rows so `counts[b]` decoder rows attend to example `b`.
pub fn repeat_memory<R: Real>(tape: &mut Tape<R>, memory: &Memory, counts: &[usize]) -> Result<Memory, ModelError> {
    let mut idx = Vec::new();
    let mut lengths = Vec::new();
    for (b, &c) in counts.iter().enumerate() {
        for _ in 0..c {
            idx.extend(b * memory.frames..(b + 1) * memory.frames);
            lengths.push(memory.lengths[b]);
        }
    }
    let states = tape.gather_rows(memory.states, &idx)?;
    Ok(Memory {
        states,
        batch: lengths.len(),
        frames: memory.frames,
        lengths,
    })
}
