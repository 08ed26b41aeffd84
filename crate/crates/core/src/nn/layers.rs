use alloc::format;
use alloc::rc::Rc;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;

use super::BoundParams;
use crate::autograd::{SoftmaxMask, Tape, Var};
use crate::error::ModelError;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Inverted dropout driven by an explicit generator. Disabled when no
/// generator is attached or the rate is zero.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut Rng>,
}

impl<'r> Dropout<'r> {
    pub fn new(rate: f64, rng: &'r mut Rng) -> Self {
        Self { rate, rng: Some(rng) }
    }

    pub fn disabled() -> Self {
        Self { rate: 0.0, rng: None }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some() && self.rate > 0.0
    }

    pub fn apply<R: Real>(&mut self, tape: &mut Tape<R>, x: Var) -> Result<Var, ModelError> {
        let rate = self.rate;
        let Some(rng) = self.rng.as_deref_mut().filter(|_| rate > 0.0) else {
            return Ok(x);
        };
        let keep = R::from_f64(1.0 / (1.0 - rate));
        let shape = tape.shape(x).to_vec();
        let n: usize = shape.iter().product();
        // drop when a uniform u32 falls below rate * 2^32
        let threshold = (rate * 4_294_967_296.0) as u64;
        let mask: Vec<R> = (0..n)
            .map(|_| {
                if u64::from(rng.random::<u32>()) < threshold {
                    R::zero()
                } else {
                    keep
                }
            })
            .collect();
        let m = tape.constant(Tensor::new(&shape, mask)?);
        Ok(tape.mul(x, m)?)
    }
}

/// `x · W + b` for `x` of shape `[rows, d_in]`.
pub fn linear<R: Real>(tape: &mut Tape<R>, p: &BoundParams, name: &str, x: Var) -> Result<Var, ModelError> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    Ok(tape.add(y, b)?)
}

pub fn layer_norm<R: Real>(tape: &mut Tape<R>, p: &BoundParams, name: &str, x: Var) -> Result<Var, ModelError> {
    let g = p.get(&format!("{name}.gain"))?;
    let b = p.get(&format!("{name}.bias"))?;
    Ok(tape.layer_norm(x, g, b, R::from_f64(1e-5))?)
}

/// Position-wise feed-forward block `fc2(dropout(gelu(fc1(x))))`.
pub fn feed_forward<R: Real>(
    tape: &mut Tape<R>,
    p: &BoundParams,
    prefix: &str,
    x: Var,
    dropout: &mut Dropout<'_>,
) -> Result<Var, ModelError> {
    let h = linear(tape, p, &format!("{prefix}.fc1"), x)?;
    let h = tape.gelu(h)?;
    let h = dropout.apply(tape, h)?;
    linear(tape, p, &format!("{prefix}.fc2"), h)
}

/// Sinusoidal position table of shape `[len, d]`.
pub fn sinusoidal_positions<R: Real>(len: usize, d: usize) -> Tensor<R> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let exponent = (2 * (i / 2)) as f64 / d as f64;
            let angle = pos as f64 / Float::powf(10_000.0f64, exponent);
            let v = if i % 2 == 0 {
                Float::sin(angle)
            } else {
                Float::cos(angle)
            };
            data.push(R::from_f64(v));
        }
    }
    Tensor::new(&[len, d], data).expect("positive extents")
}

/// Attention geometry: `batch` sequences of `queries` positions attending
/// over `keys` positions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnDims {
    pub batch: usize,
    pub queries: usize,
    pub keys: usize,
    pub heads: usize,
    pub d_model: usize,
}

/// Blocked `[batch, queries, keys]` positions for attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttnMask {
    pub blocked: Rc<[bool]>,
}

impl AttnMask {
    /// Blocks keys at or beyond each sequence's valid length.
    pub fn key_padding(lengths: &[usize], queries: usize, keys: usize) -> Self {
        let mut blocked = Vec::with_capacity(lengths.len() * queries * keys);
        for &len in lengths {
            for _ in 0..queries {
                blocked.extend((0..keys).map(|s| s >= len));
            }
        }
        Self {
            blocked: blocked.into(),
        }
    }

    /// Blocks keys after the query position.
    pub fn causal(batch: usize, len: usize) -> Self {
        let mut blocked = Vec::with_capacity(batch * len * len);
        for _ in 0..batch {
            for t in 0..len {
                blocked.extend((0..len).map(|s| s > t));
            }
        }
        Self {
            blocked: blocked.into(),
        }
    }

    pub fn none(batch: usize, queries: usize, keys: usize) -> Self {
        Self {
            blocked: alloc::vec![false; batch * queries * keys].into(),
        }
    }
}

/// Output of one attention call.
pub struct Attention {
    /// `[batch * queries, d_model]`
    pub output: Var,
    /// `[batch * heads, queries, keys]`, rows sum to one over unblocked keys
    pub weights: Var,
}

fn split_heads<R: Real>(
    tape: &mut Tape<R>,
    x: Var,
    batch: usize,
    len: usize,
    heads: usize,
    dk: usize,
) -> Result<Var, ModelError> {
    let x = tape.reshape(x, &[batch, len, heads, dk])?;
    let x = tape.swap_axes12(x)?;
    Ok(tape.reshape(x, &[batch * heads, len, dk])?)
}

/// Scaled dot-product attention with `heads` heads; projections are
/// `{prefix}.{q,k,v,o}`. `q_in` is `[batch * queries, d]`, `kv_in` is
/// `[batch * keys, d]`.
pub fn multi_head_attention<R: Real>(
    tape: &mut Tape<R>,
    p: &BoundParams,
    prefix: &str,
    q_in: Var,
    kv_in: Var,
    dims: AttnDims,
    mask: &AttnMask,
    dropout: &mut Dropout<'_>,
) -> Result<Attention, ModelError> {
    let AttnDims {
        batch,
        queries,
        keys,
        heads,
        d_model,
    } = dims;
    if d_model % heads != 0 {
        return Err(ModelError::Config(format!(
            "d_model {d_model} not divisible by {heads} heads"
        )));
    }
    if mask.blocked.len() != batch * queries * keys {
        return Err(ModelError::Config(format!(
            "mask of {} entries for {batch}x{queries}x{keys} attention",
            mask.blocked.len()
        )));
    }
    let dk = d_model / heads;
    let q = linear(tape, p, &format!("{prefix}.q"), q_in)?;
    let q = tape.scale(q, R::from_f64(1.0 / Float::sqrt(dk as f64)))?;
    let k = linear(tape, p, &format!("{prefix}.k"), kv_in)?;
    let v = linear(tape, p, &format!("{prefix}.v"), kv_in)?;
    let q = split_heads(tape, q, batch, queries, heads, dk)?;
    let k = split_heads(tape, k, batch, keys, heads, dk)?;
    let v = split_heads(tape, v, batch, keys, heads, dk)?;
    let scores = tape.matmul_nt(q, k)?;
    let weights = tape.masked_softmax(
        scores,
        SoftmaxMask {
            blocked: mask.blocked.clone(),
            heads,
            queries,
            keys,
        },
    )?;
    let dropped = dropout.apply(tape, weights)?;
    let ctx = tape.matmul(dropped, v)?;
    let ctx = tape.reshape(ctx, &[batch, heads, queries, dk])?;
    let ctx = tape.swap_axes12(ctx)?;
    let ctx = tape.reshape(ctx, &[batch * queries, d_model])?;
    let output = linear(tape, p, &format!("{prefix}.o"), ctx)?;
    Ok(Attention { output, weights })
}
