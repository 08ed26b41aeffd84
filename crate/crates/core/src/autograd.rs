//! Reverse-mode automatic differentiation over an append-only tape.
//!
//! Every forward op appends one node holding its output value. Nodes only
//! reference earlier nodes, so the tape is topologically ordered by
//! construction and `backward` is a single reverse sweep.

use alloc::format;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::TensorError;
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is repeated over the leading axes of lhs
    Rhs,
    /// lhs is repeated over the leading axes of rhs
    Lhs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug)]
struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    a_batched: bool,
    b_batched: bool,
    trans_b: bool,
}

/// Blocked-position mask for softmax over the last axis of attention scores
/// laid out as `[batch, heads, queries, keys]`. `blocked` is `[batch, queries, keys]`
/// and is shared by all heads.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxMask {
    pub blocked: Rc<[bool]>,
    pub heads: usize,
    pub queries: usize,
    pub keys: usize,
}

impl SoftmaxMask {
    fn row(&self, score_row: usize) -> &[bool] {
        let b = score_row / (self.heads * self.queries);
        let t = score_row % self.queries;
        let start = (b * self.queries + t) * self.keys;
        &self.blocked[start..start + self.keys]
    }
}

/// Geometry of a strided 1-d convolution unfolded into a matrix product.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    /// Output length of one conv layer over `n` input frames.
    pub fn out_len(&self, n: usize) -> usize {
        if n + 2 * self.pad < self.kernel {
            0
        } else {
            (n + 2 * self.pad - self.kernel) / self.stride + 1
        }
    }
}

enum Op<R> {
    Leaf,
    Binary {
        kind: BinKind,
        a: usize,
        b: usize,
        bcast: Bcast,
    },
    Neg(usize),
    Exp(usize),
    Log(usize),
    Scale(usize, R),
    Gelu(usize, Vec<R>),
    MatMul {
        a: usize,
        b: usize,
        dims: MatMulDims,
    },
    Reshape(usize),
    SwapAxes12 {
        a: usize,
        dims: [usize; 4],
    },
    LogSoftmax {
        a: usize,
        outer: usize,
        len: usize,
        inner: usize,
    },
    MaskedSoftmax {
        a: usize,
        mask: SoftmaxMask,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<R>,
        rstd: Vec<R>,
    },
    GatherRows {
        table: usize,
        idx: Vec<usize>,
    },
    Im2Col {
        x: usize,
        geom: ConvGeometry,
        frames: usize,
        channels: usize,
        out_frames: usize,
        lengths: Vec<usize>,
    },
    SumAll(usize),
    SumLast(usize),
}

struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    needs_grad: bool,
}

/// Record of executed differentiable operations for one forward pass.
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
    grads: Vec<Option<Vec<R>>>,
    backward_done: bool,
}

impl<R: Real> Default for Tape<R> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn check_finite<R: Real>(op: &'static str, data: &[R]) -> Result<(), TensorError> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(TensorError::NonFinite { op })
    }
}

fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Bcast, Vec<usize>), TensorError> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok((Bcast::Same, a.to_vec()))
    } else if nb == 1 || (a.ends_with(b) && na >= nb) {
        Ok((Bcast::Rhs, a.to_vec()))
    } else if na == 1 || b.ends_with(a) {
        Ok((Bcast::Lhs, b.to_vec()))
    } else {
        Err(TensorError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        })
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<R>, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar)
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss with respect to a grad-enabled leaf.
    pub fn grad(&self, v: Var) -> Option<Tensor<R>> {
        let g = self.grads.get(v.0)?.as_ref()?;
        Some(Tensor::from_parts(self.nodes[v.0].value.shape().to_vec(), g.clone()))
    }

    /// Clears gradients so `backward` may run again.
    pub fn zero_grad(&mut self) {
        self.grads.clear();
        self.backward_done = false;
    }

    /// Drops every node recorded after the first `len`, so a tape holding
    /// bound parameters can be reused across inference steps.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.zero_grad();
    }

    fn push(&mut self, value: Tensor<R>, op: Op<R>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: usize) -> bool {
        self.nodes[v].needs_grad
    }

    /// A constant input: no gradient is tracked for it.
    pub fn constant(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A grad-enabled leaf.
    pub fn param(&mut self, t: Tensor<R>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn scalar(&mut self, x: R) -> Var {
        self.constant(Tensor::scalar(x))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
        };
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (bcast, shape) = broadcast(name, ta.shape(), tb.shape())?;
        let (da, db) = (ta.data(), tb.data());
        let out = match kind {
            BinKind::Add => zip_broadcast(bcast, da, db, |x, y| x + y),
            BinKind::Sub => zip_broadcast(bcast, da, db, |x, y| x - y),
            BinKind::Mul => zip_broadcast(bcast, da, db, |x, y| x * y),
        };
        check_finite(name, &out)?;
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast,
            },
            needs,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinKind::Mul, a, b)
    }

    fn unary(&mut self, name: &'static str, a: Var, op: Op<R>, f: impl Fn(R) -> R) -> Result<Var, TensorError> {
        let t = &self.node(a)?.value;
        let out: Vec<R> = t.data().iter().map(|&x| f(x)).collect();
        check_finite(name, &out)?;
        let shape = t.shape().to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::from_parts(shape, out), op, needs))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("neg", a, Op::Neg(a.0), |x| -x)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary("exp", a, Op::Exp(a.0), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        if let Some(bad) = self.node(a)?.value.data().iter().find(|&&x| !(x > R::zero())) {
            return Err(TensorError::LogDomain { value: bad.as_f64() });
        }
        self.unary("log", a, Op::Log(a.0), |x| x.ln())
    }

    pub fn scale(&mut self, a: Var, c: R) -> Result<Var, TensorError> {
        self.unary("scale", a, Op::Scale(a.0, c), |x| x * c)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var, TensorError> {
        let c = R::from_f64(GELU_C);
        let k = R::from_f64(GELU_A);
        let half = R::from_f64(0.5);
        let two = R::from_f64(2.0);
        let t = &self.node(a)?.value;
        // tanh(u) = 1 - 2 / (exp(2u) + 1)
        let th: Vec<R> = t
            .data()
            .iter()
            .map(|&x| R::one() - two / ((two * c * (x + k * x * x * x)).exp() + R::one()))
            .collect();
        let out: Vec<R> = t
            .data()
            .iter()
            .zip(&th)
            .map(|(&x, &h)| half * x * (R::one() + h))
            .collect();
        check_finite("gelu", &out)?;
        let shape = t.shape().to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::from_parts(shape, out), Op::Gelu(a.0, th), needs))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, TensorError> {
        let (ta, tb) = (&self.node(a)?.value, &self.node(b)?.value);
        let (sa, sb) = (ta.shape(), tb.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if !(2..=3).contains(&sa.len()) || !(2..=3).contains(&sb.len()) {
            return Err(mismatch());
        }
        let (ba, m, k) = match *sa {
            [m, k] => (1, m, k),
            [b, m, k] => (b, m, k),
            _ => unreachable!(),
        };
        let (bb, kb, n) = match (sb, trans_b) {
            ([k, n], false) => (1, *k, *n),
            ([n, k], true) => (1, *k, *n),
            ([b, k, n], false) => (*b, *k, *n),
            ([b, n, k], true) => (*b, *k, *n),
            _ => unreachable!(),
        };
        if kb != k || (ba != bb && ba != 1 && bb != 1) {
            return Err(mismatch());
        }
        let batch = ba.max(bb);
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            a_batched: ba > 1,
            b_batched: bb > 1,
            trans_b,
        };
        let mut out = vec![R::zero(); batch * m * n];
        let b_strides = if trans_b { (1, k) } else { (n, 1) };
        for i in 0..batch {
            let ao = if dims.a_batched { i * m * k } else { 0 };
            let bo = if dims.b_batched { i * k * n } else { 0 };
            R::gemm(
                m,
                k,
                n,
                R::one(),
                &ta.data()[ao..ao + m * k],
                (k, 1),
                &tb.data()[bo..bo + k * n],
                b_strides,
                R::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                (n, 1),
            );
        }
        check_finite("matmul", &out)?;
        let shape = if sa.len() == 3 || sb.len() == 3 {
            vec![batch, m, n]
        } else {
            vec![m, n]
        };
        let needs = self.needs(a.0) || self.needs(b.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul { a: a.0, b: b.0, dims },
            needs,
        ))
    }

    /// Matrix product of rank-2 or rank-3 operands; a rank-2 (or batch-1)
    /// side broadcasts over the other side's leading batch axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.matmul_impl(a, b, true)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.node(a)?.value.clone();
        let reshaped = t.reshape(shape)?;
        let needs = self.needs(a.0);
        Ok(self.push(reshaped, Op::Reshape(a.0), needs))
    }

    /// `[d0, d1, d2, d3] -> [d0, d2, d1, d3]`.
    pub fn swap_axes12(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.node(a)?.value;
        let dims: [usize; 4] = t.shape().try_into().map_err(|_| TensorError::InvalidArgument {
            op: "swap_axes12",
            detail: format!("needs rank 4, got shape {:?}", t.shape()),
        })?;
        let out = swap12(t.data(), dims);
        let needs = self.needs(a.0);
        Ok(self.push(
            Tensor::from_parts(vec![dims[0], dims[2], dims[1], dims[3]], out),
            Op::SwapAxes12 { a: a.0, dims },
            needs,
        ))
    }

    /// Normalized log-probabilities along `axis`, via max subtraction.
    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let t = &self.node(a)?.value;
        let shape = t.shape();
        if axis >= shape.len() {
            return Err(TensorError::InvalidArgument {
                op: "log_softmax",
                detail: format!("axis {axis} for rank {}", shape.len()),
            });
        }
        check_finite("log_softmax input", t.data())?;
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = t.data();
        let mut out = vec![R::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).map(|j| x[at(j)]).fold(R::neg_infinity(), R::max);
                let lse = (0..len).map(|j| (x[at(j)] - mx).exp()).sum::<R>().ln() + mx;
                for j in 0..len {
                    out[at(j)] = x[at(j)] - lse;
                }
            }
        }
        check_finite("log_softmax", &out)?;
        let shape = shape.to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LogSoftmax {
                a: a.0,
                outer,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Softmax over the last axis where blocked positions get exactly zero
    /// weight. A row with every position blocked yields all zeros.
    pub fn masked_softmax(&mut self, a: Var, mask: SoftmaxMask) -> Result<Var, TensorError> {
        let t = &self.node(a)?.value;
        let keys = *t.shape().last().unwrap_or(&1);
        let rows = t.numel() / keys;
        if keys != mask.keys
            || rows % (mask.heads * mask.queries) != 0
            || mask.blocked.len() * mask.heads != rows * keys
        {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![mask.blocked.len() / (mask.queries * keys), mask.queries, keys],
            });
        }
        let x = t.data();
        let mut out = vec![R::zero(); x.len()];
        for r in 0..rows {
            let blocked = mask.row(r);
            let xs = &x[r * keys..(r + 1) * keys];
            let ys = &mut out[r * keys..(r + 1) * keys];
            let mx = xs
                .iter()
                .zip(blocked)
                .filter(|(_, &b)| !b)
                .map(|(&v, _)| v)
                .fold(R::neg_infinity(), R::max);
            if mx == R::neg_infinity() {
                continue;
            }
            let mut total = R::zero();
            for ((y, &v), &b) in ys.iter_mut().zip(xs).zip(blocked) {
                if !b {
                    *y = (v - mx).exp();
                    total += *y;
                }
            }
            for y in ys.iter_mut() {
                *y /= total;
            }
        }
        check_finite("masked_softmax", &out)?;
        let shape = t.shape().to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MaskedSoftmax { a: a.0, mask },
            needs,
        ))
    }

    /// Normalizes over the last axis then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: R) -> Result<Var, TensorError> {
        let t = &self.node(x)?.value;
        let d = *t.shape().last().ok_or(TensorError::InvalidArgument {
            op: "layer_norm",
            detail: "scalar input".into(),
        })?;
        let (g, b) = (&self.node(gain)?.value, &self.node(bias)?.value);
        if g.shape() != [d] || b.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: t.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let rows = t.numel() / d;
        let dn = R::from_f64(d as f64);
        let mut xhat = vec![R::zero(); t.numel()];
        let mut rstd = vec![R::zero(); rows];
        let mut out = vec![R::zero(); t.numel()];
        for r in 0..rows {
            let xs = &t.data()[r * d..(r + 1) * d];
            let mean = xs.iter().copied().sum::<R>() / dn;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<R>() / dn;
            let rs = R::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = if rs.is_finite() { (xs[j] - mean) * rs } else { R::zero() };
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        check_finite("layer_norm", &out)?;
        let shape = t.shape().to_vec();
        let needs = self.needs(x.0) || self.needs(gain.0) || self.needs(bias.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                rstd,
            },
            needs,
        ))
    }

    /// Selects rows of `table` (viewed as `[rows, rest]`) by index.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var, TensorError> {
        let t = &self.node(table)?.value;
        let rows = *t.shape().first().ok_or(TensorError::InvalidArgument {
            op: "gather_rows",
            detail: "scalar table".into(),
        })?;
        let width = t.numel() / rows;
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(TensorError::IndexOutOfRange { index: i, extent: rows });
            }
            out.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        if idx.is_empty() {
            return Err(TensorError::InvalidArgument {
                op: "gather_rows",
                detail: "no rows selected".into(),
            });
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let needs = self.needs(table.0);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::GatherRows {
                table: table.0,
                idx: idx.to_vec(),
            },
            needs,
        ))
    }

    /// Unfolds `[batch, frames, channels]` into `[batch * out_frames, kernel * channels]`
    /// patches. Frames at or past an example's valid length read as zero, so
    /// padding content never reaches the output.
    pub fn im2col(&mut self, x: Var, geom: &ConvGeometry, lengths: &[usize]) -> Result<Var, TensorError> {
        let t = &self.node(x)?.value;
        let [batch, frames, channels]: [usize; 3] = t.shape().try_into().map_err(|_| TensorError::InvalidArgument {
            op: "im2col",
            detail: format!("needs rank 3, got shape {:?}", t.shape()),
        })?;
        if lengths.len() != batch || lengths.iter().any(|&l| l > frames) {
            return Err(TensorError::InvalidArgument {
                op: "im2col",
                detail: format!("lengths {lengths:?} for {batch} examples of {frames} frames"),
            });
        }
        if geom.stride == 0 || geom.kernel == 0 {
            return Err(TensorError::InvalidArgument {
                op: "im2col",
                detail: "kernel and stride must be positive".into(),
            });
        }
        let out_frames = geom.out_len(frames);
        if out_frames == 0 {
            return Err(TensorError::InvalidArgument {
                op: "im2col",
                detail: format!("{frames} frames shorter than kernel {}", geom.kernel),
            });
        }
        let width = geom.kernel * channels;
        let mut out = vec![R::zero(); batch * out_frames * width];
        let data = t.data();
        for b in 0..batch {
            for o in 0..out_frames {
                for kk in 0..geom.kernel {
                    let pos = (o * geom.stride + kk) as isize - geom.pad as isize;
                    if pos < 0 || pos as usize >= lengths[b] {
                        continue;
                    }
                    let src = (b * frames + pos as usize) * channels;
                    let dst = (b * out_frames + o) * width + kk * channels;
                    out[dst..dst + channels].copy_from_slice(&data[src..src + channels]);
                }
            }
        }
        let needs = self.needs(x.0);
        Ok(self.push(
            Tensor::from_parts(vec![batch * out_frames, width], out),
            Op::Im2Col {
                x: x.0,
                geom: geom.clone(),
                frames,
                channels,
                out_frames,
                lengths: lengths.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.node(a)?.value;
        let s = t.data().iter().copied().sum::<R>();
        check_finite("sum", &[s])?;
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::scalar(s), Op::SumAll(a.0), needs))
    }

    /// Sums over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, TensorError> {
        let t = &self.node(a)?.value;
        let d = *t.shape().last().ok_or(TensorError::InvalidArgument {
            op: "sum_last",
            detail: "scalar input".into(),
        })?;
        let out: Vec<R> = t.data().chunks(d).map(|c| c.iter().copied().sum()).collect();
        check_finite("sum_last", &out)?;
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let needs = self.needs(a.0);
        Ok(self.push(Tensor::from_parts(shape, out), Op::SumLast(a.0), needs))
    }

    /// Populates gradients of `loss` with respect to every grad-enabled leaf.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardTwice);
        }
        let shape = self.node(loss)?.value.shape();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            self.backward_node(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let nodes = &self.nodes;
        let out = nodes[i].value.data();
        let needs = |v: usize| nodes[v].needs_grad;
        let val = |v: usize| nodes[v].value.data();
        match &nodes[i].op {
            Op::Leaf => {}
            &Op::Binary { kind, a, b, bcast } => {
                let (xa, xb) = (val(a), val(b));
                if needs(a) {
                    match (kind, bcast) {
                        (BinKind::Add | BinKind::Sub, Bcast::Same | Bcast::Rhs) => add_owned(grads, a, g),
                        (BinKind::Add | BinKind::Sub, Bcast::Lhs) => reduce_into(grads, a, xa.len(), g, |_, gj| gj),
                        (BinKind::Mul, Bcast::Same) => {
                            add_owned_iter(grads, a, g.iter().zip(xb).map(|(&gj, &y)| gj * y))
                        }
                        (BinKind::Mul, Bcast::Rhs) => {
                            let ga = acc(grads, a, xa.len());
                            for (gc, dc) in g.chunks(xb.len()).zip(ga.chunks_mut(xb.len())) {
                                for ((d, &gj), &y) in dc.iter_mut().zip(gc).zip(xb) {
                                    *d += gj * y;
                                }
                            }
                        }
                        (BinKind::Mul, Bcast::Lhs) => reduce_into(grads, a, xa.len(), g, |j, gj| gj * xb[j]),
                    }
                }
                if needs(b) {
                    let sign = if kind == BinKind::Sub { -R::one() } else { R::one() };
                    match (kind, bcast) {
                        (BinKind::Add, Bcast::Same | Bcast::Lhs) => add_owned(grads, b, g),
                        (BinKind::Sub, Bcast::Same | Bcast::Lhs) => add_owned_iter(grads, b, g.iter().map(|&gj| -gj)),
                        (BinKind::Add | BinKind::Sub, Bcast::Rhs) => {
                            reduce_into(grads, b, xb.len(), g, |_, gj| gj * sign)
                        }
                        (BinKind::Mul, Bcast::Same) => {
                            add_owned_iter(grads, b, g.iter().zip(xa).map(|(&gj, &x)| gj * x))
                        }
                        (BinKind::Mul, Bcast::Lhs) => {
                            let gb = acc(grads, b, xb.len());
                            for (gc, dc) in g.chunks(xa.len()).zip(gb.chunks_mut(xa.len())) {
                                for ((d, &gj), &x) in dc.iter_mut().zip(gc).zip(xa) {
                                    *d += gj * x;
                                }
                            }
                        }
                        (BinKind::Mul, Bcast::Rhs) => reduce_into(grads, b, xb.len(), g, |j, gj| gj * xa[j]),
                    }
                }
            }
            &Op::Neg(a) => add_owned_iter(grads, a, g.iter().map(|&gj| -gj)),
            &Op::Exp(a) => add_owned_iter(grads, a, g.iter().zip(out).map(|(&gj, &y)| gj * y)),
            &Op::Log(a) => add_owned_iter(grads, a, g.iter().zip(val(a)).map(|(&gj, &x)| gj / x)),
            &Op::Scale(a, c) => add_owned_iter(grads, a, g.iter().map(|&gj| gj * c)),
            Op::Gelu(a, th) => {
                let (c, k, half) = (R::from_f64(GELU_C), R::from_f64(GELU_A), R::from_f64(0.5));
                let three = R::from_f64(3.0);
                let xa = val(*a);
                add_owned_iter(
                    grads,
                    *a,
                    g.iter().zip(xa).zip(th).map(|((&gj, &v), &t)| {
                        let d =
                            half * (R::one() + t) + half * v * (R::one() - t * t) * c * (R::one() + three * k * v * v);
                        gj * d
                    }),
                );
            }
            &Op::MatMul { a, b, dims } => {
                let MatMulDims {
                    batch,
                    m,
                    k,
                    n,
                    a_batched,
                    b_batched,
                    trans_b,
                } = dims;
                let (xa, xb) = (val(a), val(b));
                if needs(a) {
                    let ga = acc(grads, a, xa.len());
                    // ga += g · bᵀ
                    let b_strides = if trans_b { (k, 1) } else { (1, n) };
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        R::gemm(
                            m,
                            n,
                            k,
                            R::one(),
                            &g[bi * m * n..(bi + 1) * m * n],
                            (n, 1),
                            &xb[bo..bo + k * n],
                            b_strides,
                            R::one(),
                            &mut ga[ao..ao + m * k],
                            (k, 1),
                        );
                    }
                }
                if needs(b) {
                    let gb = acc(grads, b, xb.len());
                    for bi in 0..batch {
                        let ao = if a_batched { bi * m * k } else { 0 };
                        let bo = if b_batched { bi * k * n } else { 0 };
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let xa_b = &xa[ao..ao + m * k];
                        if trans_b {
                            // gb[n,k] += gᵀ · a
                            R::gemm(
                                n,
                                m,
                                k,
                                R::one(),
                                gs,
                                (1, n),
                                xa_b,
                                (k, 1),
                                R::one(),
                                &mut gb[bo..bo + k * n],
                                (k, 1),
                            );
                        } else {
                            // gb[k,n] += aᵀ · g
                            R::gemm(
                                k,
                                m,
                                n,
                                R::one(),
                                xa_b,
                                (1, k),
                                gs,
                                (n, 1),
                                R::one(),
                                &mut gb[bo..bo + k * n],
                                (n, 1),
                            );
                        }
                    }
                }
            }
            &Op::Reshape(a) => add_owned(grads, a, g),
            &Op::SwapAxes12 { a, dims } => {
                // the inverse permutation is the same swap on the output dims
                let back = swap12(g, [dims[0], dims[2], dims[1], dims[3]]);
                add_vec(grads, a, back);
            }
            &Op::LogSoftmax { a, outer, len, inner } => {
                let mut d = vec![R::zero(); g.len()];
                if inner == 1 {
                    for ((dr, gr), yr) in d.chunks_mut(len).zip(g.chunks(len)).zip(out.chunks(len)) {
                        let gs: R = gr.iter().copied().sum();
                        for ((x, &gj), &y) in dr.iter_mut().zip(gr).zip(yr) {
                            *x = gj - y.exp() * gs;
                        }
                    }
                } else {
                    for o in 0..outer {
                        for inn in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + inn;
                            let gs: R = (0..len).map(|j| g[at(j)]).sum();
                            for j in 0..len {
                                d[at(j)] = g[at(j)] - out[at(j)].exp() * gs;
                            }
                        }
                    }
                }
                add_vec(grads, a, d);
            }
            Op::MaskedSoftmax { a, mask } => {
                let keys = mask.keys;
                let mut d = vec![R::zero(); g.len()];
                for ((ys, gs), dr) in out.chunks(keys).zip(g.chunks(keys)).zip(d.chunks_mut(keys)) {
                    let dot: R = ys.iter().zip(gs).map(|(&y, &gy)| y * gy).sum();
                    for ((x, &y), &gy) in dr.iter_mut().zip(ys).zip(gs) {
                        *x = y * (gy - dot);
                    }
                }
                add_vec(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = val(*gain).len();
                let gv = val(*gain);
                if needs(*x) {
                    let dn = R::from_f64(d as f64);
                    let mut gx = vec![R::zero(); g.len()];
                    for (r, ((gr, hr), dst)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dh = R::zero();
                        let mut mean_dhh = R::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            mean_dh += dh;
                            mean_dhh += dh * hr[j];
                        }
                        mean_dh /= dn;
                        mean_dhh /= dn;
                        let rs = if rstd[r].is_finite() { rstd[r] } else { R::zero() };
                        for j in 0..d {
                            dst[j] = rs * (gr[j] * gv[j] - mean_dh - hr[j] * mean_dhh);
                        }
                    }
                    add_vec(grads, *x, gx);
                }
                if needs(*gain) {
                    let gg = acc(grads, *gain, d);
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for ((x, &gj), &h) in gg.iter_mut().zip(gr).zip(hr) {
                            *x += gj * h;
                        }
                    }
                }
                if needs(*bias) {
                    let gb = acc(grads, *bias, d);
                    for gr in g.chunks(d) {
                        for (x, &gj) in gb.iter_mut().zip(gr) {
                            *x += gj;
                        }
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                let n = val(*table).len();
                let width = g.len() / idx.len();
                let gt = acc(grads, *table, n);
                for (r, &src) in idx.iter().enumerate() {
                    let dst = &mut gt[src * width..(src + 1) * width];
                    for (x, &gj) in dst.iter_mut().zip(&g[r * width..(r + 1) * width]) {
                        *x += gj;
                    }
                }
            }
            Op::Im2Col {
                x,
                geom,
                frames,
                channels,
                out_frames,
                lengths,
            } => {
                let (frames, channels, out_frames) = (*frames, *channels, *out_frames);
                let width = geom.kernel * channels;
                let gx = acc(grads, *x, lengths.len() * frames * channels);
                for (b, &len) in lengths.iter().enumerate() {
                    for o in 0..out_frames {
                        for kk in 0..geom.kernel {
                            let pos = (o * geom.stride + kk) as isize - geom.pad as isize;
                            if pos < 0 || pos as usize >= len {
                                continue;
                            }
                            let dst = (b * frames + pos as usize) * channels;
                            let src = (b * out_frames + o) * width + kk * channels;
                            for c in 0..channels {
                                gx[dst + c] += g[src + c];
                            }
                        }
                    }
                }
            }
            &Op::SumAll(a) => {
                let n = val(a).len();
                add_vec(grads, a, vec![g[0]; n]);
            }
            &Op::SumLast(a) => {
                let n = val(a).len();
                let d = n / g.len();
                add_owned_iter(grads, a, g.iter().flat_map(|&gj| core::iter::repeat_n(gj, d)));
            }
        }
    }
}

fn zip_broadcast<R: Real>(bcast: Bcast, da: &[R], db: &[R], f: impl Fn(R, R) -> R) -> Vec<R> {
    let mut out = vec![R::zero(); da.len().max(db.len())];
    match bcast {
        Bcast::Same => {
            for ((o, &x), &y) in out.iter_mut().zip(da).zip(db) {
                *o = f(x, y);
            }
        }
        Bcast::Rhs => {
            for (oc, xc) in out.chunks_mut(db.len()).zip(da.chunks(db.len())) {
                for ((o, &x), &y) in oc.iter_mut().zip(xc).zip(db) {
                    *o = f(x, y);
                }
            }
        }
        Bcast::Lhs => {
            for (oc, yc) in out.chunks_mut(da.len()).zip(db.chunks(da.len())) {
                for ((o, &x), &y) in oc.iter_mut().zip(da).zip(yc) {
                    *o = f(x, y);
                }
            }
        }
    }
    out
}

fn acc<R: Real>(grads: &mut [Option<Vec<R>>], v: usize, len: usize) -> &mut Vec<R> {
    grads[v].get_or_insert_with(|| vec![R::zero(); len])
}

/// Adds an owned contribution, moving it in when the slot is empty.
fn add_vec<R: Real>(grads: &mut [Option<Vec<R>>], v: usize, d: Vec<R>) {
    match &mut grads[v] {
        Some(gv) => {
            for (x, y) in gv.iter_mut().zip(d) {
                *x += y;
            }
        }
        slot => *slot = Some(d),
    }
}

fn add_owned<R: Real>(grads: &mut [Option<Vec<R>>], v: usize, g: &[R]) {
    match &mut grads[v] {
        Some(gv) => {
            for (x, &y) in gv.iter_mut().zip(g) {
                *x += y;
            }
        }
        slot => *slot = Some(g.to_vec()),
    }
}

fn add_owned_iter<R: Real>(grads: &mut [Option<Vec<R>>], v: usize, it: impl Iterator<Item = R>) {
    match &mut grads[v] {
        Some(gv) => {
            for (x, y) in gv.iter_mut().zip(it) {
                *x += y;
            }
        }
        slot => *slot = Some(it.collect()),
    }
}

/// Sums an output-shaped gradient over the repeats of a broadcast operand
/// of `len` values.
fn reduce_into<R: Real>(grads: &mut [Option<Vec<R>>], v: usize, len: usize, g: &[R], f: impl Fn(usize, R) -> R) {
    let dst = acc(grads, v, len);
    for chunk in g.chunks(len) {
        for (j, (x, &gj)) in dst.iter_mut().zip(chunk).enumerate() {
            *x += f(j, gj);
        }
    }
}

fn swap12<R: Copy>(data: &[R], [d0, d1, d2, d3]: [usize; 4]) -> Vec<R> {
    let mut out = Vec::with_capacity(data.len());
    for i0 in 0..d0 {
        for i2 in 0..d2 {
            for i1 in 0..d1 {
                let src = ((i0 * d1 + i1) * d2 + i2) * d3;
                out.extend_from_slice(&data[src..src + d3]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn add_componentwise() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);
    }

    #[test]
    fn mul_by_zero_annihilates() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[3], &[1.5, -2.0, 7.0]));
        let z = tape.scalar(0.0);
        let c = tape.mul(a, z).unwrap();
        assert!(tape.value(c).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn exp_matches_scalar_evaluation() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[0.0, core::f64::consts::LN_2]));
        let e = tape.exp(a).unwrap();
        assert_abs_diff_eq!(tape.value(e).data()[0], 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(tape.value(e).data()[1], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn log_rejects_non_positive() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(tape.log(a), Err(TensorError::LogDomain { .. })));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn suffix_broadcast_adds_bias_per_row() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.param(t(&[2], &[10.0, 20.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0, 22.0, 13.0, 24.0]);
        let s = tape.sum(c).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(b).unwrap().data(), &[2.0, 2.0]);
    }

    fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for l in 0..k {
                    c[i * n + j] += a[i * k + l] * b[l * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let (a, b) = ([1.0, 2.0, 3.0, 4.0], [5.0, 6.0, 7.0, 8.0]);
        let expected = naive_matmul(&a, &b, 2, 2, 2);
        assert_eq!(expected, vec![19.0, 22.0, 43.0, 50.0]);
        let mut tape = Tape::new();
        let va = tape.constant(t(&[2, 2], &a));
        let vb = tape.constant(t(&[2, 2], &b));
        let c = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.value(c).data(), expected.as_slice());
    }

    #[test]
    fn matmul_identity_and_zero() {
        let a = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 4.0, -1.0]);
        let mut tape = Tape::new();
        let va = tape.constant(a.clone());
        let eye = tape.constant(Tensor::eye(3));
        let zero = tape.constant(Tensor::zeros(&[3, 2]));
        let id = tape.matmul(va, eye).unwrap();
        let z = tape.matmul(va, zero).unwrap();
        assert_eq!(tape.value(id), &a);
        assert!(tape.value(z).data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn matmul_inner_extent_mismatch() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.matmul(a, b).is_err());
        assert!(tape.matmul_nt(a, b).is_ok());
    }

    #[test]
    fn log_softmax_examples() {
        let mut tape = Tape::new();
        let u = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let lu = tape.log_softmax(u, 0).unwrap();
        for &v in tape.value(lu).data() {
            assert_abs_diff_eq!(v, -(3.0f64.ln()), epsilon = 1e-12);
        }
        let x = tape.constant(t(&[2, 3], &[1.0, 2.0, 3.0, 11.0, 12.0, 13.0]));
        let lx = tape.log_softmax(x, 1).unwrap();
        let d = tape.value(lx).data();
        for j in 0..3 {
            assert_abs_diff_eq!(d[j], d[3 + j], epsilon = 1e-12);
        }
        let y = tape.constant(t(&[2], &[0.0, 3.0f64.ln()]));
        let ly = tape.log_softmax(y, 0).unwrap();
        let d = tape.value(ly).data();
        // direct normalization: p = (1/4, 3/4)
        assert_abs_diff_eq!(d[0], (0.25f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d[1], (0.75f64).ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(d[0], -1.3863, epsilon = 1e-4);
        assert_abs_diff_eq!(d[1], -0.2877, epsilon = 1e-4);
    }

    #[test]
    fn log_softmax_over_leading_axis() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[0.0, 5.0, 0.0, -5.0]));
        let l = tape.log_softmax(x, 0).unwrap();
        let d = tape.value(l).data();
        assert_abs_diff_eq!(d[0].exp() + d[2].exp(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(d[1].exp() + d[3].exp(), 1.0, epsilon = 1e-12);
        assert!(tape.log_softmax(x, 2).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(t(&[2], &[1.0, 1.0]));
        let b0 = tape.constant(t(&[2], &[0.0, 0.0]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b0, 0.0).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let g3 = tape.constant(t(&[3], &[2.0, 3.0, 4.0]));
        let b3 = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        let c = tape.constant(t(&[3], &[7.0, 7.0, 7.0]));
        let yc = tape.layer_norm(c, g3, b3, 1e-5).unwrap();
        assert_eq!(tape.value(yc).data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn masked_softmax_zeroes_blocked_positions() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 1, 2, 3], &[1.0, 2.0, 3.0, 0.0, 0.0, 0.0]));
        let mask = SoftmaxMask {
            blocked: Rc::from(vec![false, true, false, true, true, true]),
            heads: 1,
            queries: 2,
            keys: 3,
        };
        let y = tape.masked_softmax(x, mask).unwrap();
        let d = tape.value(y).data();
        assert_eq!(d[1], 0.0);
        assert_abs_diff_eq!(d[0] + d[2], 1.0, epsilon = 1e-12);
        assert_eq!(&d[3..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_error_paths() {
        let mut empty = Tape::<f64>::new();
        assert_eq!(empty.backward(Var(0)), Err(TensorError::EmptyTape));

        let mut tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss { .. })));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.backward(s), Err(TensorError::BackwardTwice));
        tape.zero_grad();
        tape.backward(s).unwrap();
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut tape = Tape::new();
        let c = tape.constant(t(&[2], &[1.0, 2.0]));
        let x = tape.param(t(&[2], &[3.0, 4.0]));
        let p = tape.mul(c, x).unwrap();
        let s = tape.sum(p).unwrap();
        tape.backward(s).unwrap();
        assert!(tape.grad(c).is_none());
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 2.0]);
    }

    #[test]
    fn swap_axes_round_trip() {
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let x = tape.constant(t(&[2, 3, 2, 2], &data));
        let y = tape.swap_axes12(x).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 3, 2]);
        // element (0, 1, 2, 1) of y is element (0, 2, 1, 1) of x
        assert_eq!(tape.value(y).data()[(1 * 3 + 2) * 2 + 1], data[(2 * 2 + 1) * 2 + 1]);
        let z = tape.swap_axes12(y).unwrap();
        assert_eq!(tape.value(z).data(), data.as_slice());
    }

    #[test]
    fn im2col_ignores_padding_region() {
        let geom = ConvGeometry {
            kernel: 3,
            stride: 2,
            pad: 1,
        };
        let mut tape = Tape::new();
        let x1 = tape.constant(t(&[1, 4, 1], &[1.0, 2.0, 3.0, 99.0]));
        let x2 = tape.constant(t(&[1, 4, 1], &[1.0, 2.0, 3.0, -7.0]));
        let c1 = tape.im2col(x1, &geom, &[3]).unwrap();
        let c2 = tape.im2col(x2, &geom, &[3]).unwrap();
        assert_eq!(tape.value(c1), tape.value(c2));
        assert_eq!(tape.value(c1).data(), &[0.0, 1.0, 2.0, 2.0, 3.0, 0.0]);
    }
}
