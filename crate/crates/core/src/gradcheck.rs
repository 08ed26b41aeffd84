//! Central finite-difference checks of reverse-mode gradients.

use alloc::vec::Vec;

use num_traits::Float;

use crate::autograd::{Tape, Var};
use crate::tensor::Tensor;

/// Errors below this magnitude are compared absolutely.
pub const REL_FLOOR: f64 = 1e-3;

/// Worst disagreement found by [`check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_error: f64,
    /// `(input, element)` of the worst coordinate.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, REL_FLOOR)`
pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Differentiates `f` at `inputs` both ways and reports the worst element.
///
/// `f` receives the inputs as grad-enabled leaves and must return a scalar.
/// `coords` selects which elements of each input are perturbed; `None`
/// checks every element.
pub fn check<E>(
    inputs: &[Tensor<f64>],
    coords: Option<&[Vec<usize>]>,
    h: f64,
    f: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, E>,
) -> Result<GradReport, E> {
    let eval = |xs: &[Tensor<f64>]| -> Result<f64, E> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let loss = f(&mut tape, &vars)?;
        Ok(tape.value(loss).data()[0])
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = f(&mut tape, &vars)?;
    tape.backward(loss).expect("scalar loss");
    let mut report = GradReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let mut xs = inputs.to_vec();
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape
            .grad(v)
            .unwrap_or_else(|| Tensor::zeros(inputs[i].shape()))
            .into_data();
        let all: Vec<usize>;
        let picked = match coords {
            Some(c) => &c[i],
            None => {
                all = (0..analytic.len()).collect();
                &all
            }
        };
        for &j in picked {
            let x0 = xs[i].data()[j];
            xs[i].data_mut()[j] = x0 + h;
            let up = eval(&xs)?;
            xs[i].data_mut()[j] = x0 - h;
            let down = eval(&xs)?;
            xs[i].data_mut()[j] = x0;
            let numeric = (up - down) / (2.0 * h);
            let err = rel_error(analytic[j], numeric);
            report.checked += 1;
            if err > report.max_rel_error || !Float::is_finite(err) {
                report = GradReport {
                    max_rel_error: err,
                    worst: (i, j),
                    analytic: analytic[j],
                    numeric,
                    checked: report.checked,
                };
            }
        }
    }
    Ok(report)
}

/// One step of a [`RandomGraph`], acting on a `[rows, cols]` state.
#[derive(Clone, Debug, PartialEq)]
enum Step {
    /// times input `w`, `[cols, new_cols]`
    MatMul(usize),
    /// times the transpose of input `w`, `[new_cols, cols]`
    MatMulNt(usize),
    /// plus a `[cols]` input
    AddBias(usize),
    /// times a `[rows, cols]` input
    MulInput(usize),
    /// minus a `[rows, cols]` input
    SubInput(usize),
    Gelu,
    Neg,
    Scale(f64),
    /// `exp(x / 4)`
    Exp,
    /// `log(x * x + 1)`
    LogSquarePlusOne,
    /// layer norm with gain and bias inputs
    LayerNorm(usize, usize),
    LogSoftmax(usize),
    MaskedSoftmax(Vec<bool>),
    Transpose,
    Gather(Vec<usize>),
    /// kernel 3, stride 2, pad 1 over rows
    Im2Col(usize),
    /// row sums times a `[1, cols]` input
    SumLastOuter(usize),
}

/// A randomly composed differentiable program over small inputs, used to
/// exercise every tape operation under finite differences.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    pub inputs: Vec<Tensor<f64>>,
    steps: Vec<Step>,
    /// `[rows, cols]` weights of the final weighted sum
    readout: usize,
}

impl RandomGraph {
    pub fn new(seed: u64, depth: usize) -> Self {
        use rand::Rng as _;
        let mut rng = crate::rng::rng(seed);
        let mut inputs = Vec::new();
        let mut tensor = |rng: &mut crate::rng::Rng, shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
            inputs.push(Tensor::new(shape, data).expect("positive extents"));
            inputs.len() - 1
        };
        let (mut rows, mut cols) = (rng.random_range(2..5), rng.random_range(2..5));
        tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        let mut steps = Vec::new();
        for _ in 0..depth {
            let step = match rng.random_range(0..17) {
                0 => {
                    let n = rng.random_range(2..5);
                    let w = tensor(&mut rng, &[cols, n], -1.0, 1.0);
                    cols = n;
                    Step::MatMul(w)
                }
                1 => {
                    let n = rng.random_range(2..5);
                    let w = tensor(&mut rng, &[n, cols], -1.0, 1.0);
                    cols = n;
                    Step::MatMulNt(w)
                }
                2 => Step::AddBias(tensor(&mut rng, &[cols], -1.0, 1.0)),
                3 => Step::MulInput(tensor(&mut rng, &[rows, cols], -1.5, 1.5)),
                4 => Step::SubInput(tensor(&mut rng, &[rows, cols], -1.0, 1.0)),
                5 => Step::Gelu,
                6 => Step::Neg,
                7 => Step::Scale(rng.random_range(-2.0..2.0)),
                8 => Step::Exp,
                9 => Step::LogSquarePlusOne,
                10 if cols > 1 => {
                    let g = tensor(&mut rng, &[cols], 0.5, 1.5);
                    let b = tensor(&mut rng, &[cols], -0.5, 0.5);
                    Step::LayerNorm(g, b)
                }
                11 => Step::LogSoftmax(rng.random_range(0..2)),
                12 => Step::MaskedSoftmax((0..rows * cols).map(|_| rng.random_bool(0.3)).collect()),
                13 => {
                    core::mem::swap(&mut rows, &mut cols);
                    Step::Transpose
                }
                14 => {
                    let n = rng.random_range(1..6);
                    let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..rows)).collect();
                    rows = n;
                    Step::Gather(idx)
                }
                15 if rows >= 2 => {
                    let len = rng.random_range(1..=rows);
                    rows = rows.div_ceil(2);
                    cols *= 3;
                    Step::Im2Col(len)
                }
                _ => Step::SumLastOuter(tensor(&mut rng, &[1, cols], -1.0, 1.0)),
            };
            steps.push(step);
        }
        let readout = tensor(&mut rng, &[rows, cols], -1.0, 1.0);
        Self { inputs, steps, readout }
    }

    /// Builds the program on `tape` over `vars` (one per input) and returns
    /// the scalar output.
    pub fn build(&self, tape: &mut Tape<f64>, vars: &[Var]) -> Result<Var, crate::TensorError> {
        use crate::autograd::{ConvGeometry, SoftmaxMask};
        let mut x = vars[0];
        for step in &self.steps {
            let [rows, cols] = [tape.shape(x)[0], tape.shape(x)[1]];
            x = match step {
                &Step::MatMul(w) => tape.matmul(x, vars[w])?,
                &Step::MatMulNt(w) => tape.matmul_nt(x, vars[w])?,
                &Step::AddBias(b) => tape.add(x, vars[b])?,
                &Step::MulInput(m) => tape.mul(x, vars[m])?,
                &Step::SubInput(m) => tape.sub(x, vars[m])?,
                Step::Gelu => tape.gelu(x)?,
                Step::Neg => tape.neg(x)?,
                &Step::Scale(c) => tape.scale(x, c)?,
                Step::Exp => {
                    let q = tape.scale(x, 0.25)?;
                    tape.exp(q)?
                }
                Step::LogSquarePlusOne => {
                    let sq = tape.mul(x, x)?;
                    let one = tape.scalar(1.0);
                    let s = tape.add(sq, one)?;
                    tape.log(s)?
                }
                &Step::LayerNorm(g, b) => tape.layer_norm(x, vars[g], vars[b], 1e-5)?,
                &Step::LogSoftmax(axis) => tape.log_softmax(x, axis)?,
                Step::MaskedSoftmax(blocked) => {
                    let x3 = tape.reshape(x, &[1, rows, cols])?;
                    let mask = SoftmaxMask {
                        blocked: blocked.clone().into(),
                        heads: 1,
                        queries: rows,
                        keys: cols,
                    };
                    let y = tape.masked_softmax(x3, mask)?;
                    tape.reshape(y, &[rows, cols])?
                }
                Step::Transpose => {
                    let x4 = tape.reshape(x, &[1, rows, cols, 1])?;
                    let y = tape.swap_axes12(x4)?;
                    tape.reshape(y, &[cols, rows])?
                }
                Step::Gather(idx) => tape.gather_rows(x, idx)?,
                &Step::Im2Col(len) => {
                    let x3 = tape.reshape(x, &[1, rows, cols])?;
                    let geom = ConvGeometry {
                        kernel: 3,
                        stride: 2,
                        pad: 1,
                    };
                    tape.im2col(x3, &geom, &[len])?
                }
                &Step::SumLastOuter(w) => {
                    let s = tape.sum_last(x)?;
                    let s = tape.reshape(s, &[rows, 1])?;
                    tape.matmul(s, vars[w])?
                }
            };
        }
        let y = tape.mul(x, vars[self.readout])?;
        tape.sum(y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_graphs_match_finite_differences() {
        for seed in 0..200 {
            let g = RandomGraph::new(seed, 6);
            let r = check(&g.inputs, None, 1e-4, |t, v| g.build(t, v)).unwrap();
            assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?} {g:?}");
        }
    }

    #[test]
    fn rel_error_floor() {
        assert_eq!(rel_error(2.0, 1.0), 0.5);
        assert_eq!(rel_error(0.0, 1e-5), 1e-2);
    }
}
