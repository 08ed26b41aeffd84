use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use super::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::ModelError;
use crate::rng::rng;
use crate::tensor::{Real, Tensor};

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    /// Xavier-uniform over a `[fan_in, fan_out]` matrix.
    Xavier,
    /// N(0, 1/sqrt(d)) for embedding tables.
    Embedding,
    Zeros,
    Ones,
}

fn push_linear(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, din: usize, dout: usize) {
    out.push((format!("{name}.weight"), vec![din, dout], Init::Xavier));
    out.push((format!("{name}.bias"), vec![dout], Init::Zeros));
}

fn push_norm(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    out.push((format!("{name}.gain"), vec![d], Init::Ones));
    out.push((format!("{name}.bias"), vec![d], Init::Zeros));
}

fn push_attention(out: &mut Vec<(String, Vec<usize>, Init)>, name: &str, d: usize) {
    for proj in ["q", "k", "v", "o"] {
        push_linear(out, &format!("{name}.{proj}"), d, d);
    }
}

fn layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f) = (cfg.d_model, cfg.ffn_dim);
    let mut out = Vec::new();
    let mut channels = cfg.feat_dim;
    for i in 0..cfg.conv_layers {
        push_linear(&mut out, &format!("conv.{i}"), cfg.conv_kernel * channels, d);
        channels = d;
    }
    for i in 0..cfg.enc_layers {
        let p = format!("enc.{i}");
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_attention(&mut out, &format!("{p}.attn"), d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
        push_linear(&mut out, &format!("{p}.fc1"), d, f);
        push_linear(&mut out, &format!("{p}.fc2"), f, d);
    }
    push_norm(&mut out, "enc.ln", d);
    out.push(("dec.embed".into(), vec![cfg.vocab_size, d], Init::Embedding));
    for i in 0..cfg.dec_layers {
        let p = format!("dec.{i}");
        push_norm(&mut out, &format!("{p}.ln1"), d);
        push_attention(&mut out, &format!("{p}.self_attn"), d);
        push_norm(&mut out, &format!("{p}.ln2"), d);
        push_attention(&mut out, &format!("{p}.cross_attn"), d);
        push_norm(&mut out, &format!("{p}.ln3"), d);
        push_linear(&mut out, &format!("{p}.fc1"), d, f);
        push_linear(&mut out, &format!("{p}.fc2"), f, d);
    }
    push_norm(&mut out, "dec.ln", d);
    if !cfg.tie_embeddings {
        out.push(("dec.out_proj".into(), vec![cfg.vocab_size, d], Init::Embedding));
    }
    out
}

/// Named model parameters, iterated in name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<R> {
    tensors: BTreeMap<String, Tensor<R>>,
}

impl<R: Real> Default for ParamStore<R> {
    fn default() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }
}

impl<R: Real> ParamStore<R> {
    /// Randomly initialized parameters for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = rng(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape, init) in layout(cfg) {
            let n: usize = shape.iter().product();
            let data: Vec<R> = match init {
                Init::Zeros => vec![R::zero(); n],
                Init::Ones => vec![R::one(); n],
                Init::Xavier => {
                    let a = Float::sqrt(6.0 / (shape[0] + shape[1]) as f64);
                    (0..n).map(|_| R::from_f64(rng.random_range(-a..a))).collect()
                }
                Init::Embedding => {
                    let std = 1.0 / Float::sqrt(shape[1] as f64);
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| R::from_f64(dist.sample(&mut rng))).collect()
                }
            };
            tensors.insert(name, Tensor::new(&shape, data)?);
        }
        Ok(Self { tensors })
    }

    /// Names and shapes every parameter set for `cfg` must have.
    pub fn expected_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
        layout(cfg).into_iter().map(|(n, s, _)| (n, s)).collect()
    }

    /// Checks that exactly the parameters of `cfg` are present with the right shapes.
    pub fn check(&self, cfg: &ModelConfig) -> Result<(), ModelError> {
        let expected = Self::expected_shapes(cfg);
        for (name, shape) in &expected {
            let t = self
                .tensors
                .get(name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if t.shape() != shape.as_slice() {
                return Err(ModelError::ParameterShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                });
            }
        }
        if expected.len() != self.tensors.len() {
            let extra = self
                .tensors
                .keys()
                .find(|k| !expected.iter().any(|(n, _)| n == *k))
                .cloned()
                .unwrap_or_default();
            return Err(ModelError::Config(format!("unexpected parameter {extra}")));
        }
        Ok(())
    }

    pub fn insert(&mut self, name: String, t: Tensor<R>) {
        self.tensors.insert(name, t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<R>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<R>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<R>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<R>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn cast<S: Real>(&self) -> ParamStore<S> {
        ParamStore {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every parameter whose name starts with `prefix` from `other`.
    /// Returns how many tensors were copied.
    pub fn copy_prefix_from(&mut self, other: &ParamStore<R>, prefix: &str) -> Result<usize, ModelError> {
        let mut copied = 0;
        for (name, t) in other.iter().filter(|(n, _)| n.starts_with(prefix)) {
            let dst = self
                .tensors
                .get_mut(name)
                .ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if dst.shape() != t.shape() {
                return Err(ModelError::ParameterShape {
                    name: name.clone(),
                    expected: dst.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            *dst = t.clone();
            copied += 1;
        }
        Ok(copied)
    }
}

/// Parameters placed on a tape, addressable by name.
#[derive(Clone, Debug, Default)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    /// Places every parameter on `tape`, grad-enabled when `trainable`.
    pub fn bind<R: Real>(tape: &mut Tape<R>, store: &ParamStore<R>, trainable: bool) -> Self {
        let vars = store
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Self { vars }
    }

    /// Wraps variables already on a tape under parameter names.
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        Self {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var, ModelError> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParameter(name.into()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collects the gradient of every bound parameter after `backward`.
    /// Parameters the loss does not depend on get zero gradients.
    pub fn grads<R: Real>(&self, tape: &Tape<R>) -> ParamStore<R> {
        let mut out = ParamStore::default();
        for (name, &v) in &self.vars {
            let g = tape.grad(v).unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_matches_expected_layout_and_is_seeded() {
        let cfg = ModelConfig::toy(20);
        let a = ParamStore::<f32>::init(&cfg, 1).unwrap();
        let b = ParamStore::<f32>::init(&cfg, 1).unwrap();
        let c = ParamStore::<f32>::init(&cfg, 2).unwrap();
        a.check(&cfg).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.is_finite());
        assert!(a.get("dec.out_proj").is_none());
        assert_eq!(a.get("conv.0.weight").unwrap().shape(), &[5 * 16, 64]);
    }

    #[test]
    fn untied_config_has_output_projection() {
        let mut cfg = ModelConfig::toy(20);
        cfg.tie_embeddings = false;
        let p = ParamStore::<f32>::init(&cfg, 1).unwrap();
        assert_eq!(p.get("dec.out_proj").unwrap().shape(), &[20, 64]);
        assert!(p.check(&ModelConfig::toy(20)).is_err());
    }

    #[test]
    fn copy_prefix_copies_only_matching() {
        let cfg = ModelConfig::toy(20);
        let src = ParamStore::<f32>::init(&cfg, 1).unwrap();
        let mut dst = ParamStore::<f32>::init(&cfg, 2).unwrap();
        let n = dst.copy_prefix_from(&src, "enc.").unwrap();
        assert!(n > 0);
        assert_eq!(dst.get("enc.0.fc1.weight"), src.get("enc.0.fc1.weight"));
        assert_ne!(dst.get("dec.embed"), src.get("dec.embed"));
    }
}
