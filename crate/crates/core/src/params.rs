//! Named parameter sets and the building blocks shared by both networks.

use std::collections::BTreeMap;

use crate::error::{DivaError, Result};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

/// Ordered map from parameter name to value.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t.with_grad(false));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| DivaError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Union of two sets; names must be disjoint.
    pub fn merged(&self, other: &ParamSet) -> Result<ParamSet> {
        let mut out = self.clone();
        for (k, v) in other.iter() {
            if out.tensors.contains_key(k) {
                return Err(DivaError::InvalidArgument(format!(
                    "duplicate parameter `{k}`"
                )));
            }
            out.insert(k.clone(), v.clone());
        }
        Ok(out)
    }

    /// Keeps entries whose name starts with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> ParamSet {
        ParamSet {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    /// Places every parameter on `tape` as a leaf, grad-enabled iff
    /// `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        Bound {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone().with_grad(trainable))))
                .collect(),
        }
    }

    pub(crate) fn add_linear(
        &mut self,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut RngStream,
    ) {
        let std = 1.0 / (fan_in as f64).sqrt();
        self.insert(
            format!("{name}.weight"),
            normal(&[fan_in, fan_out], std, rng),
        );
        self.insert(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
    }

    pub(crate) fn add_layer_norm(&mut self, name: &str, dim: usize) {
        self.insert(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        self.insert(format!("{name}.bias"), Tensor::zeros(&[dim]));
    }

    pub(crate) fn add_attention(
        &mut self,
        name: &str,
        q_dim: usize,
        kv_dim: usize,
        rng: &mut RngStream,
    ) {
        self.add_linear(&format!("{name}.q"), q_dim, q_dim, rng);
        self.add_linear(&format!("{name}.k"), kv_dim, q_dim, rng);
        self.add_linear(&format!("{name}.v"), kv_dim, q_dim, rng);
        self.add_linear(&format!("{name}.out"), q_dim, q_dim, rng);
    }

    pub(crate) fn add_mlp(&mut self, name: &str, dim: usize, hidden: usize, rng: &mut RngStream) {
        self.add_linear(&format!("{name}.fc1"), dim, hidden, rng);
        self.add_linear(&format!("{name}.fc2"), hidden, dim, rng);
    }
}

pub(crate) fn normal(shape: &[usize], std: f64, rng: &mut RngStream) -> Tensor {
    crate::rng::sample_gaussian(shape, rng).scale(std)
}

/// A [`ParamSet`] placed on a tape.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| DivaError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

pub(crate) fn linear(tape: &mut Tape, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add_row(y, b)
}

pub(crate) fn layer_norm(tape: &mut Tape, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let g = p.get(&format!("{name}.gain"))?;
    let b = p.get(&format!("{name}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

pub(crate) fn mlp(tape: &mut Tape, x: Var, p: &Bound, name: &str) -> Result<Var> {
    let h = linear(tape, x, p, &format!("{name}.fc1"))?;
    let h = tape.gelu(h)?;
    linear(tape, h, p, &format!("{name}.fc2"))
}

/// Multi-head scaled dot-product attention of `queries` over `context`.
/// No positional information is added here.
pub(crate) fn attention(
    tape: &mut Tape,
    queries: Var,
    context: Var,
    p: &Bound,
    name: &str,
    heads: usize,
) -> Result<Var> {
    let q = linear(tape, queries, p, &format!("{name}.q"))?;
    let k = linear(tape, context, p, &format!("{name}.k"))?;
    let v = linear(tape, context, p, &format!("{name}.v"))?;
    let dim = tape.value(q).shape()[1];
    let dh = dim / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.matmul_t(qh, kh, false, true)?;
        let scores = tape.scale(scores, scale)?;
        let weights = tape.softmax(scores, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let joined = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    linear(tape, joined, p, &format!("{name}.out"))
}

/// Gradients keyed by parameter name.
pub type ParamGrads = BTreeMap<String, Tensor>;

/// Extracts gradients for every bound parameter that received one.
pub fn collect_grads(grads: &crate::tape::Gradients, bound: &Bound) -> ParamGrads {
    bound
        .iter()
        .filter_map(|(k, &v)| grads.get(v).map(|g| (k.clone(), g.clone())))
        .collect()
}
