//! Parameter registry and the small layers shared by every module.

use rand::RngCore;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Visual,
    Rest,
}

#[derive(Debug, Clone)]
pub struct NamedParam {
    pub name: String,
    pub tensor: Tensor,
    pub group: ParamGroup,
}

/// Ordered, uniquely named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<NamedParam>,
}

impl ParamStore {
    pub fn iter(&self) -> impl Iterator<Item = &NamedParam> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|p| p.name == name).map(|p| &p.tensor)
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.entries.iter().map(|p| p.tensor.clone()).collect()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.entries.iter().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grads(&self) {
        self.entries.iter().for_each(|p| p.tensor.zero_grad());
    }

    fn push(&mut self, name: String, tensor: Tensor, group: ParamGroup) -> Tensor {
        assert!(self.get(&name).is_none(), "duplicate parameter name {name}");
        self.entries.push(NamedParam {
            name,
            tensor: tensor.clone(),
            group,
        });
        tensor
    }
}

/// Creates and registers parameters under a name prefix.
pub struct ParamBuilder<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut dyn RngCore,
    std: f64,
    prefix: String,
    group: ParamGroup,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut dyn RngCore, std: f64) -> Self {
        Self {
            store,
            rng,
            std,
            prefix: String::new(),
            group: ParamGroup::Rest,
        }
    }

    /// Child builder whose names are prefixed with `name.`.
    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng,
            std: self.std,
            prefix,
            group: self.group,
        }
    }

    pub fn with_group(mut self, group: ParamGroup) -> Self {
        self.group = group;
        self
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Tensor {
        let t = Tensor::randn(shape, self.std, &mut *self.rng).trainable();
        let name = self.full_name(name);
        self.store.push(name, t, self.group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Tensor {
        let t = Tensor::full(shape, value).trainable();
        let name = self.full_name(name);
        self.store.push(name, t, self.group)
    }
}

/// `y = x · W (+ b)` over the last axis.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let mut s = b.scope(name);
        let weight = s.normal("weight", &[d_in, d_out]);
        let bias = bias.then(|| s.constant("bias", &[d_out], 0.0));
        Self { weight, bias }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.matmul(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[1]
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, d: usize, eps: f64) -> Self {
        let mut s = b.scope(name);
        Self {
            gamma: s.constant("gamma", &[d], 1.0),
            beta: s.constant("beta", &[d], 0.0),
            eps,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.layer_norm(&self.gamma, &self.beta, self.eps)
    }
}

/// Position-wise `Linear → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, d: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        Self {
            inner: Linear::new(&mut s, "inner", d, hidden, true),
            outer: Linear::new(&mut s, "outer", hidden, d, true),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.outer.forward(&self.inner.forward(x)?.relu())
    }
}

/// `[len, d]` sinusoid table: even columns `sin(p / 10000^(2i/d))`, odd
/// columns the matching cosine.
pub fn sinusoid_table(len: usize, d: usize) -> Result<Tensor> {
    if len == 0 || d == 0 {
        return Err(Error::contract("sinusoid table needs positive length and width"));
    }
    let mut data = vec![0.0; len * d];
    for pos in 0..len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(&[len, d], data)
}
