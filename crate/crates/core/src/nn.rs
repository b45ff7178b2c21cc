//! Named parameter registry and the small layer vocabulary built on it.
//!
//! A [`ParamStore`] owns every learned tensor under a dotted name, in
//! insertion order. For a forward pass it is bound onto a [`Graph`], which
//! yields a [`Bound`] view resolving names to tape variables.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Gradients, Graph, Tensor, Var};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
        Ok(())
    }

    pub fn position(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.tensors[self.position(name)?])
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.position(name)?;
        Ok(&mut self.tensors[i])
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    /// Names starting with `prefix`, in store order.
    pub fn names_with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = &'a str> {
        self.names
            .iter()
            .map(String::as_str)
            .filter(move |n| n.starts_with(prefix))
    }

    /// Record every parameter on `g`, as gradient leaves when `trainable`.
    pub fn bind<'s, 'g>(&'s self, g: &'g Graph, trainable: bool) -> Bound<'s, 'g> {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        Bound { store: self, vars }
    }
}

/// A [`ParamStore`] whose tensors live on one graph.
#[derive(Clone)]
pub struct Bound<'s, 'g> {
    store: &'s ParamStore,
    vars: Vec<Var<'g>>,
}

impl<'s, 'g> Bound<'s, 'g> {
    /// Pair existing variables with a store's names (one per parameter, in
    /// store order). Used by gradient checks that own the leaves.
    pub fn from_vars(store: &'s ParamStore, vars: Vec<Var<'g>>) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::Contract(format!(
                "{} variables for {} parameters",
                vars.len(),
                store.len()
            )));
        }
        Ok(Bound { store, vars })
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn var(&self, name: &str) -> Result<Var<'g>> {
        Ok(self.vars[self.store.position(name)?])
    }

    pub fn vars(&self) -> &[Var<'g>] {
        &self.vars
    }

    /// Gradients for every parameter, in store order.
    pub fn gradients(&self, grads: &Gradients) -> Vec<Tensor> {
        self.vars.iter().map(|v| grads.wrt(*v)).collect()
    }

    /// `x · W + b` over the last axis.
    pub fn linear(&self, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = self.var(&format!("{prefix}.b"))?;
        x.matmul(w)?.add(b)
    }

    /// Linear, ReLU, linear.
    pub fn mlp(&self, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        let h = self.linear(&format!("{prefix}.0"), x)?.relu()?;
        self.linear(&format!("{prefix}.1"), h)
    }

    pub fn conv(&self, prefix: &str, x: Var<'g>, stride: usize, pad: usize) -> Result<Var<'g>> {
        let w = self.var(&format!("{prefix}.w"))?;
        let b = self.var(&format!("{prefix}.b"))?;
        x.conv2d(w, stride, pad)?.add(b)
    }

    pub fn layer_norm(&self, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        let gamma = self.var(&format!("{prefix}.gamma"))?;
        let beta = self.var(&format!("{prefix}.beta"))?;
        x.layer_norm(gamma, beta, 1e-5)
    }
}

/// Uniform in `±bound`.
fn uniform<R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    Tensor::uniform(shape, -bound, bound, rng)
}

/// `prefix.w: [din, dout]` with variance `1/din`, `prefix.b: [dout]` zero.
pub fn init_linear<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (3.0 / din.max(1) as f64).sqrt();
    store.insert(format!("{prefix}.w"), uniform(&[din, dout], bound, rng))?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[dout]))
}

/// Bias-free projection matrix `[din, dout]` with variance `1/din`.
pub fn init_matrix<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    din: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    let bound = (3.0 / din.max(1) as f64).sqrt();
    store.insert(name, uniform(&[din, dout], bound, rng))
}

/// Two linears with a ReLU between: `din → hidden → dout`.
pub fn init_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    din: usize,
    hidden: usize,
    dout: usize,
    rng: &mut R,
) -> Result<()> {
    init_linear(store, &format!("{prefix}.0"), din, hidden, rng)?;
    init_linear(store, &format!("{prefix}.1"), hidden, dout, rng)
}

/// `prefix.w: [cout, cin, k, k]` He-uniform, `prefix.b: [cout, 1, 1]` zero.
pub fn init_conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut R,
) -> Result<()> {
    let fan_in = (cin * k * k).max(1) as f64;
    let bound = (6.0 / fan_in).sqrt();
    store.insert(
        format!("{prefix}.w"),
        uniform(&[cout, cin, k, k], bound, rng),
    )?;
    store.insert(format!("{prefix}.b"), Tensor::zeros(&[cout, 1, 1]))
}

pub fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) -> Result<()> {
    store.insert(format!("{prefix}.gamma"), Tensor::ones(&[d]))?;
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[d]))
}
