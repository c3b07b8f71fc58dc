use indexmap::IndexMap;

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Named model parameters, kept in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    entries: IndexMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: IndexMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.entries.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore { entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers every parameter on `g`, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BoundParams {
        let vars = self.entries.iter().map(|(k, v)| (k.clone(), g.leaf(v.clone(), trainable))).collect();
        BoundParams { vars }
    }

    /// Binds with the given `vars` already on the graph (e.g. from a grad-check closure).
    pub fn bind_existing(&self, vars: &[Var]) -> BoundParams {
        assert_eq!(vars.len(), self.entries.len());
        BoundParams { vars: self.entries.keys().cloned().zip(vars.iter().copied()).collect() }
    }

    pub fn tensors(&self) -> Vec<Tensor<T>> {
        self.entries.values().cloned().collect()
    }
}

/// Name-to-[`Var`] map for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::Contract(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients after `backward`, keyed like the store.
    pub fn grads<T: Element>(&self, g: &Graph<T>) -> ParamStore<T> {
        let mut out = ParamStore::new();
        for (name, v) in &self.vars {
            let grad = g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(*v)));
            out.insert(name.clone(), grad);
        }
        out
    }
}
