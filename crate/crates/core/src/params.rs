//! Named parameter storage and binding into a [`Graph`].

use std::collections::{BTreeMap, HashMap};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// All parameters of a model, keyed by dotted name (`blocks.3.qkv.w`).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn numel_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.tensors.iter().filter(|(n, _)| pred(n)).map(|(_, t)| t.len()).sum()
    }

    /// Sub-store with every parameter whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(n, _)| n.starts_with(prefix))
                .map(|(n, t)| (n.clone(), t.clone()))
                .collect(),
        }
    }
}

/// Layer-norm parameters and biases are exempt from weight decay.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".b") || name.contains("norm")
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BindMode {
    /// Trainable iff the binder's predicate says so.
    Auto,
    /// Always a constant (frozen or no-grad forward).
    Const,
    /// Always trainable, regardless of freeze state.
    Live,
}

/// Lazily binds parameters of a store into one graph, at most once per
/// `(name, trainable)` pair.
pub struct Binder<'a> {
    store: &'a ParamStore,
    trainable: Box<dyn Fn(&str) -> bool + 'a>,
    cache: HashMap<(String, bool), Var>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(&str) -> bool + 'a) -> Self {
        Self { store, trainable: Box::new(trainable), cache: HashMap::new() }
    }

    /// Binder that binds everything as a constant.
    pub fn frozen(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn bind(&mut self, g: &mut Graph, name: &str, mode: BindMode) -> Result<Var> {
        let grad = match mode {
            BindMode::Auto => (self.trainable)(name),
            BindMode::Const => false,
            BindMode::Live => true,
        };
        if let Some(&v) = self.cache.get(&(name.to_string(), grad)) {
            return Ok(v);
        }
        let t = self.store.get(name)?.clone();
        let v = if grad { g.param(name, t)? } else { g.constant(t)? };
        self.cache.insert((name.to_string(), grad), v);
        Ok(v)
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Result<Var> {
        self.bind(g, name, BindMode::Auto)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decay_exemption_by_role() {
        assert!(is_decay_exempt("blocks.0.norm1.g"));
        assert!(is_decay_exempt("blocks.0.qkv.b"));
        assert!(!is_decay_exempt("blocks.0.qkv.w"));
        assert!(!is_decay_exempt("pos_embed"));
    }

    #[test]
    fn binder_caches_per_mode() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::ones(&[2]));
        let mut g = Graph::new();
        let mut b = Binder::new(&store, |_| true);
        let a = b.var(&mut g, "w").unwrap();
        let live = b.bind(&mut g, "w", BindMode::Live).unwrap();
        let c = b.bind(&mut g, "w", BindMode::Const).unwrap();
        assert_eq!(a, live);
        assert_ne!(a, c);
        assert!(g.requires_grad(a) && !g.requires_grad(c));
        assert!(b.var(&mut g, "missing").is_err());
    }
}
