use std::collections::{BTreeMap, HashMap};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;

/// Named trainable parameters, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Fresh `N(0, std²)` tensor.
    pub fn normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
        let dist = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).unwrap()
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), vec![v; n]).unwrap()
    }
}

/// Binds parameters into a [`Graph`] on first use during one forward pass.
///
/// Parameters whose name starts with a frozen prefix enter as constants.
pub struct Binder<'a> {
    store: &'a ParamStore,
    bound: HashMap<&'a str, Var>,
    frozen: Vec<String>,
}

impl<'a> Binder<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self { store, bound: HashMap::new(), frozen: Vec::new() }
    }

    pub fn with_frozen(store: &'a ParamStore, frozen_prefixes: &[&str]) -> Self {
        Self { store, bound: HashMap::new(), frozen: frozen_prefixes.iter().map(|s| s.to_string()).collect() }
    }

    pub fn store(&self) -> &'a ParamStore {
        self.store
    }

    pub fn get(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(&v) = self.bound.get(name) {
            return v;
        }
        let (key, value) =
            self.store.params.get_key_value(name).unwrap_or_else(|| panic!("unknown parameter {name:?}"));
        let frozen = self.frozen.iter().any(|p| name.starts_with(p.as_str()));
        let v = if frozen { g.constant(value.clone()) } else { g.param(value) };
        self.bound.insert(key.as_str(), v);
        v
    }

    /// Gradients of every bound, trainable parameter.
    pub fn collect_grads(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Vec<f64>> {
        self.bound
            .iter()
            .filter(|(_, &v)| g.requires_grad(v))
            .map(|(name, &v)| (name.to_string(), grads.get_or_zeros(v, g.value(v).len())))
            .collect()
    }
}
