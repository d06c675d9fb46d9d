//! Named parameter storage shared by the trunk, heads and lasso rows.

use std::collections::BTreeMap;

use rand::Rng;

use crate::autodiff::{Graph, NodeId, Tensor};

/// Ordered map from parameter name to value.
///
/// Names are dotted paths: `trunk.*`, `head.<task>.*`, `lasso.<role>.<task>`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    map: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.map.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn with_prefix<'a>(&'a self, prefix: &'a str) -> impl Iterator<Item = (&'a str, &'a Tensor)> + 'a {
        self.map
            .range(prefix.to_string()..)
            .take_while(move |(k, _)| k.starts_with(prefix))
            .map(|(k, v)| (k.as_str(), v))
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.map.values().map(Tensor::len).sum()
    }

    /// Adds `delta` elementwise to the named parameter.
    pub fn add_delta(&mut self, name: &str, delta: &Tensor) {
        let p = self
            .map
            .get_mut(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        debug_assert_eq!(p.shape(), delta.shape());
        for (v, d) in p.data_mut().iter_mut().zip(delta.data()) {
            *v += d;
        }
    }

    /// Inserts a tensor with i.i.d. `N(0, std^2)`-like entries (uniform
    /// with matching variance).
    pub fn init_scaled(&mut self, name: impl Into<String>, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let half_width = std * 3f64.sqrt();
        let mut t = Tensor::zeros(shape);
        for v in t.data_mut() {
            *v = rng.random_range(-half_width..=half_width);
        }
        self.insert(name, t);
    }

    /// Little-endian image of every parameter in name order.
    pub fn to_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (name, t) in &self.map {
            out.extend_from_slice(name.as_bytes());
            out.extend(t.to_le_bytes());
        }
        out
    }
}

/// Lazily registers store entries as graph leaves.
///
/// Names matching a frozen prefix become constants and receive no
/// gradient; everything else becomes a parameter.
pub struct Bindings<'a> {
    store: &'a ParamStore,
    bound: BTreeMap<String, NodeId>,
    frozen: Vec<String>,
}

impl<'a> Bindings<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Self {
            store,
            bound: BTreeMap::new(),
            frozen: Vec::new(),
        }
    }

    pub fn freeze_prefix(mut self, prefix: impl Into<String>) -> Self {
        self.frozen.push(prefix.into());
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// Node for `name`, creating the leaf on first use.
    ///
    /// Panics if the store has no such parameter; architectures create all
    /// of their parameters at init time.
    pub fn node(&mut self, g: &mut Graph, name: &str) -> NodeId {
        if let Some(&id) = self.bound.get(name) {
            return id;
        }
        let value = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"))
            .clone();
        let id = if self.frozen.iter().any(|p| name.starts_with(p.as_str())) {
            g.constant(value)
        } else {
            g.parameter(name, value)
        };
        self.bound.insert(name.to_string(), id);
        id
    }
}
