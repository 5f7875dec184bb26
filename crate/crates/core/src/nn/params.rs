use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Learnable,
    /// Batch-norm running statistics: saved and restored, never optimized.
    RunningStat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<S>,
    pub kind: ParamKind,
}

impl<S> Param<S> {
    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn learnable(&self) -> bool {
        self.kind == ParamKind::Learnable
    }
}

/// Named parameter arrays in registration order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new(), index: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, value: Vec<S>, kind: ParamKind) -> ParamId {
        let name = name.into();
        assert_eq!(shape.iter().product::<usize>(), value.len(), "parameter `{name}` shape/value mismatch");
        assert!(!self.index.contains_key(&name), "duplicate parameter name `{name}`");
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        self.params.push(Param { name, shape, value, kind });
        ParamId(id)
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Result<&Param<S>> {
        self.id(name)
            .map(|id| &self.params[id.0])
            .ok_or_else(|| Error::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<S>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<S>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Number of learnable scalars (running statistics excluded).
    pub fn count_learnable(&self) -> usize {
        self.params.iter().filter(|p| p.learnable()).map(|p| p.len()).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        Grads { g: self.params.iter().map(|p| vec![S::zero(); p.len()]).collect() }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// Converts every array to another scalar type.
    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    value: p.value.iter().map(|v| T::c(v.as_f64())).collect(),
                    kind: p.kind,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<S> {
    pub g: Vec<Vec<S>>,
}

impl<S: Scalar> Grads<S> {
    pub fn get_mut(&mut self, id: ParamId) -> &mut [S] {
        &mut self.g[id.0]
    }

    pub fn get(&self, id: ParamId) -> &[S] {
        &self.g[id.0]
    }

    pub fn all_finite(&self) -> bool {
        self.g.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

/// Registers parameters under a dotted name prefix and draws their initial values.
pub struct Builder<'a, S> {
    pub store: &'a mut ParamStore<S>,
    pub rng: &'a mut ChaCha8Rng,
    prefix: Vec<String>,
}

impl<'a, S: Scalar> Builder<'a, S> {
    pub fn new(store: &'a mut ParamStore<S>, rng: &'a mut ChaCha8Rng) -> Self {
        Self { store, rng, prefix: Vec::new() }
    }

    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> R) -> R {
        self.prefix.push(name.to_string());
        let out = f(self);
        self.prefix.pop();
        out
    }

    fn full(&self, name: &str) -> String {
        let mut s = self.prefix.join(".");
        if !s.is_empty() {
            s.push('.');
        }
        s.push_str(name);
        s
    }

    /// Normal init with standard deviation `std`.
    pub fn normal(&mut self, name: &str, shape: Vec<usize>, std: f64) -> ParamId {
        let n = shape.iter().product();
        let value = (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(self.rng);
                S::c(z * std)
            })
            .collect();
        let full = self.full(name);
        self.store.add(full, shape, value, ParamKind::Learnable)
    }

    pub fn uniform(&mut self, name: &str, shape: Vec<usize>, bound: f64) -> ParamId {
        let n = shape.iter().product();
        let value = (0..n).map(|_| S::c(self.rng.random_range(-bound..=bound))).collect();
        let full = self.full(name);
        self.store.add(full, shape, value, ParamKind::Learnable)
    }

    pub fn constant(&mut self, name: &str, shape: Vec<usize>, v: f64) -> ParamId {
        let n = shape.iter().product();
        let full = self.full(name);
        self.store.add(full, shape, vec![S::c(v); n], ParamKind::Learnable)
    }

    pub fn running(&mut self, name: &str, len: usize, v: f64) -> ParamId {
        let full = self.full(name);
        self.store.add(full, vec![len], vec![S::c(v); len], ParamKind::RunningStat)
    }
}
