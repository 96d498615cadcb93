use std::collections::BTreeMap;

use super::tape::{Gradients, Tape, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named parameter collection in stable (sorted) name order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S: Scalar> {
    map: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        ParamStore { map: BTreeMap::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<S>) {
        self.map.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<S>> {
        self.map.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<S>)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<S>)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.map.values().map(|t| t.len()).sum()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.map.iter().map(|(k, v)| (k.clone(), v.shape().to_vec())).collect()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<S>> {
        self.map
    }

    pub fn as_map(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.map
    }

    /// Registers every parameter as a named trainable leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<S>) -> Bound<'t, S> {
        Bound { vars: self.map.iter().map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone()))).collect() }
    }

    pub fn same_manifest(&self, other: &Self) -> bool {
        self.map.len() == other.map.len()
            && self.map.iter().zip(&other.map).all(|((ka, va), (kb, vb))| ka == kb && va.shape() == vb.shape())
    }

    pub fn cast<T: Scalar>(&self) -> ParamStore<T> {
        ParamStore { map: self.map.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }
}

impl<S: Scalar> FromIterator<(String, Tensor<S>)> for ParamStore<S> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<S>)>>(iter: I) -> Self {
        ParamStore { map: iter.into_iter().collect() }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t, S: Scalar> {
    vars: BTreeMap<String, Var<'t, S>>,
}

impl<'t, S: Scalar> Bound<'t, S> {
    pub fn from_map(vars: BTreeMap<String, Var<'t, S>>) -> Self {
        Bound { vars }
    }

    pub fn get(&self, name: &str) -> Result<Var<'t, S>> {
        self.vars.get(name).copied().ok_or_else(|| Error::invalid(format!("missing parameter `{name}`")))
    }

    pub fn as_map(&self) -> &BTreeMap<String, Var<'t, S>> {
        &self.vars
    }
}

/// Sums gradient maps in slice order.
pub fn reduce_gradients<S: Scalar>(parts: &[Gradients<S>]) -> Gradients<S> {
    let mut out = Gradients::new();
    for part in parts {
        for (k, g) in part {
            match out.get_mut(k) {
                Some(acc) => acc.add_assign(g),
                None => {
                    out.insert(k.clone(), g.clone());
                }
            }
        }
    }
    out
}
