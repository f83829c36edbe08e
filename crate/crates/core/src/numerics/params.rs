use std::collections::BTreeMap;

use super::graph::{accumulate, Graph, Var};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Named model tensors in a fixed (sorted) order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterTree<T> {
    entries: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParameterTree<T> {
    pub fn new() -> Self {
        Self {
            entries: BTreeMap::new(),
        }
    }

    pub fn from_map(entries: BTreeMap<String, Tensor<T>>) -> Self {
        Self { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.entries.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
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

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.entries.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape())))
                .collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParameterTree<U> {
        ParameterTree {
            entries: self.entries.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Errors unless `other` has exactly the same names and shapes.
    pub fn check_same_layout(&self, other: &Self) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Contract(format!(
                "parameter trees differ in size: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, va), (kb, vb)) in self.entries.iter().zip(&other.entries) {
            if ka != kb || va.shape() != vb.shape() {
                return Err(Error::Contract(format!(
                    "parameter trees differ: {ka}{:?} vs {kb}{:?}",
                    va.shape(),
                    vb.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.check_same_layout(other)?;
        for (a, b) in self.entries.values_mut().zip(other.entries.values()) {
            accumulate(a, b);
        }
        Ok(())
    }

    /// Euclidean norm over all entries, summed in name order.
    pub fn global_norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|t| t.data().iter())
            .map(|v| {
                let x = v.as_f64();
                x * x
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.entries.values().all(Tensor::all_finite)
    }

    /// Registers every entry as a trainable leaf on `g`.
    pub fn register(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.param(k, v.clone())))
                .collect(),
        }
    }

    /// Registers every entry as a constant (no gradients recorded).
    pub fn register_frozen(&self, g: &mut Graph<T>) -> ParamVars {
        ParamVars {
            vars: self
                .entries
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }
}

/// Graph handles for the leaves of a registered [`ParameterTree`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("missing parameter {name}")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }
}
