use std::collections::BTreeMap;

use ndarray::Array2;

use super::{DiffError, Graph, Matrix, Result, Var};

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    lookup: BTreeMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its slot. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, value: Matrix) -> Result<usize> {
        let name = name.into();
        if self.lookup.contains_key(&name) {
            return Err(DiffError::Invalid(format!("duplicate parameter {name}")));
        }
        self.lookup.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.values.push(value);
        Ok(self.names.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slot(&self, name: &str) -> Option<usize> {
        self.lookup.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.slot(name).map(|i| &self.values[i])
    }

    pub fn name(&self, slot: usize) -> &str {
        &self.names[slot]
    }

    pub fn value(&self, slot: usize) -> &Matrix {
        &self.values[slot]
    }

    pub fn value_mut(&mut self, slot: usize) -> &mut Matrix {
        &mut self.values[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(self.values.iter())
    }

    pub fn values(&self) -> &[Matrix] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Matrix] {
        &mut self.values
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|m| m.len()).sum()
    }

    /// Copies every parameter into `graph`, trainable when `trainable`.
    pub fn bind(&self, graph: &mut Graph, trainable: bool) -> Vec<Var> {
        self.values
            .iter()
            .map(|m| {
                if trainable {
                    graph.param(m.clone())
                } else {
                    graph.constant(m.clone())
                }
            })
            .collect()
    }

    /// Gradients of the bound leaves, in slot order.
    pub fn grads(&self, graph: &Graph, bound: &[Var]) -> Vec<Matrix> {
        bound.iter().map(|v| graph.grad(*v)).collect()
    }

    pub fn zeros_like(&self) -> Vec<Matrix> {
        self.values.iter().map(|m| Array2::zeros(m.dim())).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|m| m.iter().all(|x| x.is_finite()))
    }
}
