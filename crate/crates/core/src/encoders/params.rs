use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::TensorError;

/// Named parameter tensors in a fixed creation order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Option<Self> {
        if names.len() != tensors.len() {
            return None;
        }
        let mut set = Self::new();
        for (n, t) in names.into_iter().zip(tensors) {
            if set.index.contains_key(&n) {
                return None;
            }
            set.push(n, t);
        }
        Some(set)
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub(crate) fn push_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut impl Rng) {
        let normal = Normal::new(0.0, std).expect("finite std");
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.push(name, Tensor::new(shape.to_vec(), data).expect("valid shape"));
    }

    pub(crate) fn push_full(&mut self, name: &str, shape: &[usize], value: f64) {
        self.push(name, Tensor::full(shape, value));
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
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

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.tensors[i])
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.tensors.iter().map(Tensor::len).collect()
    }

    /// Records every parameter as a differentiable leaf; the result is aligned with `tensors()`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
    }

    pub fn bind_constant(&self, tape: &mut Tape) -> Vec<Var> {
        self.tensors.iter().map(|t| tape.constant(t.clone())).collect()
    }

    /// Flat concatenation of all parameter values.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites all parameter values from a flat vector in `flatten` order.
    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.numel(), "flat parameter length");
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
    }
}

/// Looks up a bound parameter var by name.
pub(crate) fn var(params: &ParamSet, vars: &[Var], name: &str) -> Result<Var, TensorError> {
    params
        .position(name)
        .and_then(|i| vars.get(i).copied())
        .ok_or_else(|| TensorError::invalid("encoder", format!("parameter {name} missing")))
}
