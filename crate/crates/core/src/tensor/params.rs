use std::collections::HashMap;

use indexmap::IndexMap;

use super::{Graph, Scalar, Tensor, Var};
use crate::error::{shape_err, Error, Result};

/// Adam first/second moments and the number of updates applied.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
    /// Frozen parameters and running statistics are not trainable.
    pub trainable: bool,
    pub adam: AdamState<T>,
}

/// Named model parameters in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T = f32> {
    params: IndexMap<String, Param<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: IndexMap::new() }
    }

    pub fn insert(&mut self, name: &str, value: Tensor<T>, trainable: bool) -> Result<()> {
        if self.params.contains_key(name) {
            return Err(Error::Argument(format!("duplicate parameter {name}")));
        }
        let n = value.numel();
        let adam = AdamState { m: vec![T::zero(); n], v: vec![T::zero(); n], step: 0 };
        self.params
            .insert(name.to_owned(), Param { value, grad: None, trainable, adam });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.get_mut(name)
    }

    pub fn value(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.value)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))
    }

    /// Replaces a parameter's values, keeping its shape.
    pub fn set_value(&mut self, name: &str, data: Vec<T>) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        if data.len() != p.value.numel() {
            return Err(shape_err!("{name}: {} values for {:?}", data.len(), p.value.shape()));
        }
        p.value.data_mut().copy_from_slice(&data);
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn trainable_names(&self) -> Vec<&str> {
        self.iter().filter(|(_, p)| p.trainable).map(|(n, _)| n).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar values, trainable or not.
    pub fn numel(&self) -> usize {
        self.params.values().map(|p| p.value.numel()).sum()
    }

    pub fn trainable_numel(&self) -> usize {
        self.params.values().filter(|p| p.trainable).map(|p| p.value.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            p.grad = None;
        }
    }

    pub fn accumulate_grad(&mut self, name: &str, grad: &[T]) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        if grad.len() != p.value.numel() {
            return Err(shape_err!("gradient for {name} has {} values", grad.len()));
        }
        match &mut p.grad {
            Some(acc) => acc.iter_mut().zip(grad).for_each(|(a, g)| *a += *g),
            None => p.grad = Some(grad.to_vec()),
        }
        Ok(())
    }
}

/// Maps parameter names to graph leaves, binding each name once per graph
/// so repeated uses share one node and their gradients accumulate.
#[derive(Debug, Default)]
pub struct Binder {
    bound: HashMap<String, Var>,
    order: Vec<String>,
}

impl Binder {
    pub fn new() -> Self {
        Self::default()
    }

    /// Leaf for `name`; differentiable iff the parameter is trainable.
    pub fn get<T: Scalar>(&mut self, g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let p = store
            .get(name)
            .ok_or_else(|| Error::Argument(format!("unknown parameter {name}")))?;
        let v = g.input(p.value.clone(), p.trainable);
        self.bound.insert(name.to_owned(), v);
        self.order.push(name.to_owned());
        Ok(v)
    }

    pub fn var(&self, name: &str) -> Option<Var> {
        self.bound.get(name).copied()
    }

    /// Adds the gradients collected in `g` to the store.
    pub fn export_grads<T: Scalar>(&self, g: &Graph<T>, store: &mut ParamStore<T>) -> Result<()> {
        for name in &self.order {
            if let Some(grad) = g.grad(self.bound[name]) {
                store.accumulate_grad(name, grad)?;
            }
        }
        Ok(())
    }
}
