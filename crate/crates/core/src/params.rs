//! Named trainable parameters.

use std::collections::HashMap;

use crate::tensor::{Element, Tensor, TensorError};

/// A trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T: Element> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

/// Ordered collection of parameters with unique names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T: Element> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize, TensorError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(TensorError::InvalidArgument(format!("duplicate parameter {name}")));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter {
            name: name.clone(),
            value,
            grad,
        });
        self.index.insert(name, self.params.len() - 1);
        Ok(self.params.len() - 1)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, index: usize) -> &Parameter<T> {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Parameter<T> {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.index_of(name).map(|i| &self.params[i])
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(T::zero());
        }
    }

    /// Converts every value to another element type; gradients are reset.
    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        let mut out = ParamStore::new();
        for p in &self.params {
            out.insert(p.name.clone(), p.value.cast()).expect("names already unique");
        }
        out
    }
}
