use std::collections::BTreeMap;

use sha2::{Digest, Sha256};

use crate::error::{DpmnError, Result};

/// Dense row-major f64 tensor with an optional gradient accumulator.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if numel(&shape) != data.len() {
            return Err(DpmnError::Shape {
                op: "tensor",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel(shape)],
            grad: None,
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
            grad: None,
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: (0..numel(shape)).map(&mut f).collect(),
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
            grad: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, creating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) {
        debug_assert_eq!(g.len(), self.data.len());
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
    }
}

/// Named trainable tensors, iterated in lexicographic name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(DpmnError::config(format!("duplicate parameter name `{name}`")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| DpmnError::contract(format!("unknown parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total scalar count over parameters whose name satisfies `filter`.
    pub fn count_values(&self, filter: impl Fn(&str) -> bool) -> usize {
        self.params
            .iter()
            .filter(|(k, _)| filter(k))
            .map(|(_, t)| t.numel())
            .sum()
    }

    pub fn zero_grad(&mut self) {
        self.params.values_mut().for_each(Tensor::zero_grad);
    }

    /// SHA-256 over names, shapes and value bits of the selected parameters.
    pub fn checksum(&self, filter: impl Fn(&str) -> bool) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.params.iter().filter(|(k, _)| filter(k)) {
            hasher.update(name.as_bytes());
            for &s in t.shape() {
                hasher.update((s as u64).to_le_bytes());
            }
            for v in t.data() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }

    /// Copies values from `source` for every parameter the mapping names,
    /// requiring matching shapes. Returns the number of tensors imported.
    pub fn import_from(
        &mut self,
        source: &ParamStore,
        mapping: impl Fn(&str) -> Option<String>,
    ) -> Result<usize> {
        let mut imported = 0;
        for (name, target) in self.params.iter_mut() {
            let Some(src_name) = mapping(name) else { continue };
            let Some(src) = source.get(&src_name) else { continue };
            if src.shape() != target.shape() {
                return Err(DpmnError::Shape {
                    op: "import",
                    lhs: target.shape().to_vec(),
                    rhs: src.shape().to_vec(),
                });
            }
            target.data_mut().copy_from_slice(src.data());
            imported += 1;
        }
        Ok(imported)
    }
}
