//! Named parameter collections with a fixed canonical order.

use std::collections::HashMap;

use crate::{AutodiffError, Result, Tensor};

/// Ordered list of named tensors. The canonical order is the registration
/// order; flattening concatenates tensors in that order, row-major.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamVector {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamVector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a parameter; names must be unique.
    pub fn register(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(AutodiffError::Contract(format!(
                "parameter `{name}` registered twice"
            )));
        }
        let id = self.tensors.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.tensors.push(tensor);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar elements.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensor(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.numel());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`flatten`](Self::flatten) using `self` as the shape template.
    pub fn unflatten(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.numel() {
            return Err(AutodiffError::Shape(format!(
                "flat vector has {} elements, template needs {}",
                flat.len(),
                self.numel()
            )));
        }
        let mut offset = 0;
        let tensors = self
            .tensors
            .iter()
            .map(|t| {
                let n = t.len();
                let out = Tensor::from_parts(t.shape().to_vec(), flat[offset..offset + n].to_vec());
                offset += n;
                out
            })
            .collect();
        Ok(Self {
            names: self.names.clone(),
            tensors,
            index: self.index.clone(),
        })
    }

    /// Same names and shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
            index: self.index.clone(),
        }
    }

    /// True when both vectors carry the same names and shapes in the same order.
    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.shape() == b.shape())
    }

    pub fn bit_eq(&self, other: &ParamVector) -> bool {
        self.names == other.names
            && self
                .tensors
                .iter()
                .zip(&other.tensors)
                .all(|(a, b)| a.bit_eq(b))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.tensors {
            t.data_mut().iter_mut().for_each(|v| *v *= factor);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut p = ParamVector::new();
        p.register("w", Tensor::scalar(1.0)).unwrap();
        assert!(p.register("w", Tensor::scalar(2.0)).is_err());
    }

    proptest! {
        #[test]
        fn flatten_roundtrip(sizes in prop::collection::vec((1usize..4, 1usize..4), 1..5), seed in any::<u64>()) {
            let mut p = ParamVector::new();
            let mut x = seed as f64;
            for (i, (r, c)) in sizes.iter().enumerate() {
                let data = (0..r * c).map(|_| { x = (x * 1.37 + 0.11) % 7.0; x }).collect();
                p.register(format!("t{i}"), Tensor::new(vec![*r, *c], data).unwrap()).unwrap();
            }
            let flat = p.flatten();
            prop_assert_eq!(flat.len(), p.numel());
            let back = p.unflatten(&flat).unwrap();
            prop_assert!(back.bit_eq(&p));
        }
    }
}
