//! Named parameter collections and initializers.

use std::collections::BTreeMap;

use super::rng::RngState;
use super::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.tensors.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn subset(&self, prefix: &str) -> ParamStore {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore) {
        self.tensors.extend(other.tensors);
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    pub fn init_normal(&mut self, name: &str, shape: &[usize], std: f64, rng: &mut RngState) {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| (rng.normal() * std) as f32).collect();
        self.insert(name, Tensor::new(shape.to_vec(), data).expect("numel"));
    }

    pub fn init_const(&mut self, name: &str, shape: &[usize], value: f32) {
        self.insert(name, Tensor::full(shape, value));
    }

    /// Weight `[fan_in, fan_out]` with std `1/sqrt(fan_in)` plus zero bias.
    pub fn init_linear(&mut self, prefix: &str, fan_in: usize, fan_out: usize, rng: &mut RngState) {
        self.init_normal(
            &format!("{prefix}.w"),
            &[fan_in, fan_out],
            1.0 / (fan_in as f64).sqrt(),
            rng,
        );
        self.init_const(&format!("{prefix}.b"), &[fan_out], 0.0);
    }

    pub fn init_conv(
        &mut self,
        prefix: &str,
        kernel: usize,
        c_in: usize,
        c_out: usize,
        rng: &mut RngState,
    ) {
        self.init_linear(prefix, kernel * c_in, c_out, rng);
    }

    pub fn init_layer_norm(&mut self, prefix: &str, dim: usize) {
        self.init_const(&format!("{prefix}.g"), &[dim], 1.0);
        self.init_const(&format!("{prefix}.b"), &[dim], 0.0);
    }
}
