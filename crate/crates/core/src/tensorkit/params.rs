use std::collections::BTreeMap;

use super::{RngStream, Scalar, Tensor};
use crate::error::{Error, Result};

/// Named parameter leaves of one model, in deterministic (sorted) order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        Self { tensors: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors.get(name).ok_or_else(|| Error::invalid(format!("unknown parameter {name}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet { tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect() }
    }

    /// Registers a conv layer `name.w: [cout, cin, k, k]`, `name.b: [cout]` with
    /// He-normal weights and zero bias.
    pub fn init_conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, rng: &mut RngStream) {
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let w = (0..cout * cin * k * k).map(|_| T::from_f64_lossy(rng.normal() * std)).collect();
        self.insert(format!("{name}.w"), Tensor::new(vec![cout, cin, k, k], w).unwrap());
        self.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }

    pub fn init_dense(&mut self, name: &str, fin: usize, fout: usize, rng: &mut RngStream) {
        let std = (2.0 / fin as f64).sqrt();
        let w = (0..fin * fout).map(|_| T::from_f64_lossy(rng.normal() * std)).collect();
        self.insert(format!("{name}.w"), Tensor::new(vec![fout, fin], w).unwrap());
        self.insert(format!("{name}.b"), Tensor::zeros(&[fout]));
    }
}

impl<T: Scalar> FromIterator<(String, Tensor<T>)> for ParamSet<T> {
    fn from_iter<I: IntoIterator<Item = (String, Tensor<T>)>>(iter: I) -> Self {
        Self { tensors: iter.into_iter().collect() }
    }
}
