use std::collections::BTreeMap;

use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Adam optimizer state with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct AdamState<T: Scalar = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, first: BTreeMap::new(), second: BTreeMap::new() }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads` must name exactly the parameters in `params`.
    /// An all-zero gradient set leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut ParamSet<T>, grads: &BTreeMap<String, Tensor<T>>) -> Result<()> {
        if grads.len() != params.len() || params.names().any(|n| !grads.contains_key(n)) {
            let missing: Vec<_> = params.names().filter(|n| !grads.contains_key(*n)).collect();
            let extra: Vec<_> = grads.keys().filter(|n| params.get(n).is_err()).collect();
            return Err(Error::GradientMismatch(format!("missing {missing:?}, extra {extra:?}")));
        }
        for (name, p) in params.iter() {
            if grads[name].shape() != p.shape() {
                return Err(Error::GradientMismatch(format!(
                    "{name}: gradient {:?} vs parameter {:?}",
                    grads[name].shape(),
                    p.shape()
                )));
            }
        }
        if grads.values().all(|g| g.data().iter().all(|v| *v == T::zero())) {
            return Ok(());
        }
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(t);
        let c2 = 1.0 - b2.powi(t);
        let (b1t, b2t) = (T::from_f64_lossy(b1), T::from_f64_lossy(b2));
        let (one_b1, one_b2) = (T::from_f64_lossy(1.0 - b1), T::from_f64_lossy(1.0 - b2));
        let step_size = T::from_f64_lossy(self.lr / c1);
        let inv_c2 = T::from_f64_lossy(1.0 / c2);
        let eps = T::from_f64_lossy(self.eps);
        for (name, p) in params.iter_mut() {
            let g = &grads[name];
            let m = self.first.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            let v = self.second.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
                *mi = b1t * *mi + one_b1 * gi;
                *vi = b2t * *vi + one_b2 * gi * gi;
                *pi -= step_size * *mi / ((*vi * inv_c2).sqrt() + eps);
            }
        }
        Ok(())
    }
}
