use crate::error::{Error, Result};
use crate::tensorkit::{Mode, RngStream, Scalar};

use super::{UNet, UNetSpec};

/// Relative cost of each model: its share of the suite's total parameters.
///
/// The normaliser runs over every model including the smallest, so the
/// vector sums to one.
pub fn cost_vector(param_counts: &[usize]) -> Vec<f64> {
    let total: f64 = param_counts.iter().map(|&c| c as f64).sum();
    param_counts.iter().map(|&c| c as f64 / total).collect()
}

/// Ordered task models `f_0..f_m`, cheapest first.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSuite<T: Scalar = f32> {
    pub models: Vec<UNet<T>>,
    costs: Vec<f64>,
}

impl<T: Scalar> ModelSuite<T> {
    /// Instantiates fresh models; sizes must be strictly increasing.
    pub fn build(specs: &[UNetSpec], rng: &mut RngStream) -> Result<Self> {
        let models = specs
            .iter()
            .enumerate()
            .map(|(i, s)| UNet::new(s.clone(), &mut rng.fork(i as u64)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_models(models)
    }

    /// Wraps trained models, enforcing at least two of strictly increasing size.
    pub fn from_models(models: Vec<UNet<T>>) -> Result<Self> {
        if models.len() < 2 {
            return Err(Error::invalid("a suite needs at least two models"));
        }
        let counts: Vec<usize> = models.iter().map(|m| m.param_count()).collect();
        if counts.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid(format!("model sizes must strictly increase, got {counts:?}")));
        }
        Ok(Self::from_models_unchecked(models))
    }

    /// Wraps any non-empty list of models without the size ordering check.
    /// Used for degenerate suites (a single model, or copies of one model).
    pub fn from_models_unchecked(models: Vec<UNet<T>>) -> Self {
        let counts: Vec<usize> = models.iter().map(|m| m.param_count()).collect();
        let costs = cost_vector(&counts);
        Self { models, costs }
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    pub fn param_counts(&self) -> Vec<usize> {
        self.models.iter().map(|m| m.param_count()).collect()
    }

    pub fn num_classes(&self) -> usize {
        self.models[0].spec.num_classes
    }

    /// Flops of one eval-mode forward of model `i` on an `h × w` input.
    pub fn flops(&self, i: usize, h: usize, w: usize) -> Result<u64> {
        self.models[i].spec.flops(h, w, Mode::Eval)
    }
}
