use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Counts of (reference model, chosen model) pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub matrix: Vec<Vec<u64>>,
    pub accuracy: f64,
}

pub fn assignment_confusion(actions: &[usize], reference: &[usize], num_models: usize) -> Result<Confusion> {
    if actions.len() != reference.len() || actions.is_empty() {
        return Err(Error::invalid(format!("{} actions vs {} reference entries", actions.len(), reference.len())));
    }
    let mut matrix = vec![vec![0u64; num_models]; num_models];
    let mut hits = 0u64;
    for (&a, &r) in actions.iter().zip(reference) {
        if a >= num_models || r >= num_models {
            return Err(Error::invalid(format!("model index {} outside 0..{num_models}", a.max(r))));
        }
        matrix[r][a] += 1;
        hits += (a == r) as u64;
    }
    Ok(Confusion { matrix, accuracy: hits as f64 / actions.len() as f64 })
}

/// Fraction of assignments per model.
pub fn marginal(actions: &[usize], num_models: usize) -> Vec<f64> {
    let mut counts = vec![0.0; num_models];
    for &a in actions {
        counts[a] += 1.0;
    }
    let n = actions.len().max(1) as f64;
    counts.into_iter().map(|c| c / n).collect()
}

/// Total variation distance between two distributions on the same support.
pub fn tvd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() || p.is_empty() {
        return Err(Error::invalid(format!("supports differ: {} vs {}", p.len(), q.len())));
    }
    for d in [p, q] {
        if d.iter().any(|&v| !(v >= 0.0)) || (d.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!("{d:?} is not a distribution")));
        }
    }
    Ok(0.5 * p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>())
}
