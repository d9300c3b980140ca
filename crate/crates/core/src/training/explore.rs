use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::PatchProbs;
use crate::tensorkit::RngStream;

use super::Action;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    RlPretrain,
    Finetune,
}

impl Phase {
    /// Exploit probability at the first and last epoch.
    pub fn alpha_range(self) -> (f64, f64) {
        match self {
            Phase::RlPretrain => (0.7, 0.95),
            Phase::Finetune => (0.95, 1.0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleState {
    pub alpha: f64,
    pub epoch: usize,
    pub phase: Phase,
}

/// Linear exploit-probability schedule over `epochs` epochs.
pub fn schedule(phase: Phase, epoch: usize, epochs: usize) -> ScheduleState {
    let (a0, a1) = phase.alpha_range();
    let t = if epochs <= 1 { 0.0 } else { epoch.min(epochs - 1) as f64 / (epochs - 1) as f64 };
    ScheduleState { alpha: a0 + (a1 - a0) * t, epoch, phase }
}

fn draw(row: &[f64], rng: &mut RngStream) -> usize {
    let u = rng.uniform();
    let mut acc = 0.0;
    for (i, &p) in row.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    row.iter().rposition(|&p| p > 0.0).unwrap_or(row.len() - 1)
}

/// Per patch: with probability `alpha` sample the policy, otherwise a uniform model.
pub fn sample_action(probs: &PatchProbs, alpha: f64, rng: &mut RngStream) -> Result<Action> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    probs
        .rows
        .iter()
        .map(|row| {
            if row.is_empty() || row.iter().any(|&p| !(p >= 0.0)) || (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
                return Err(Error::invalid(format!("{row:?} is not a distribution")));
            }
            Ok(if rng.uniform() < alpha { draw(row, rng) } else { rng.below(row.len()) })
        })
        .collect()
}
