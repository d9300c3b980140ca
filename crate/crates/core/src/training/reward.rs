use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Per-patch routing decision: one model index per patch.
pub type Action = Vec<usize>;

/// Per-patch terms of the cost-aware reward.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    /// IoU of the routed model minus IoU of the small model.
    pub gains: Vec<f64>,
    pub costs: Vec<f64>,
    pub lambda: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// Reward contribution of patch `p`.
    pub fn term(&self, p: usize) -> f64 {
        (1.0 - self.lambda) * self.gains[p] - self.lambda * self.costs[p]
    }
}

/// `ious[p][i]` is model `i`'s IoU on patch `p`; entry 0 and the routed entry must be present.
pub fn compute_reward(
    action: &[usize],
    ious: &[Vec<Option<f64>>],
    lambda: f64,
    costs: &[f64],
) -> Result<RewardBreakdown> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("lambda {lambda} outside [0, 1]")));
    }
    if action.len() != ious.len() {
        return Err(Error::invalid(format!("{} actions for {} patches", action.len(), ious.len())));
    }
    let mut out = RewardBreakdown { gains: Vec::with_capacity(action.len()), costs: Vec::new(), lambda, total: 0.0 };
    for (p, (&a, row)) in action.iter().zip(ious).enumerate() {
        let cost = *costs.get(a).ok_or_else(|| Error::invalid(format!("action {a} outside the suite")))?;
        let base = row.first().copied().flatten();
        let routed = row.get(a).copied().flatten();
        let (Some(base), Some(routed)) = (base, routed) else {
            return Err(Error::invalid(format!("missing IoU for patch {p} (model {a})")));
        };
        let gain = routed - base;
        out.total += (1.0 - lambda) * gain - lambda * cost;
        out.gains.push(gain);
        out.costs.push(cost);
    }
    Ok(out)
}
